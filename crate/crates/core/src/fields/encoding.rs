//! Sinusoidal positional encoding.
//!
//! Layout for an input `x` of dimension `D` and `L` frequencies:
//! `[x_0..x_D | sin(2^0 pi x) | cos(2^0 pi x) | ... | sin(2^(L-1) pi x) | cos(2^(L-1) pi x)]`
//! where each block holds all `D` coordinates in order. The passthrough block
//! is optional in [`positional_encoding`] and always present for field inputs.

use std::f64::consts::PI;

use ins_autograd::{Tensor, Var};
use ndarray::IxDyn;

/// Width of a field input encoding (passthrough included).
pub fn encoded_width(dim: usize, freqs: usize) -> usize {
    dim + 2 * dim * freqs
}

pub fn positional_encoding(x: &[f64], freqs: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (2 * freqs + usize::from(include_input)));
    if include_input {
        out.extend_from_slice(x);
    }
    for k in 0..freqs {
        let scale = 2f64.powi(k as i32) * PI;
        out.extend(x.iter().map(|v| (scale * v).sin()));
        out.extend(x.iter().map(|v| (scale * v).cos()));
    }
    out
}

/// Encodes an `N×D` batch, passthrough included.
pub fn encode<'t>(x: Var<'t>, freqs: usize) -> Var<'t> {
    if freqs == 0 {
        return x;
    }
    let mut parts = Vec::with_capacity(1 + 2 * freqs);
    parts.push(x);
    for k in 0..freqs {
        let scaled = x.scale(2f64.powi(k as i32) * PI);
        parts.push(scaled.sin());
        parts.push(scaled.cos());
    }
    Var::concat(&parts, 1)
}

/// Encodes an `N×3` batch and also returns the Jacobian of the encoding with
/// respect to the input, stacked as `3N×E` (rows `aN..(a+1)N` hold the
/// derivative with respect to coordinate `a`).
pub fn encode_with_jacobian<'t>(x: Var<'t>, freqs: usize) -> (Var<'t>, Var<'t>) {
    let tape = x.tape();
    let shape = x.shape();
    let (n, dim) = (shape[0], shape[1]);
    let enc = encode(x, freqs);

    // Elementwise derivative of each encoding entry w.r.t. its own source coordinate.
    let mut parts = Vec::with_capacity(1 + 2 * freqs);
    parts.push(tape.constant(Tensor::ones(IxDyn(&[n, dim]))));
    for k in 0..freqs {
        let scale = 2f64.powi(k as i32) * PI;
        let scaled = x.scale(scale);
        parts.push(scaled.cos().scale(scale));
        parts.push(scaled.sin().scale(-scale));
    }
    let deriv = Var::concat(&parts, 1);
    let width = encoded_width(dim, freqs);

    let rows: Vec<Var<'t>> =
        (0..dim)
            .map(|a| {
                let mask = Tensor::from_shape_fn(IxDyn(&[1, width]), |ix| {
                    if ix[1] % dim == a {
                        1.0
                    } else {
                        0.0
                    }
                });
                deriv.mul(&tape.constant(mask))
            })
            .collect();
    (enc, Var::concat(&rows, 0))
}
