//! Central finite differences for verifying tape gradients.

use crate::tape::Tensor;

/// Central-difference derivative of `f` with respect to every entry of `at`.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, step: f64) -> Tensor {
    let mut probe = at.clone();
    let mut out = Tensor::zeros(at.raw_dim());
    for i in 0..at.len() {
        let orig = probe.as_slice().expect("contiguous")[i];
        probe.as_slice_mut().expect("contiguous")[i] = orig + step;
        let plus = f(&probe);
        probe.as_slice_mut().expect("contiguous")[i] = orig - step;
        let minus = f(&probe);
        probe.as_slice_mut().expect("contiguous")[i] = orig;
        out.as_slice_mut().expect("contiguous")[i] = (plus - minus) / (2.0 * step);
    }
    out
}

/// Relative error `|a - b| / max(|a|, |b|, floor)` maximised over entries.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn quadratic() {
        let at = arr1(&[1.0, -2.0, 0.5]).into_dyn();
        let g = numeric_gradient(|x| x.iter().map(|v| v * v).sum(), &at, 1e-4);
        let exact = at.mapv(|v| 2.0 * v);
        assert!(max_relative_error(&g, &exact, 1e-12) < 1e-8);
    }
}
