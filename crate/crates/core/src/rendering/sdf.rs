//! Sphere tracing and the first-order differentiable surface point.

use ins_autograd::{Tensor, Var};
use ndarray::Array2;

use super::Ray;
use crate::error::{InsError, Result};
use crate::fields::{FieldKind, InsField};

/// Below this `|grad f . v|` the linearized intersection is ill-posed.
pub const GRAZING_EPS: f64 = 1e-6;

pub trait SignedDistance {
    fn distance(&self, x: [f64; 3]) -> f64;
    /// Exact spatial gradient.
    fn gradient(&self, x: [f64; 3]) -> [f64; 3];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl SignedDistance for Sphere {
    fn distance(&self, x: [f64; 3]) -> f64 {
        norm(sub(x, self.center)) - self.radius
    }

    fn gradient(&self, x: [f64; 3]) -> [f64; 3] {
        let d = sub(x, self.center);
        let n = norm(d);
        if n == 0.0 {
            return [0.0; 3];
        }
        [d[0] / n, d[1] / n, d[2] / n]
    }
}

/// `f(x) = normal . x - offset` with a unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl SignedDistance for Plane {
    fn distance(&self, x: [f64; 3]) -> f64 {
        dot(self.normal, x) - self.offset
    }

    fn gradient(&self, _: [f64; 3]) -> [f64; 3] {
        self.normal
    }
}

impl SignedDistance for InsField {
    fn distance(&self, x: [f64; 3]) -> f64 {
        assert_eq!(self.kind(), FieldKind::Sdf, "not a signed-distance field");
        self.sdf_batch(&Array2::from_shape_vec((1, 3), x.to_vec()).expect("1×3"))[0]
    }

    fn gradient(&self, x: [f64; 3]) -> [f64; 3] {
        assert_eq!(self.kind(), FieldKind::Sdf, "not a signed-distance field");
        let g = self.sdf_gradient_batch(&Array2::from_shape_vec((1, 3), x.to_vec()).expect("1×3"));
        [g[[0, 0]], g[[0, 1]], g[[0, 2]]]
    }
}

pub fn sdf_normal(sdf: &(impl SignedDistance + ?Sized), x: [f64; 3]) -> Result<[f64; 3]> {
    let g = sdf.gradient(x);
    let n = norm(g);
    if !(n >= 1e-8) {
        return Err(InsError::DegenerateGradient(n));
    }
    Ok([g[0] / n, g[1] / n, g[2] / n])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceOptions {
    pub max_steps: usize,
    pub eps: f64,
    /// Fraction of `f` advanced per step.
    pub damping: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            max_steps: 64,
            eps: 1e-4,
            damping: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trace {
    pub t: f64,
    pub converged: bool,
}

/// Marches from `ray.near` until `|f| < eps`; leaving `[near, far]` or running
/// out of steps is a miss.
pub fn sphere_trace(sdf: &(impl SignedDistance + ?Sized), ray: &Ray, opts: &TraceOptions) -> Trace {
    let mut t = ray.near;
    for _ in 0..opts.max_steps {
        let f = sdf.distance(ray.at(t));
        if f.abs() < opts.eps {
            return Trace { t, converged: true };
        }
        t += opts.damping * f;
        if t > ray.far || t < ray.near || !t.is_finite() {
            break;
        }
    }
    Trace {
        t,
        converged: false,
    }
}

/// [`sphere_trace`] for a learned SDF, evaluating all live rays together.
pub fn sphere_trace_field(field: &InsField, rays: &[Ray], opts: &TraceOptions) -> Vec<Trace> {
    let mut out: Vec<Trace> = rays
        .iter()
        .map(|r| Trace {
            t: r.near,
            converged: false,
        })
        .collect();
    let mut live: Vec<usize> = (0..rays.len()).collect();
    for _ in 0..opts.max_steps {
        if live.is_empty() {
            break;
        }
        let mut pts = Array2::zeros((live.len(), 3));
        for (row, &i) in live.iter().enumerate() {
            let p = rays[i].at(out[i].t);
            for a in 0..3 {
                pts[[row, a]] = p[a];
            }
        }
        let f = field.sdf_batch(&pts);
        let mut next = Vec::with_capacity(live.len());
        for (&i, f) in live.iter().zip(f) {
            if f.abs() < opts.eps {
                out[i].converged = true;
                continue;
            }
            let t = out[i].t + opts.damping * f;
            out[i].t = t;
            if t <= rays[i].far && t >= rays[i].near && t.is_finite() {
                next.push(i);
            }
        }
        live = next;
    }
    out
}

/// `x = o + t0 v - v f(o + t0 v) / (grad f0 . v0)` evaluated by value.
pub fn differentiable_intersection(
    sdf: &(impl SignedDistance + ?Sized),
    ray: &Ray,
    t0: f64,
) -> Result<[f64; 3]> {
    let x0 = ray.at(t0);
    let den = dot(sdf.gradient(x0), ray.direction);
    if !(den.abs() >= GRAZING_EPS) {
        return Err(InsError::GrazingRay(den.abs()));
    }
    let f = sdf.distance(x0);
    let v = ray.direction;
    Ok([
        x0[0] - v[0] * f / den,
        x0[1] - v[1] * f / den,
        x0[2] - v[2] * f / den,
    ])
}

/// Differentiable surface points for `R` rays. `t0` and `den`
/// (`grad f0 . v0`) are `R×1` constants of the linearization; gradients reach
/// `origins`, `dirs` and whatever `f` depends on.
pub fn intersection_on_tape<'t>(
    origins: Var<'t>,
    dirs: Var<'t>,
    t0: &Tensor,
    den: &Tensor,
    f: impl FnOnce(Var<'t>) -> Var<'t>,
) -> Result<Var<'t>> {
    if let Some(d) = den.iter().find(|d| !(d.abs() >= GRAZING_EPS)) {
        return Err(InsError::GrazingRay(d.abs()));
    }
    let tape = origins.tape();
    let x0 = origins.add(&dirs.mul(&tape.constant(t0.clone())));
    let fx = f(x0);
    let step = fx.div(&tape.constant(den.clone()));
    Ok(x0.sub(&dirs.mul(&step)))
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}
