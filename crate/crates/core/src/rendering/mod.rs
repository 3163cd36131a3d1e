//! Differentiable image formation.

mod sdf;

use ins_autograd::{Binding, ParamSet, Tape, Tensor, Trainable, Var};
use ndarray::{Array2, IxDyn};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{InsError, Result};
use crate::fields::{FieldKind, InsField, StyleCode};

pub use sdf::{
    differentiable_intersection, intersection_on_tape, sdf_normal, sphere_trace,
    sphere_trace_field, Plane, SignedDistance, Sphere, Trace, TraceOptions, GRAZING_EPS,
};

/// Floor of the expected-depth denominator.
pub const DEPTH_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    /// Unit length.
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3], near: f64, far: f64) -> Result<Self> {
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(InsError::Argument(format!(
                "ray direction has norm {norm}, expected 1"
            )));
        }
        if !(near > 0.0 && near < far) {
            return Err(InsError::Argument(format!(
                "ray bounds must satisfy 0 < near < far, got ({near}, {far})"
            )));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// Sample depths along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

pub fn stratified_samples<R: Rng + ?Sized>(
    ray: &Ray,
    k: usize,
    jitter: bool,
    rng: &mut R,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(InsError::Argument("sample count must be >= 1".into()));
    }
    let h = (ray.far - ray.near) / k as f64;
    let depths: Vec<f64> = (0..k)
        .map(|i| {
            let u = if jitter { rng.random::<f64>() } else { 0.5 };
            ray.near + (i as f64 + u) * h
        })
        .collect();
    Ok(with_deltas(depths, h))
}

/// Bin midpoints, no randomness involved.
pub fn midpoint_samples(ray: &Ray, k: usize) -> Result<SampleSet> {
    if k == 0 {
        return Err(InsError::Argument("sample count must be >= 1".into()));
    }
    let h = (ray.far - ray.near) / k as f64;
    let depths = (0..k).map(|i| ray.near + (i as f64 + 0.5) * h).collect();
    Ok(with_deltas(depths, h))
}

fn with_deltas(depths: Vec<f64>, h: f64) -> SampleSet {
    let mut deltas: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(h);
    SampleSet { depths, deltas }
}

/// Composited result for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub depth: f64,
    pub densities: Vec<f64>,
    pub weights: Vec<f64>,
    /// `T_{K+1}`, the light reaching the background.
    pub transmittance: f64,
}

/// Alpha compositing of `K` samples over a background.
pub fn composite(
    colors: &[[f64; 3]],
    densities: &[f64],
    samples: &SampleSet,
    background: [f64; 3],
) -> Result<RenderResult> {
    let k = colors.len();
    if densities.len() != k || samples.depths.len() != k || samples.deltas.len() != k {
        return Err(InsError::Argument(format!(
            "composite got {k} colors, {} densities, {} depths, {} deltas",
            densities.len(),
            samples.depths.len(),
            samples.deltas.len()
        )));
    }
    if densities.iter().any(|s| !(*s >= 0.0)) {
        return Err(InsError::Argument("densities must be non-negative".into()));
    }
    if samples.deltas.iter().any(|d| !(*d >= 0.0)) {
        return Err(InsError::Argument("deltas must be non-negative".into()));
    }
    let mut acc = 0.0f64;
    let mut color = [0.0; 3];
    let mut weights = Vec::with_capacity(k);
    let (mut wsum, mut wt) = (0.0f64, 0.0f64);
    for i in 0..k {
        let sd = densities[i] * samples.deltas[i];
        let w = (-acc).exp() * (1.0 - (-sd).exp());
        acc += sd;
        for (c, ci) in color.iter_mut().zip(colors[i]) {
            *c += w * ci;
        }
        wsum += w;
        wt += w * samples.depths[i];
        weights.push(w);
    }
    let transmittance = (-acc).exp();
    for (c, b) in color.iter_mut().zip(background) {
        *c += transmittance * b;
    }
    Ok(RenderResult {
        color,
        depth: wt / wsum.max(DEPTH_EPS),
        densities: densities.to_vec(),
        weights,
        transmittance,
    })
}

/// Sample positions for a batch of `R` rays with `K` samples each.
#[derive(Clone, Debug)]
pub struct RaySamples {
    /// `RK×3`, ray-major.
    pub points: Tensor,
    /// `RK×3` unit view directions.
    pub dirs: Tensor,
    /// `R×K`.
    pub depths: Tensor,
    /// `R×K`.
    pub deltas: Tensor,
}

impl RaySamples {
    pub fn new(rays: &[Ray], sets: &[SampleSet]) -> Result<Self> {
        if rays.len() != sets.len() {
            return Err(InsError::Argument("one sample set per ray expected".into()));
        }
        let r = rays.len();
        let k = sets.first().map_or(0, |s| s.depths.len());
        if sets.iter().any(|s| s.depths.len() != k) {
            return Err(InsError::Argument(
                "all rays in a batch need the same sample count".into(),
            ));
        }
        let mut points = Vec::with_capacity(r * k * 3);
        let mut dirs = Vec::with_capacity(r * k * 3);
        for (ray, set) in rays.iter().zip(sets) {
            for &t in &set.depths {
                points.extend(ray.at(t));
                dirs.extend(ray.direction);
            }
        }
        let flat = |f: fn(&SampleSet) -> &Vec<f64>| -> Tensor {
            let v: Vec<f64> = sets.iter().flat_map(|s| f(s).iter().copied()).collect();
            Tensor::from_shape_vec(IxDyn(&[r, k]), v).expect("R×K")
        };
        Ok(Self {
            points: Tensor::from_shape_vec(IxDyn(&[r * k, 3]), points).expect("RK×3"),
            dirs: Tensor::from_shape_vec(IxDyn(&[r * k, 3]), dirs).expect("RK×3"),
            depths: flat(|s| &s.depths),
            deltas: flat(|s| &s.deltas),
        })
    }

    /// Stratified samples for every ray; `rng = None` picks bin midpoints.
    pub fn stratified<R: Rng + ?Sized>(
        rays: &[Ray],
        k: usize,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        let sets = match rng {
            Some(rng) => rays
                .iter()
                .map(|ray| stratified_samples(ray, k, true, rng))
                .collect::<Result<Vec<_>>>()?,
            None => rays
                .iter()
                .map(|ray| midpoint_samples(ray, k))
                .collect::<Result<Vec<_>>>()?,
        };
        Self::new(rays, &sets)
    }

    pub fn n_rays(&self) -> usize {
        self.depths.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.depths.shape()[1]
    }
}

/// Tape-level composite of a batch.
pub struct TapeRender<'t> {
    /// `R×3`.
    pub color: Var<'t>,
    /// `R×1`.
    pub depth: Var<'t>,
    /// `R×K`.
    pub weights: Var<'t>,
    /// `R×K` activated densities.
    pub densities: Var<'t>,
    /// `R×1`.
    pub transmittance: Var<'t>,
}

/// Differentiable composite: `colors` is `RK×3`, `densities` `R×K`.
pub fn composite_on_tape<'t>(
    colors: Var<'t>,
    densities: Var<'t>,
    depths: &Tensor,
    deltas: &Tensor,
    background: [f64; 3],
) -> TapeRender<'t> {
    let tape = colors.tape();
    let (r, k) = (deltas.shape()[0], deltas.shape()[1]);
    let sd = densities.mul(&tape.constant(deltas.clone()));
    let trans = sd.cumsum(1, true).neg().exp();
    let alpha = sd.neg().exp().neg().add_scalar(1.0);
    let weights = trans.mul(&alpha);
    let transmittance = sd.sum_axis(1).neg().exp();
    let shaded = weights
        .reshape(&[r, k, 1])
        .mul(&colors.reshape(&[r, k, 3]))
        .sum_axis(1)
        .reshape(&[r, 3]);
    let bg =
        tape.constant(Tensor::from_shape_vec(IxDyn(&[1, 3]), background.to_vec()).expect("1×3"));
    let color = shaded.add(&transmittance.mul(&bg));
    let wsum = weights.sum_axis(1);
    let depth = weights
        .mul(&tape.constant(depths.clone()))
        .sum_axis(1)
        .div(&wsum.clamp_min(DEPTH_EPS));
    TapeRender {
        color,
        depth,
        weights,
        densities,
        transmittance,
    }
}

/// Queries a radiance field at every sample and composites.
pub fn render_samples<'t>(
    field: &InsField,
    p: &Binding<'t, '_>,
    samples: &RaySamples,
    style: Var<'t>,
    background: [f64; 3],
) -> TapeRender<'t> {
    let tape = p.tape();
    let (r, k) = (samples.n_rays(), samples.n_samples());
    let content = field.content(p, tape.constant(samples.points.clone()));
    let out = field.amalgamate(
        p,
        &content,
        Some(tape.constant(samples.dirs.clone())),
        style,
    );
    let sigma = out.density.expect("radiance field").reshape(&[r, k]);
    composite_on_tape(
        out.color,
        sigma,
        &samples.depths,
        &samples.deltas,
        background,
    )
}

/// Rendering settings for value-only batch rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub samples: usize,
    pub background: [f64; 3],
    /// Rays per tape.
    pub chunk: usize,
    /// Spread chunks over the rayon pool. Results do not depend on this.
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples: 64,
            background: [1.0; 3],
            chunk: 256,
            parallel: true,
        }
    }
}

/// Renders rays with midpoint samples. Every ray is independent of the rest
/// of its batch, so results match one-ray-at-a-time rendering bit for bit.
pub fn render_rays(
    field: &InsField,
    rays: &[Ray],
    code: &StyleCode,
    opts: &RenderOptions,
) -> Result<Vec<RenderResult>> {
    render_rays_with(field, field.params(), rays, code, opts)
}

/// Like [`render_rays`] but reading parameters from `params`.
pub fn render_rays_with(
    field: &InsField,
    params: &ParamSet,
    rays: &[Ray],
    code: &StyleCode,
    opts: &RenderOptions,
) -> Result<Vec<RenderResult>> {
    if field.kind() != FieldKind::Nerf {
        return Err(InsError::Config(
            "render_rays needs a radiance field".into(),
        ));
    }
    field.config().check_code(code)?;
    if opts.samples == 0 {
        return Err(InsError::Argument("sample count must be >= 1".into()));
    }
    let chunk = opts.chunk.max(1);
    let run = |rays: &[Ray]| -> Result<Vec<RenderResult>> {
        let samples = RaySamples::stratified::<rand_chacha::ChaCha8Rng>(rays, opts.samples, None)?;
        let tape = Tape::new();
        let p = Binding::new(&tape, params, Trainable::None);
        let style = field.style_features(&p, code)?;
        let out = render_samples(field, &p, &samples, style, opts.background);
        Ok(unpack(&out))
    };
    let parts: Vec<Result<Vec<RenderResult>>> = if opts.parallel {
        rays.par_chunks(chunk).map(run).collect()
    } else {
        rays.chunks(chunk).map(run).collect()
    };
    let mut out = Vec::with_capacity(rays.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn as2(t: &Tensor) -> Array2<f64> {
    t.view().into_dimensionality().expect("2-D").to_owned()
}

fn unpack(out: &TapeRender<'_>) -> Vec<RenderResult> {
    let color = as2(&out.color.value());
    let depth = as2(&out.depth.value());
    let weights = as2(&out.weights.value());
    let dens = as2(&out.densities.value());
    let trans = as2(&out.transmittance.value());
    (0..color.nrows())
        .map(|i| RenderResult {
            color: [color[[i, 0]], color[[i, 1]], color[[i, 2]]],
            depth: depth[[i, 0]],
            densities: dens.row(i).to_vec(),
            weights: weights.row(i).to_vec(),
            transmittance: trans[[i, 0]],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray01() -> Ray {
        Ray {
            origin: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
            near: 0.0,
            far: 1.0,
        }
    }

    #[test]
    fn midpoint_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = stratified_samples(&ray01(), 4, false, &mut rng).unwrap();
        assert_eq!(s.depths, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.deltas, vec![0.25; 4]);
        let one = stratified_samples(&ray01(), 1, false, &mut rng).unwrap();
        assert_eq!(one.depths, vec![0.5]);
    }

    #[test]
    fn jittered_samples_stay_in_their_bins() {
        let ray = Ray::new([0.0; 3], [1.0, 0.0, 0.0], 2.0, 6.0).unwrap();
        let a = stratified_samples(&ray, 16, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = stratified_samples(&ray, 16, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for (i, t) in a.depths.iter().enumerate() {
            assert!(*t >= 2.0 + 0.25 * i as f64 && *t <= 2.0 + 0.25 * (i + 1) as f64);
        }
        assert!(a.deltas.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn zero_samples_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            stratified_samples(&ray01(), 0, false, &mut rng),
            Err(InsError::Argument(_))
        ));
    }

    #[test]
    fn invalid_rays_are_rejected() {
        assert!(Ray::new([0.0; 3], [0.0, 0.0, 2.0], 1.0, 2.0).is_err());
        assert!(Ray::new([0.0; 3], [0.0, 0.0, 1.0], 2.0, 1.0).is_err());
    }

    #[test]
    fn empty_space_shows_background() {
        let s = SampleSet {
            depths: vec![1.0, 2.0],
            deltas: vec![1.0, 1.0],
        };
        let r = composite(&[[0.3, 0.2, 0.1]; 2], &[0.0, 0.0], &s, [0.1, 0.5, 0.9]).unwrap();
        assert_eq!(r.color, [0.1, 0.5, 0.9]);
        assert_eq!(r.weights, vec![0.0, 0.0]);
        assert_eq!(r.transmittance, 1.0);
        assert_eq!(r.depth, 0.0);
    }

    #[test]
    fn opaque_first_sample() {
        let s = SampleSet {
            depths: vec![1.0],
            deltas: vec![1.0],
        };
        let r = composite(&[[1.0, 0.0, 0.0]], &[50.0], &s, [1.0; 3]).unwrap();
        for (c, e) in r.color.iter().zip([1.0, 0.0, 0.0]) {
            assert!((c - e).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_density_is_rejected() {
        let s = SampleSet {
            depths: vec![1.0],
            deltas: vec![1.0],
        };
        assert!(composite(&[[0.0; 3]], &[-1.0], &s, [1.0; 3]).is_err());
        assert!(composite(&[[0.0; 3]; 2], &[1.0], &s, [1.0; 3]).is_err());
    }

    #[test]
    fn tape_composite_matches_scalar_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (r, k) = (3, 5);
        let mut colors = vec![];
        let mut sigma = vec![];
        let mut sets = vec![];
        for _ in 0..r {
            let c: Vec<[f64; 3]> = (0..k)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect();
            let s: Vec<f64> = (0..k).map(|_| 3.0 * rng.random::<f64>()).collect();
            let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], 1.0, 3.0).unwrap();
            sets.push(stratified_samples(&ray, k, true, &mut rng).unwrap());
            colors.push(c);
            sigma.push(s);
        }
        let rays = vec![Ray::new([0.0; 3], [0.0, 0.0, 1.0], 1.0, 3.0).unwrap(); r];
        let samples = RaySamples::new(&rays, &sets).unwrap();
        let tape = Tape::new();
        let cflat: Vec<f64> = colors.iter().flatten().flatten().copied().collect();
        let sflat: Vec<f64> = sigma.iter().flatten().copied().collect();
        let out = composite_on_tape(
            tape.constant(Tensor::from_shape_vec(IxDyn(&[r * k, 3]), cflat).unwrap()),
            tape.constant(Tensor::from_shape_vec(IxDyn(&[r, k]), sflat).unwrap()),
            &samples.depths,
            &samples.deltas,
            [1.0, 0.5, 0.0],
        );
        let got = unpack(&out);
        for i in 0..r {
            let want = composite(&colors[i], &sigma[i], &sets[i], [1.0, 0.5, 0.0]).unwrap();
            for c in 0..3 {
                assert!((got[i].color[c] - want.color[c]).abs() < 1e-12);
            }
            assert!((got[i].depth - want.depth).abs() < 1e-12);
            assert!((got[i].transmittance - want.transmittance).abs() < 1e-12);
        }
    }
}
