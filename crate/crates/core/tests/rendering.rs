#![allow(clippy::needless_range_loop)]

use std::time::Instant;

use ins_autograd::gradcheck::{max_relative_error, numeric_gradient};
use ins_autograd::{Binding, Tape, Tensor, Trainable, Var};
use ins_core::fields::{FieldConfig, InsField, StyleCode};
use ins_core::rendering::{
    composite, composite_on_tape, differentiable_intersection, intersection_on_tape,
    midpoint_samples, render_rays, render_rays_with, render_samples, sphere_trace,
    sphere_trace_field, Ray, RaySamples, RenderOptions, SampleSet, SignedDistance, Sphere,
    TraceOptions,
};
use ins_core::InsError;
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force evaluation of the compositing sum, term by term.
fn scalar_composite(
    colors: &[[f64; 3]],
    sigma: &[f64],
    depths: &[f64],
    deltas: &[f64],
    bg: [f64; 3],
) -> ([f64; 3], Vec<f64>, f64, f64) {
    let k = colors.len();
    let mut weights = vec![0.0; k];
    for i in 0..k {
        let mut optical = 0.0;
        for l in 0..i {
            optical += sigma[l] * deltas[l];
        }
        weights[i] = (-optical).exp() * (1.0 - (-sigma[i] * deltas[i]).exp());
    }
    let mut optical = 0.0;
    for l in 0..k {
        optical += sigma[l] * deltas[l];
    }
    let t_end = (-optical).exp();
    let mut c = [0.0; 3];
    for ch in 0..3 {
        for i in 0..k {
            c[ch] += weights[i] * colors[i][ch];
        }
        c[ch] += t_end * bg[ch];
    }
    let wsum: f64 = weights.iter().sum();
    let depth = weights.iter().zip(depths).map(|(w, t)| w * t).sum::<f64>() / wsum.max(1e-10);
    (c, weights, t_end, depth)
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    k: usize,
) -> (Vec<[f64; 3]>, Vec<f64>, SampleSet, [f64; 3]) {
    let colors = (0..k)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let sigma = (0..k)
        .map(|_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.0..20.0)
            }
        })
        .collect();
    let near = rng.random_range(0.5..2.0);
    let far = near + rng.random_range(0.5..4.0);
    let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], near, far).unwrap();
    let set = ins_core::rendering::stratified_samples(&ray, k, true, rng).unwrap();
    let bg = [rng.random(), rng.random(), rng.random()];
    (colors, sigma, set, bg)
}

#[test]
fn composite_matches_scalar_oracle_on_1000_rays() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let k = rng.random_range(1..=16);
        let (colors, sigma, set, bg) = random_instance(&mut rng, k);
        let got = composite(&colors, &sigma, &set, bg).unwrap();
        let (c, w, t_end, depth) = scalar_composite(&colors, &sigma, &set.depths, &set.deltas, bg);
        for ch in 0..3 {
            assert!((got.color[ch] - c[ch]).abs() <= 1e-6);
            assert!((0.0..=1.0).contains(&got.color[ch]));
        }
        for (a, b) in got.weights.iter().zip(&w) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!((got.transmittance - t_end).abs() <= 1e-6);
        assert!((got.depth - depth).abs() <= 1e-6 * depth.abs().max(1.0));
        let total: f64 = got.weights.iter().sum::<f64>() + got.transmittance;
        assert!((total - 1.0).abs() <= 1e-5);
        assert!(got.transmittance > 0.0);
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn two_sample_hand_case() {
    let set = SampleSet {
        depths: vec![1.0, 2.0],
        deltas: vec![1.0, 1.0],
    };
    let r = composite(
        &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        &[1.0, 1.0],
        &set,
        [1.0; 3],
    )
    .unwrap();
    let e = (-1.0f64).exp();
    let (w1, w2, t3) = (1.0 - e, e * (1.0 - e), e * e);
    assert!((r.weights[0] - w1).abs() < 1e-12);
    assert!((r.weights[1] - w2).abs() < 1e-12);
    assert!((r.transmittance - t3).abs() < 1e-12);
    let want = [w1 + t3, w2 + t3, t3];
    for ch in 0..3 {
        assert!((r.color[ch] - want[ch]).abs() < 1e-12);
    }
}

#[test]
fn transmittance_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let k = rng.random_range(1..=16);
        let (colors, sigma, set, bg) = random_instance(&mut rng, k);
        let r = composite(&colors, &sigma, &set, bg).unwrap();
        let mut t = 1.0;
        for i in 0..k {
            let next = t * (-sigma[i] * set.deltas[i]).exp();
            assert!(next <= t);
            t = next;
        }
        assert!((t - r.transmittance).abs() < 1e-12);
    }
}

#[test]
fn negative_delta_is_rejected() {
    let set = SampleSet {
        depths: vec![1.0],
        deltas: vec![-0.5],
    };
    assert!(matches!(
        composite(&[[0.0; 3]], &[1.0], &set, [1.0; 3]),
        Err(InsError::Argument(_))
    ));
}

fn tensor(shape: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(shape), v).unwrap()
}

fn composite_objective<'t>(
    c: Var<'t>,
    s: Var<'t>,
    depths: &Tensor,
    deltas: &Tensor,
    bg: [f64; 3],
    mix: &[f64],
) -> Var<'t> {
    let out = composite_on_tape(c, s, depths, deltas, bg);
    out.color
        .mul(&c.tape().constant(tensor(&[1, 3], mix[..3].to_vec())))
        .sum()
        .add(&out.depth.sum().scale(mix[3]))
}

#[test]
fn composite_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let k = rng.random_range(1..=8);
        let (colors, _, set, bg) = random_instance(&mut rng, k);
        // Strictly positive densities keep away from the clamp.
        let sigma: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..5.0)).collect();
        let c0 = tensor(&[k, 3], colors.iter().flatten().copied().collect());
        let s0 = tensor(&[1, k], sigma);
        let depths = tensor(&[1, k], set.depths.clone());
        let deltas = tensor(&[1, k], set.deltas.clone());
        let mix: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let (c, s) = (tape.var(c0.clone()), tape.var(s0.clone()));
        let g = tape.backward(composite_objective(c, s, &depths, &deltas, bg, &mix));
        let (gc, gs) = (g.get_or_zeros(c), g.get_or_zeros(s));
        let nc = numeric_gradient(
            |probe| {
                let tape = Tape::new();
                composite_objective(
                    tape.constant(probe.clone()),
                    tape.constant(s0.clone()),
                    &depths,
                    &deltas,
                    bg,
                    &mix,
                )
                .item()
            },
            &c0,
            1e-6,
        );
        let ns = numeric_gradient(
            |probe| {
                let tape = Tape::new();
                composite_objective(
                    tape.constant(c0.clone()),
                    tape.constant(probe.clone()),
                    &depths,
                    &deltas,
                    bg,
                    &mix,
                )
                .item()
            },
            &s0,
            1e-6,
        );
        assert!(max_relative_error(&gc, &nc, 1e-6) < 1e-3);
        assert!(max_relative_error(&gs, &ns, 1e-6) < 1e-3);
    }
}

/// Smooth analytic medium along `t`.
fn medium(t: f64) -> (f64, [f64; 3]) {
    let sigma = 1.5 + (2.0 * t).sin() + 0.5 * (-(t - 2.0).powi(2)).exp() * 4.0;
    let c = [
        0.5 + 0.4 * t.sin(),
        0.5 + 0.4 * (1.3 * t).cos(),
        0.3 + 0.2 * t.sin().powi(2),
    ];
    (sigma, c)
}

fn quadrature(ray: &Ray, k: usize) -> [f64; 3] {
    let set = midpoint_samples(ray, k).unwrap();
    let (sigma, colors): (Vec<f64>, Vec<[f64; 3]>) = set.depths.iter().map(|&t| medium(t)).unzip();
    composite(&colors, &sigma, &set, [1.0, 1.0, 1.0])
        .unwrap()
        .color
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

#[test]
fn refinement_converges_to_dense_quadrature() {
    let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.5, 4.0).unwrap();
    let oracle = quadrature(&ray, 4096);
    for k in [8, 16, 32, 64] {
        let (ck, c2k) = (quadrature(&ray, k), quadrature(&ray, 2 * k));
        let bound = dist(ck, oracle);
        assert!(dist(c2k, ck) < 2.0 * bound, "K={k}");
        assert!(dist(c2k, oracle) < bound, "K={k}");
    }
}

fn nerf_field(seed: u64) -> InsField {
    let mut cfg = FieldConfig::nerf(2);
    cfg.cim_depth = 3;
    cfg.cim_width = 24;
    cfg.sim_width = 8;
    cfg.style_width = 6;
    cfg.am_depth = 1;
    cfg.am_width = 16;
    cfg.pos_freqs = 3;
    cfg.dir_freqs = 2;
    let mut field = InsField::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, t) in field.params_mut().iter_mut() {
        if name.starts_with("sim.") || name.starts_with("am.density") {
            t.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    field
}

fn random_rays(n: usize, seed: u64) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let o = [
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                -3.0,
            ];
            let d = [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                1.0,
            ];
            let n = (d[0] * d[0] + d[1] * d[1] + 1.0f64).sqrt();
            Ray::new(o, [d[0] / n, d[1] / n, d[2] / n], 1.5, 4.5).unwrap()
        })
        .collect()
}

#[test]
fn batched_rendering_matches_single_rays_bitwise() {
    let field = nerf_field(4);
    let rays = random_rays(37, 5);
    let code = StyleCode::mixture(vec![0.3, 0.7]).unwrap();
    let opts = RenderOptions {
        samples: 16,
        chunk: 8,
        ..RenderOptions::default()
    };
    let batched = render_rays(&field, &rays, &code, &opts).unwrap();
    let serial = render_rays(
        &field,
        &rays,
        &code,
        &RenderOptions {
            parallel: false,
            ..opts
        },
    )
    .unwrap();
    assert_eq!(batched, serial);
    for (ray, want) in rays.iter().zip(&batched) {
        let one = render_rays(&field, std::slice::from_ref(ray), &code, &opts).unwrap();
        assert_eq!(&one[0], want);
    }
}

#[test]
fn zero_density_field_renders_background() {
    let mut field = nerf_field(6);
    let names: Vec<String> = field.params().names().map(str::to_string).collect();
    for name in names.iter().filter(|n| n.contains("density")) {
        field.params_mut().get_mut(name).unwrap().fill(0.0);
    }
    for name in names
        .iter()
        .filter(|n| n.starts_with("cim.sigma") || n.ends_with("density.bias"))
    {
        field.params_mut().get_mut(name).unwrap().fill(-1e3);
    }
    let opts = RenderOptions {
        samples: 8,
        background: [0.2, 0.4, 0.6],
        ..RenderOptions::default()
    };
    let code = StyleCode::one_hot(0, 2).unwrap();
    let out = render_rays(&field, &random_rays(3, 7), &code, &opts).unwrap();
    for r in out {
        for ch in 0..3 {
            assert!(
                (r.color[ch] - opts.background[ch]).abs() < 1e-9,
                "{:?}",
                r.color
            );
        }
    }
}

#[test]
fn render_gradient_matches_finite_differences() {
    let field = nerf_field(8);
    let rays = random_rays(3, 9);
    let code = StyleCode::one_hot(1, 2).unwrap();
    let opts = RenderOptions {
        samples: 12,
        background: [1.0; 3],
        chunk: 64,
        parallel: false,
    };
    let samples = RaySamples::stratified::<ChaCha8Rng>(&rays, opts.samples, None).unwrap();
    let tape = Tape::new();
    let p = Binding::new(&tape, field.params(), Trainable::All);
    let style = field.style_features(&p, &code).unwrap();
    let out = render_samples(&field, &p, &samples, style, opts.background);
    let green = out.color.narrow(0, 1, 1).narrow(1, 1, 1).sum();
    let grads = p.gradients(&tape.backward(green));

    let mut checked = 0;
    for name in ["cim.l0.weight", "am.color.weight", "sim.l0.weight"] {
        let Some(g) = grads.get(name) else { continue };
        let at = field.params().get(name).unwrap().clone();
        let numeric = numeric_gradient(
            |probe| {
                let mut params = field.params().clone();
                *params.get_mut(name).unwrap() = probe.clone();
                render_rays_with(&field, &params, &rays, &code, &opts).unwrap()[1].color[1]
            },
            &at,
            1e-5,
        );
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = max_relative_error(g, &numeric, 1e-3 * scale.max(1e-9));
        assert!(err < 1e-3, "{name}: relative error {err}");
        checked += 1;
    }
    assert!(
        checked >= 2,
        "parameter names changed: {:?}",
        grads.keys().collect::<Vec<_>>()
    );
}

fn unit() -> Sphere {
    Sphere {
        center: [0.0; 3],
        radius: 1.0,
    }
}

#[test]
fn analytic_traces() {
    let opts = TraceOptions::default();
    let r = Ray::new([0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 1e-3, 10.0).unwrap();
    let hit = sphere_trace(&unit(), &r, &opts);
    assert!(hit.converged && (hit.t - 2.0).abs() < opts.eps);
    let x = differentiable_intersection(&unit(), &r, 1.9).unwrap();
    assert!((x[2] + 1.0).abs() < 1e-12);
    let exact = differentiable_intersection(&unit(), &r, 2.0).unwrap();
    assert_eq!(exact, r.at(2.0));
}

fn sdf_field(seed: u64) -> InsField {
    let mut cfg = FieldConfig::sdf(1);
    cfg.cim_depth = 3;
    cfg.cim_width = 32;
    cfg.pos_freqs = 2;
    cfg.sdf_feature_width = 4;
    cfg.sim_width = 8;
    cfg.style_width = 4;
    cfg.am_depth = 1;
    cfg.am_width = 8;
    cfg.sdf_init_radius = 0.8;
    InsField::new(cfg, seed).unwrap()
}

fn aimed_rays(n: usize, seed: u64) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let o: [f64; 3] = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                -3.0,
            ];
            let tgt = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                0.0,
            ];
            let d = [tgt[0] - o[0], tgt[1] - o[1], tgt[2] - o[2]];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            Ray::new(o, [d[0] / n, d[1] / n, d[2] / n], 0.5, 6.0).unwrap()
        })
        .collect()
}

#[test]
fn linearized_point_does_not_increase_residual() {
    let field = sdf_field(10);
    // A loose tolerance leaves residuals large enough to compare.
    let opts = TraceOptions {
        eps: 2e-2,
        ..TraceOptions::default()
    };
    let rays = aimed_rays(160, 11);
    let traces = sphere_trace_field(&field, &rays, &opts);
    let mut n = 0;
    for (ray, tr) in rays.iter().zip(&traces) {
        if !tr.converged {
            continue;
        }
        let before = field.distance(ray.at(tr.t)).abs();
        let x = differentiable_intersection(&field, ray, tr.t).unwrap();
        assert!(
            field.distance(x).abs() <= before,
            "{} > {before}",
            field.distance(x).abs()
        );
        n += 1;
    }
    assert!(n >= 100, "only {n} converged traces");
}

#[test]
fn batched_field_trace_matches_single_trace() {
    let field = sdf_field(12);
    let rays = aimed_rays(20, 13);
    let opts = TraceOptions::default();
    let batched = sphere_trace_field(&field, &rays, &opts);
    for (ray, b) in rays.iter().zip(&batched) {
        let s = sphere_trace(&field, ray, &opts);
        assert_eq!(s.converged, b.converged);
        if s.converged {
            assert!((s.t - b.t).abs() < 1e-9);
        }
    }
}

fn intersection_objective<'t>(
    field: &InsField,
    o: Var<'t>,
    d: Var<'t>,
    t0: &Tensor,
    den: &Tensor,
    mix: &Tensor,
) -> Var<'t> {
    let tape = o.tape();
    let p = Binding::new(tape, field.params(), Trainable::None);
    intersection_on_tape(o, d, t0, den, |x| field.sdf_values(&p, x).0)
        .unwrap()
        .mul(&tape.constant(mix.clone()))
        .sum()
}

#[test]
fn intersection_gradient_matches_finite_differences() {
    let field = sdf_field(14);
    let rays = aimed_rays(6, 15);
    let traces = sphere_trace_field(&field, &rays, &TraceOptions::default());
    let hits: Vec<(Ray, f64)> = rays
        .iter()
        .zip(&traces)
        .filter(|(_, t)| t.converged)
        .map(|(r, t)| (*r, t.t))
        .collect();
    assert!(hits.len() >= 3);
    let n = hits.len();
    let o0 = tensor(&[n, 3], hits.iter().flat_map(|(r, _)| r.origin).collect());
    let d0 = tensor(
        &[n, 3],
        hits.iter().flat_map(|(r, _)| r.direction).collect(),
    );
    let t0 = tensor(&[n, 1], hits.iter().map(|(_, t)| *t).collect());
    let den = tensor(
        &[n, 1],
        hits.iter()
            .map(|(r, t)| {
                let g = field.gradient(r.at(*t));
                g[0] * r.direction[0] + g[1] * r.direction[1] + g[2] * r.direction[2]
            })
            .collect(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mix = tensor(
        &[n, 3],
        (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let tape = Tape::new();
    let (o, d) = (tape.var(o0.clone()), tape.var(d0.clone()));
    let g = tape.backward(intersection_objective(&field, o, d, &t0, &den, &mix));
    let (go, gd) = (g.get_or_zeros(o), g.get_or_zeros(d));
    let no = numeric_gradient(
        |probe| {
            let tape = Tape::new();
            intersection_objective(
                &field,
                tape.constant(probe.clone()),
                tape.constant(d0.clone()),
                &t0,
                &den,
                &mix,
            )
            .item()
        },
        &o0,
        1e-6,
    );
    let nd = numeric_gradient(
        |probe| {
            let tape = Tape::new();
            intersection_objective(
                &field,
                tape.constant(o0.clone()),
                tape.constant(probe.clone()),
                &t0,
                &den,
                &mix,
            )
            .item()
        },
        &d0,
        1e-6,
    );
    assert!(max_relative_error(&go, &no, 1e-6) < 1e-3);
    assert!(max_relative_error(&gd, &nd, 1e-6) < 1e-3);

    // Value agrees with the scalar linearization.
    let tape = Tape::new();
    let p = Binding::new(&tape, field.params(), Trainable::None);
    let x = intersection_on_tape(tape.constant(o0), tape.constant(d0), &t0, &den, |x| {
        field.sdf_values(&p, x).0
    })
    .unwrap()
    .value();
    for (row, (ray, t)) in hits.iter().enumerate() {
        let want = differentiable_intersection(&field, ray, *t).unwrap();
        for a in 0..3 {
            assert!((x[[row, a]] - want[a]).abs() < 1e-9);
        }
    }
}

#[test]
fn grazing_intersections_are_rejected_on_tape() {
    let tape = Tape::new();
    let o = tape.constant(tensor(&[1, 3], vec![0.0, 0.0, -3.0]));
    let d = tape.constant(tensor(&[1, 3], vec![0.0, 0.0, 1.0]));
    let t0 = tensor(&[1, 1], vec![2.0]);
    let den = tensor(&[1, 1], vec![1e-9]);
    assert!(matches!(
        intersection_on_tape(o, d, &t0, &den, |x| x.narrow(1, 2, 1)),
        Err(InsError::GrazingRay(_))
    ));
}
