use ins_autograd::gradcheck::{max_relative_error, numeric_gradient};
use ins_autograd::{Tape, Tensor, Var};
use ins_core::dataio::Image;
use ins_core::losses::{
    content_loss, content_loss_on_tape, default_content_keys, default_style_keys, geometry_loss,
    geometry_loss_on_tape, gram, gram_on_tape, recon_loss, style_grams, style_loss,
    style_loss_on_tape, total_loss, FeatureExtractor, FeatureValues, LayerKey, LossTerms,
    LossWeights, SURROGATE_SEED,
};
use ins_core::InsError;
use nalgebra::DMatrix;
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn extractor() -> FeatureExtractor {
    FeatureExtractor::surrogate(8, SURROGATE_SEED)
}

fn noise(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// `(1/CHW) Σ_k F_ck F_c'k` by explicit loops.
fn gram_oracle(f: &Tensor) -> Vec<Vec<f64>> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut g = vec![vec![0.0; c]; c];
    for a in 0..c {
        for b in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += f[[a, y, x]] * f[[b, y, x]];
                }
            }
            g[a][b] = s / (c * h * w) as f64;
        }
    }
    g
}

#[test]
fn identities_are_exactly_zero() {
    let ext = extractor();
    let a = noise(12, 12, 1);
    assert_eq!(
        content_loss(&ext, &a, &a, &default_content_keys()).unwrap(),
        0.0
    );
    assert_eq!(
        style_loss(&ext, &a, &a, &default_style_keys()).unwrap(),
        0.0
    );
    let sigma = [0.3, 2.0, 0.0, 7.5];
    assert_eq!(geometry_loss(&sigma, &sigma).unwrap(), 0.0);
    assert_eq!(recon_loss(&a.pixels, &a.pixels).unwrap(), 0.0);
}

#[test]
fn symmetric_terms() {
    let ext = extractor();
    let (a, b) = (noise(10, 10, 2), noise(10, 10, 3));
    let keys = default_content_keys();
    let ab = content_loss(&ext, &a, &b, &keys).unwrap();
    let ba = content_loss(&ext, &b, &a, &keys).unwrap();
    assert!((ab - ba).abs() <= 1e-12 * ab.abs());
    assert!(ab > 0.0);
    assert_eq!(
        geometry_loss(&[1.0, 5.0], &[2.0, 4.0]).unwrap(),
        geometry_loss(&[2.0, 4.0], &[1.0, 5.0]).unwrap()
    );
}

#[test]
fn content_matches_elementwise_oracle() {
    let ext = extractor();
    let (a, b) = (noise(16, 16, 4), noise(16, 16, 5));
    let keys = vec![LayerKey(1, 2), LayerKey(2, 2)];
    let fa = ext.extract_features(&a, &keys).unwrap();
    let fb = ext.extract_features(&b, &keys).unwrap();
    let mut want = 0.0;
    for k in &keys {
        let (x, y) = (&fa[k], &fb[k]);
        let mut s = 0.0;
        for (p, q) in x.iter().zip(y.iter()) {
            s += (p - q) * (p - q);
        }
        want += s / x.len() as f64;
    }
    let got = content_loss(&ext, &a, &b, &keys).unwrap();
    assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
}

#[test]
fn style_matches_scalar_oracle() {
    let ext = extractor();
    let (y, s) = (noise(12, 12, 6), noise(20, 16, 7));
    let keys = default_style_keys();
    let fy = ext.extract_features(&y, &keys).unwrap();
    let fs = ext.extract_features(&s, &keys).unwrap();
    let mut want = 0.0;
    for k in &keys {
        let (gy, gs) = (gram_oracle(&fy[k]), gram_oracle(&fs[k]));
        for (ry, rs) in gy.iter().zip(&gs) {
            for (p, q) in ry.iter().zip(rs) {
                want += (p - q) * (p - q);
            }
        }
    }
    let got = style_loss(&ext, &y, &s, &keys).unwrap();
    assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
}

#[test]
fn gram_hand_values() {
    let g = gram(&Tensor::ones(IxDyn(&[2, 1, 1]))).unwrap();
    assert_eq!(g, ndarray::arr2(&[[0.5, 0.5], [0.5, 0.5]]));
    assert!(gram(&Tensor::zeros(IxDyn(&[4, 3, 2])))
        .unwrap()
        .iter()
        .all(|v| *v == 0.0));
    assert!(matches!(
        gram(&Tensor::zeros(IxDyn(&[4, 3]))),
        Err(InsError::Argument(_))
    ));
}

#[test]
fn gram_is_symmetric_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let c = rng.random_range(1..9);
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let f = random(&[c, h, w], &mut rng);
        let g = gram(&f).unwrap();
        let oracle = gram_oracle(&f);
        for a in 0..c {
            for b in 0..c {
                assert!((g[[a, b]] - g[[b, a]]).abs() <= 1e-7);
                assert!((g[[a, b]] - oracle[a][b]).abs() <= 1e-12);
            }
        }
        let m = DMatrix::from_fn(c, c, |a, b| g[[a, b]]);
        let min = m.symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-7, "min eigenvalue {min}");
    }
}

#[test]
fn gram_ignores_spatial_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = random(&[5, 3, 4], &mut rng);
    let mut perm: Vec<usize> = (0..12).collect();
    for i in (1..12).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let shuffled = Tensor::from_shape_fn(IxDyn(&[5, 3, 4]), |d| {
        let k = perm[d[1] * 4 + d[2]];
        f[[d[0], k / 4, k % 4]]
    });
    let tape = Tape::new();
    let a = gram_on_tape(tape.constant(f)).value();
    let b = gram_on_tape(tape.constant(shuffled)).value();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn feature_shapes_follow_pooling() {
    let ext = extractor();
    for (h, w) in [(8, 8), (9, 13), (16, 11)] {
        let f = ext
            .extract_features(
                &noise(h, w, 10),
                &[LayerKey(1, 2), LayerKey(2, 2), LayerKey(3, 3)],
            )
            .unwrap();
        assert_eq!(&f[&LayerKey(1, 2)].shape()[1..], &[h, w]);
        assert_eq!(
            &f[&LayerKey(2, 2)].shape()[1..],
            &[h.div_ceil(2), w.div_ceil(2)]
        );
        assert_eq!(
            &f[&LayerKey(3, 3)].shape()[1..],
            &[h.div_ceil(2).div_ceil(2), w.div_ceil(2).div_ceil(2)]
        );
    }
}

#[test]
fn features_are_deterministic_and_finite() {
    let ext = extractor();
    let black = Image::filled(8, 8, [0.0; 3]);
    let keys = default_style_keys();
    let a = ext.extract_features(&black, &keys).unwrap();
    let b = ext.extract_features(&black, &keys).unwrap();
    assert_eq!(a, b);
    assert!(a.values().all(|t| t.iter().all(|v| v.is_finite())));
}

#[test]
fn extractor_rejects_bad_inputs() {
    let ext = extractor();
    assert!(matches!(
        ext.extract_features(&noise(7, 12, 0), &default_content_keys()),
        Err(InsError::Argument(_))
    ));
    assert!(matches!(
        ext.extract_features(&noise(8, 8, 0), &[LayerKey(6, 1)]),
        Err(InsError::Config(_))
    ));
    let (a, b) = (noise(8, 8, 0), noise(9, 8, 0));
    assert!(content_loss(&ext, &a, &b, &default_content_keys()).is_err());
}

struct Eval<'a> {
    ext: &'a FeatureExtractor,
    style: bool,
    content_keys: &'a [LayerKey],
    style_keys: &'a [LayerKey],
    fc: &'a FeatureValues,
    grams: &'a FeatureValues,
}

impl Eval<'_> {
    fn run<'t>(&self, x: Var<'t>) -> Var<'t> {
        if self.style {
            let f = self.ext.features_on_tape(x, 8, 8, self.style_keys).unwrap();
            style_loss_on_tape(&f, self.grams)
        } else {
            let f = self
                .ext
                .features_on_tape(x, 8, 8, self.content_keys)
                .unwrap();
            content_loss_on_tape(&f, self.fc)
        }
    }
}

/// d(loss)/d(patch) against central differences on an 8×8 patch.
fn check_patch_gradient(style: bool) {
    let ext = extractor();
    let reference = noise(8, 8, 11);
    let x0 = noise(8, 8, 12).to_tensor();
    let content_keys = default_content_keys();
    let style_keys = default_style_keys();
    let fc = ext.extract_features(&reference, &content_keys).unwrap();
    let grams = style_grams(&ext, &noise(16, 16, 13), &style_keys).unwrap();
    let eval = Eval {
        ext: &ext,
        style,
        content_keys: &content_keys,
        style_keys: &style_keys,
        fc: &fc,
        grams: &grams,
    };
    let tape = Tape::new();
    let x = tape.var(x0.clone());
    let loss = eval.run(x);
    let analytic = tape.backward(loss).get_or_zeros(x);
    let numeric = numeric_gradient(
        |probe| {
            let tape = Tape::new();
            eval.run(tape.constant(probe.clone())).item()
        },
        &x0,
        1e-6,
    );
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = max_relative_error(&analytic, &numeric, 1e-3 * scale);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn content_gradient_matches_finite_differences() {
    check_patch_gradient(false);
}

#[test]
fn style_gradient_matches_finite_differences() {
    check_patch_gradient(true);
}

#[test]
fn geometry_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let frozen = random(&[6, 5], &mut rng);
    // Keep every entry at least 0.05 from a tie.
    let s0 = frozen.mapv(|v| {
        let d: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v + d
        } else {
            v - d
        }
    });
    let tape = Tape::new();
    let s = tape.var(s0.clone());
    let analytic = tape
        .backward(geometry_loss_on_tape(s, &frozen).unwrap())
        .get_or_zeros(s);
    let numeric = numeric_gradient(
        |probe| {
            let tape = Tape::new();
            geometry_loss_on_tape(tape.constant(probe.clone()), &frozen)
                .unwrap()
                .item()
        },
        &s0,
        1e-6,
    );
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert!((a - n).abs() <= 1e-4, "{a} vs {n}");
        assert!((a.abs() - 1.0 / 30.0).abs() < 1e-12);
    }
}

#[test]
fn recon_and_geometry_scalar_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a: Vec<[f64; 3]> = (0..17)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let b: Vec<[f64; 3]> = (0..17)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let mut want = 0.0;
    for i in 0..17 {
        for c in 0..3 {
            want += (a[i][c] - b[i][c]).powi(2);
        }
    }
    want /= 51.0;
    assert!((recon_loss(&a, &b).unwrap() - want).abs() <= 1e-7);
    assert_eq!(recon_loss(&[[0.0; 3]], &[[1.0; 3]]).unwrap(), 1.0);
    assert!(matches!(
        recon_loss(&a, &b[..3]),
        Err(InsError::Argument(_))
    ));
    assert_eq!(geometry_loss(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
}

#[test]
fn total_recomposes_weighted_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for step in [0u64, 5, 50] {
        let tape = Tape::new();
        let vals: [f64; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
        let terms = LossTerms {
            recon: Some(tape.scalar(vals[0])),
            geometry: Some(tape.scalar(vals[1])),
            content: Some(tape.scalar(vals[2])),
            style: Some(tape.scalar(vals[3])),
        };
        let w = LossWeights {
            recon: rng.random_range(0.0..2.0),
            geometry: rng.random_range(0.0..1e6),
            content: rng.random_range(0.0..2.0),
            style: rng.random_range(0.0..1e8),
            phase_boundary: 10,
        };
        let (total, log) = total_loss(&tape, &terms, &w, step);
        let e = w.at(step);
        let want =
            e.recon * vals[0] + e.geometry * vals[1] + e.content * vals[2] + e.style * vals[3];
        assert!((total.item() - want).abs() <= 1e-6 * want.abs());
        assert_eq!(log.total, total.item());
        assert_eq!([log.recon, log.geometry, log.content, log.style], vals);
        if step < 10 {
            assert_eq!(total.item(), w.recon * vals[0]);
        }
    }
}

#[test]
fn zero_weights_and_perfect_pretraining_give_zero() {
    let tape = Tape::new();
    let terms = LossTerms {
        recon: Some(tape.scalar(0.4)),
        geometry: Some(tape.scalar(3.0)),
        content: Some(tape.scalar(2.0)),
        style: Some(tape.scalar(1.0)),
    };
    let zero = LossWeights {
        recon: 0.0,
        geometry: 0.0,
        content: 0.0,
        style: 0.0,
        phase_boundary: 0,
    };
    assert_eq!(total_loss(&tape, &terms, &zero, 3).0.item(), 0.0);
    let perfect = LossTerms {
        recon: Some(tape.scalar(0.0)),
        ..terms
    };
    let w = LossWeights {
        phase_boundary: 100,
        ..LossWeights::default()
    };
    assert_eq!(total_loss(&tape, &perfect, &w, 3).0.item(), 0.0);
}

#[test]
fn weights_reject_negative_values() {
    let w = LossWeights {
        style: -1.0,
        ..LossWeights::default()
    };
    assert!(matches!(w.validate(), Err(InsError::Config(_))));
    assert_eq!(LossWeights::default().geometry, 1e6);
    assert_eq!(LossWeights::default().style, 1e8);
}
