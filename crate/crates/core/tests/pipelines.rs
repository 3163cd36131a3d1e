use std::sync::OnceLock;

use ins_autograd::{Binding, ParamSet, Tape, Tensor, Trainable};
use ins_core::checkpoint::{Checkpoint, Phase, FORMAT_VERSION, MAGIC};
use ins_core::dataio::synthetic::{content_image, render_sphere, style_image, SphereSceneSpec};
use ins_core::dataio::{psnr, read_color_frame, write_frames, Image, PosedImageSet, StyleSet};
use ins_core::fields::{prefix, FieldConfig, InsField, StyleCode};
use ins_core::losses::{FeatureExtractor, LossWeights, SURROGATE_SEED};
use ins_core::pipelines::{
    evaluate, evaluate_frames, fit_siren, interpolate_styles, masked_style_loss, pretrain_nerf,
    pretrain_sdf, render_path, render_view, stylize_nerf, stylize_sdf, Monitor, Recorder,
    StepRecord, Target, TrainConfig,
};
use ins_core::rendering::RenderOptions;
use ins_core::InsError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn extractor() -> &'static FeatureExtractor {
    static EXT: OnceLock<FeatureExtractor> = OnceLock::new();
    EXT.get_or_init(|| FeatureExtractor::surrogate(8, SURROGATE_SEED))
}

fn spec() -> SphereSceneSpec {
    SphereSceneSpec {
        views: 3,
        size: 12,
        ..SphereSceneSpec::default()
    }
}

/// Sphere views rendered in memory; masked scenes sit on black.
fn scene(masked: bool) -> PosedImageSet {
    let spec = spec();
    let bg = if masked { [0.0; 3] } else { [1.0; 3] };
    let (mut images, mut masks) = (vec![], vec![]);
    for cam in spec.cameras() {
        let (img, hit) = render_sphere(&cam, spec.radius, bg);
        images.push(img);
        masks.push(hit);
    }
    PosedImageSet {
        images,
        cameras: spec.cameras(),
        masks: masked.then_some(masks),
        near: spec.near,
        far: spec.far,
        names: (0..spec.views).map(|i| format!("r_{i}")).collect(),
    }
}

fn styles(n: usize) -> StyleSet {
    StyleSet::from_images(
        (0..n).map(|i| style_image(i, 16)).collect(),
        (0..n).map(|i| format!("s{i}")).collect(),
    )
}

fn tiny(mut c: FieldConfig) -> FieldConfig {
    c.cim_depth = 2;
    c.cim_width = 16;
    c.sim_width = 8;
    c.style_width = 4;
    c.am_depth = 1;
    c.am_width = 8;
    c.pos_freqs = c.pos_freqs.min(2);
    c.dir_freqs = c.dir_freqs.min(1);
    if c.sdf_feature_width > 0 {
        c.sdf_feature_width = 4;
        c.sdf_init_radius = 0.9;
    }
    c
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        seed: 7,
        pretrain_steps: 6,
        stylize_steps: 4,
        lr: 5e-3,
        batch: 32,
        samples: 8,
        patch_size: 8,
        stride: 1,
        style_size: 16,
        ..TrainConfig::default()
    }
}

fn opts() -> RenderOptions {
    RenderOptions {
        samples: 8,
        parallel: false,
        ..RenderOptions::default()
    }
}

fn pretrained_nerf() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        pretrain_nerf(
            &scene(false),
            &tiny(FieldConfig::nerf(2)),
            &train_cfg(),
            None,
            &mut (),
        )
        .unwrap()
    })
}

fn assert_recomposes(records: &[StepRecord]) {
    assert!(!records.is_empty());
    for r in records {
        let w = r.weights;
        let want = w.recon * r.loss.recon
            + w.geometry * r.loss.geometry
            + w.content * r.loss.content
            + w.style * r.loss.style
            + r.aux.iter().map(|a| a.weight * a.value).sum::<f64>();
        let tol = 1e-6 * want.abs().max(1e-12);
        assert!(
            (r.loss.total - want).abs() <= tol,
            "step {}: {} vs {want}",
            r.step,
            r.loss.total
        );
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rec = Recorder::default();
    let ckpt = stylize_nerf(
        pretrained_nerf(),
        &scene(false),
        &styles(2),
        &train_cfg(),
        extractor(),
        &mut rec,
    )
    .unwrap();
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(back, ckpt);
    assert!(back.frozen.is_some());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), ckpt.to_bytes());
    let cam = scene(false).cameras[0].clone();
    let code = StyleCode::one_hot(1, 2).unwrap();
    let a = render_view(&ckpt.field, &Target::Camera(cam.clone()), &code, &opts()).unwrap();
    let b = render_view(&loaded.field, &Target::Camera(cam), &code, &opts()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = pretrained_nerf().to_bytes();
    let mut bad_version = bytes.clone();
    let v = MAGIC.len();
    bad_version[v..v + 4].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&bad_version),
        Err(InsError::Corrupted(_))
    ));
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(
        Checkpoint::from_bytes(&bad_magic),
        Err(InsError::Corrupted(_))
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(InsError::Corrupted(_))
    ));
    let dir = tempfile::tempdir().unwrap();
    assert!(Checkpoint::load(&dir.path().join("missing.bin")).is_err());
}

#[test]
fn zero_steps_return_the_initialization() {
    let cfg = TrainConfig {
        pretrain_steps: 0,
        ..train_cfg()
    };
    let field_cfg = tiny(FieldConfig::nerf(2));
    let mut rec = Recorder::default();
    let ckpt = pretrain_nerf(&scene(false), &field_cfg, &cfg, None, &mut rec).unwrap();
    assert_eq!(ckpt.field, InsField::new(field_cfg, cfg.seed).unwrap());
    assert_eq!((ckpt.step, ckpt.phase), (0, Phase::Pretrain));
    assert!(rec.records.is_empty());
}

#[test]
fn reruns_and_resumes_are_bit_identical() {
    let field_cfg = tiny(FieldConfig::nerf(2));
    let cfg = train_cfg();
    let full = pretrain_nerf(&scene(false), &field_cfg, &cfg, None, &mut ()).unwrap();
    let again = pretrain_nerf(&scene(false), &field_cfg, &cfg, None, &mut ()).unwrap();
    assert_eq!(full.to_bytes(), again.to_bytes());

    struct Grab(Option<Checkpoint>);
    impl Monitor for Grab {
        fn on_checkpoint(&mut self, c: &Checkpoint) -> ins_core::Result<()> {
            if c.step == 3 {
                self.0 = Some(c.clone());
            }
            Ok(())
        }
    }
    let mut grab = Grab(None);
    let every = TrainConfig {
        checkpoint_every: 3,
        ..cfg.clone()
    };
    let full = pretrain_nerf(&scene(false), &field_cfg, &every, None, &mut grab).unwrap();
    let first = Checkpoint::from_bytes(&grab.0.unwrap().to_bytes()).unwrap();
    let resumed = pretrain_nerf(&scene(false), &field_cfg, &every, Some(first), &mut ()).unwrap();
    assert_eq!(resumed.field, full.field);
    assert_eq!(resumed.optimizer, full.optimizer);
    assert_eq!(resumed.step, full.step);
}

#[test]
fn periodic_checkpoints_are_reported() {
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..train_cfg()
    };
    let mut rec = Recorder::default();
    pretrain_nerf(
        &scene(false),
        &tiny(FieldConfig::nerf(2)),
        &cfg,
        None,
        &mut rec,
    )
    .unwrap();
    assert_eq!(rec.checkpoints, vec![2, 4, 6]);
    assert_eq!(rec.records.len(), 6);
    assert_recomposes(&rec.records);
    assert!(rec
        .records
        .iter()
        .all(|r| r.weights.style == 0.0 && r.phase == Phase::Pretrain));
}

#[test]
fn pretraining_needs_two_views() {
    let mut one = scene(false);
    one.images.truncate(1);
    one.cameras.truncate(1);
    assert!(matches!(
        pretrain_nerf(
            &one,
            &tiny(FieldConfig::nerf(2)),
            &train_cfg(),
            None,
            &mut ()
        ),
        Err(InsError::Data(_))
    ));
}

fn cim_params(p: &ParamSet) -> Vec<(String, ins_autograd::Tensor)> {
    p.iter()
        .filter(|(n, _)| n.starts_with(prefix::CIM))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

#[test]
fn frozen_copy_never_changes() {
    let pre = pretrained_nerf();
    let mut rec = Recorder::default();
    let out = stylize_nerf(
        pre,
        &scene(false),
        &styles(2),
        &train_cfg(),
        extractor(),
        &mut rec,
    )
    .unwrap();
    let frozen = out.frozen.as_ref().unwrap();
    assert_eq!(cim_params(frozen), cim_params(pre.field.params()));
    assert_ne!(
        cim_params(out.field.params()),
        cim_params(pre.field.params())
    );
    assert_eq!(out.phase, Phase::Stylize);
    assert_eq!(out.step, pre.step + 4);
    assert_recomposes(&rec.records);
    assert!(rec.records.iter().all(|r| r.weights
        == LossWeights {
            phase_boundary: 0,
            ..LossWeights::default()
        }));
}

#[test]
fn color_only_stylization_keeps_depth_bit_identical() {
    let field_cfg = FieldConfig {
        style_density_enabled: false,
        ..tiny(FieldConfig::nerf(2))
    };
    let pre = pretrain_nerf(&scene(false), &field_cfg, &train_cfg(), None, &mut ()).unwrap();
    let cams = scene(false).cameras;
    let code = StyleCode::one_hot(0, 2).unwrap();
    let before = render_path(&pre, &cams, &code, &opts()).unwrap();
    let out = stylize_nerf(
        &pre,
        &scene(false),
        &styles(2),
        &train_cfg(),
        extractor(),
        &mut (),
    )
    .unwrap();
    let after = render_path(&out, &cams, &code, &opts()).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.depth, b.depth);
    }
    assert_ne!(before[0].color, after[0].color);
}

/// Mean |stylized density - frozen content density| over fixed points and all styles.
fn density_gap(ckpt: &Checkpoint, points: &[[f64; 3]]) -> f64 {
    let frozen = ckpt.frozen.as_ref().unwrap();
    let n = ckpt.field.config().n_styles;
    let mut sum = 0.0;
    for x in points {
        let tape = Tape::new();
        let p = Binding::new(&tape, frozen, Trainable::None);
        let target = ckpt
            .field
            .content_density(
                &p,
                tape.constant(Tensor::from_shape_vec(vec![1, 3], x.to_vec()).unwrap()),
            )
            .item();
        for i in 0..n {
            let code = StyleCode::one_hot(i, n).unwrap();
            let out = ckpt.field.query(x, Some([0.0, 0.0, -1.0]), &code).unwrap();
            sum += (out.density.unwrap() - target).abs();
        }
    }
    sum / (points.len() * n) as f64
}

#[test]
fn strong_geometry_term_does_not_increase_density_gap() {
    let mut pre = pretrained_nerf().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, t) in pre.field.params_mut().iter_mut() {
        if name.starts_with(prefix::AM_DENSITY) {
            t.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
    }
    let points: Vec<[f64; 3]> = (0..64)
        .map(|_| [0; 3].map(|_| rng.random_range(-1.2..1.2)))
        .collect();
    let weights = LossWeights {
        recon: 0.0,
        geometry: 1e3,
        content: 0.0,
        style: 0.0,
        phase_boundary: 0,
    };
    let start = TrainConfig {
        stylize_steps: 0,
        weights,
        ..train_cfg()
    };
    let before = stylize_nerf(
        &pre,
        &scene(false),
        &styles(2),
        &start,
        extractor(),
        &mut (),
    )
    .unwrap();
    let cfg = TrainConfig {
        stylize_steps: 60,
        ..start
    };
    let after = stylize_nerf(&pre, &scene(false), &styles(2), &cfg, extractor(), &mut ()).unwrap();
    let (b, a) = (density_gap(&before, &points), density_gap(&after, &points));
    assert!(b > 0.0);
    assert!(a <= b, "{a} > {b}");
}

#[test]
fn stylization_checks_its_inputs() {
    let pre = pretrained_nerf();
    assert!(matches!(
        stylize_nerf(
            pre,
            &scene(false),
            &styles(3),
            &train_cfg(),
            extractor(),
            &mut ()
        ),
        Err(InsError::Config(_))
    ));
    let styled = stylize_nerf(
        pre,
        &scene(false),
        &styles(2),
        &TrainConfig {
            stylize_steps: 0,
            ..train_cfg()
        },
        extractor(),
        &mut (),
    )
    .unwrap();
    assert!(matches!(
        stylize_nerf(
            &styled,
            &scene(false),
            &styles(2),
            &train_cfg(),
            extractor(),
            &mut ()
        ),
        Err(InsError::Config(_))
    ));
}

#[test]
fn non_finite_loss_aborts_naming_the_term() {
    let mut pre = pretrained_nerf().clone();
    pre.field
        .params_mut()
        .get_mut("am.color.bias")
        .unwrap()
        .fill(f64::NAN);
    match stylize_nerf(
        &pre,
        &scene(false),
        &styles(2),
        &train_cfg(),
        extractor(),
        &mut (),
    ) {
        Err(InsError::NonFinite { term, step }) => {
            assert_eq!(term, "recon");
            assert_eq!(step, pre.step);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn interpolation_endpoints_match_one_hot_renders() {
    let ckpt = pretrained_nerf();
    let target = Target::Camera(scene(false).cameras[1].clone());
    let frames = interpolate_styles(ckpt, &target, 0, 1, 11, &opts()).unwrap();
    assert_eq!(frames.len(), 11);
    let one_hot = |i| {
        render_view(
            &ckpt.field,
            &target,
            &StyleCode::one_hot(i, 2).unwrap(),
            &opts(),
        )
        .unwrap()
    };
    assert_eq!(frames[0], one_hot(0));
    assert_eq!(frames[10], one_hot(1));
    let pair = interpolate_styles(ckpt, &target, 0, 1, 2, &opts()).unwrap();
    assert_eq!(pair, vec![one_hot(0), one_hot(1)]);
    for bad in [(0, 0, 11), (0, 1, 1)] {
        assert!(matches!(
            interpolate_styles(ckpt, &target, bad.0, bad.1, bad.2, &opts()),
            Err(InsError::Argument(_))
        ));
    }
    let single = pretrain_nerf(
        &scene(false),
        &tiny(FieldConfig::nerf(1)),
        &TrainConfig {
            pretrain_steps: 0,
            ..train_cfg()
        },
        None,
        &mut (),
    )
    .unwrap();
    assert!(interpolate_styles(&single, &target, 0, 1, 3, &opts()).is_err());
}

#[test]
fn render_path_is_deterministic_and_checks_codes() {
    let ckpt = pretrained_nerf();
    let cam = scene(false).cameras[2].clone();
    let code = StyleCode::one_hot(0, 2).unwrap();
    let frames = render_path(ckpt, &[cam.clone(), cam.clone()], &code, &opts()).unwrap();
    assert_eq!(frames[0], frames[1]);
    let par = render_path(
        ckpt,
        std::slice::from_ref(&cam),
        &code,
        &RenderOptions {
            parallel: true,
            ..opts()
        },
    )
    .unwrap();
    assert_eq!(par[0], frames[0]);
    assert!(frames[0]
        .depth
        .as_ref()
        .unwrap()
        .iter()
        .all(|d| d.is_finite()));
    assert!(matches!(
        render_path(ckpt, &[cam], &StyleCode::one_hot(0, 3).unwrap(), &opts()),
        Err(InsError::Config(_))
    ));
}

#[test]
fn psnr_conventions() {
    assert_eq!(psnr(0.0), 99.0);
    assert!((psnr(0.01) - 20.0).abs() < 1e-12);
}

#[test]
fn evaluation_matches_recomputation_from_saved_frames() {
    let ckpt = pretrained_nerf();
    let sc = scene(false);
    let targets: Vec<Target> = sc.cameras.iter().cloned().map(Target::Camera).collect();
    let code = StyleCode::zeros(2);
    let (report, frames) =
        evaluate(ckpt, &targets, &sc.images, &sc.names, &code, &opts(), None).unwrap();
    assert_eq!(report.views.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    write_frames(&frames, dir.path(), sc.far).unwrap();
    let saved: Vec<Image> = (0..frames.len())
        .map(|i| read_color_frame(&dir.path().join(format!("frame_{i:04}.png"))).unwrap())
        .collect();
    let again = evaluate_frames(&saved, &sc.images, &sc.names, None).unwrap();
    for (a, b) in report.views.iter().zip(&again.views) {
        assert!((a.mse - b.mse).abs() < 1e-6);
        assert!((a.psnr - b.psnr).abs() < 1e-6);
    }
    assert!((report.mean_psnr - again.mean_psnr).abs() < 1e-6);

    let exact = evaluate_frames(&saved, &saved, &sc.names, None).unwrap();
    assert!(exact.views.iter().all(|v| v.psnr == 99.0));
}

#[test]
fn siren_style_path_is_inert_without_style_weight() {
    let image = content_image(16);
    let field_cfg = FieldConfig {
        cim_depth: 3,
        cim_width: 32,
        am_width: 32,
        am_depth: 2,
        sim_width: 8,
        style_width: 8,
        ..FieldConfig::siren(1)
    };
    let cfg = TrainConfig {
        pretrain_steps: 500,
        stylize_steps: 20,
        lr: 5e-4,
        batch: 256,
        patch_size: 8,
        stride: 2,
        weights: LossWeights {
            style: 0.0,
            content: 0.0,
            ..LossWeights::default()
        },
        ..train_cfg()
    };
    let phase1 = fit_siren(
        &image,
        &styles(1),
        &field_cfg,
        &TrainConfig {
            stylize_steps: 0,
            ..cfg.clone()
        },
        None,
        &mut (),
    )
    .unwrap();
    let mut rec = Recorder::default();
    let full = fit_siren(
        &image,
        &styles(1),
        &field_cfg,
        &cfg,
        Some(extractor()),
        &mut rec,
    )
    .unwrap();
    assert_recomposes(&rec.records);
    assert_eq!(rec.records.len(), 520);
    let target = Target::Image {
        height: 16,
        width: 16,
    };
    let code = StyleCode::one_hot(0, 1).unwrap();
    let p1 = render_view(&phase1.field, &target, &code, &opts())
        .unwrap()
        .color;
    let p2 = render_view(&full.field, &target, &code, &opts())
        .unwrap()
        .color;
    let (a, b) = (psnr(p1.mse(&image).unwrap()), psnr(p2.mse(&image).unwrap()));
    assert!(a > 20.0, "phase-1 PSNR {a}");
    assert!((a - b).abs() <= 1.0, "{a} vs {b}");
}

#[test]
fn siren_stylization_needs_an_extractor() {
    assert!(matches!(
        fit_siren(
            &content_image(8),
            &styles(1),
            &tiny(FieldConfig::siren(1)),
            &train_cfg(),
            None,
            &mut ()
        ),
        Err(InsError::Config(_))
    ));
}

#[test]
fn masked_style_loss_ignores_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Image::from_fn(12, 12, |_, _| [rng.random(), rng.random(), rng.random()]);
    let mask: Vec<bool> = (0..144).map(|i| (i / 12) % 5 != 0 && i % 12 > 3).collect();
    let noisy = Image::new(
        12,
        12,
        img.pixels
            .iter()
            .zip(&mask)
            .map(|(p, &m)| {
                if m {
                    *p
                } else {
                    [rng.random(), rng.random(), rng.random()]
                }
            })
            .collect(),
    )
    .unwrap();
    let style = style_image(2, 16);
    let keys = ins_core::losses::default_style_keys();
    let a = masked_style_loss(extractor(), &img, &mask, &style, &keys).unwrap();
    let b = masked_style_loss(extractor(), &noisy, &mask, &style, &keys).unwrap();
    assert_eq!(a, b);
    assert!(masked_style_loss(extractor(), &img, &mask[1..], &style, &keys).is_err());
}

fn sdf_cfg() -> TrainConfig {
    TrainConfig {
        lr: 5e-4,
        ..train_cfg()
    }
}

fn pretrained_sdf() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let mut rec = Recorder::default();
        let c = pretrain_sdf(
            &scene(true),
            &tiny(FieldConfig::sdf(2)),
            &sdf_cfg(),
            None,
            &mut rec,
        )
        .unwrap();
        assert_recomposes(&rec.records);
        assert!(rec
            .records
            .iter()
            .all(|r| r.aux.iter().any(|a| a.name == "eikonal")));
        c
    })
}

#[test]
fn zero_geometry_multiplier_freezes_the_surface() {
    let pre = pretrained_sdf();
    let cfg = TrainConfig {
        geometry_lr_multiplier: 0.0,
        ..sdf_cfg()
    };
    let mut rec = Recorder::default();
    let out = stylize_sdf(pre, &scene(true), &styles(2), &cfg, extractor(), &mut rec).unwrap();
    assert_eq!(
        cim_params(out.field.params()),
        cim_params(pre.field.params())
    );
    assert_ne!(out.field.params(), pre.field.params());
    assert_recomposes(&rec.records);
    assert!(rec.records.iter().all(|r| r.loss.geometry == 0.0));

    let moving = TrainConfig {
        geometry_lr_multiplier: 1.0,
        ..sdf_cfg()
    };
    let out = stylize_sdf(pre, &scene(true), &styles(2), &moving, extractor(), &mut ()).unwrap();
    assert_ne!(
        cim_params(out.field.params()),
        cim_params(pre.field.params())
    );
}

#[test]
fn all_miss_patches_are_skipped() {
    let field_cfg = FieldConfig {
        sdf_init_radius: 0.01,
        ..tiny(FieldConfig::sdf(1))
    };
    let pre = pretrain_sdf(
        &scene(true),
        &field_cfg,
        &TrainConfig {
            pretrain_steps: 0,
            ..sdf_cfg()
        },
        None,
        &mut (),
    )
    .unwrap();
    let mut rec = Recorder::default();
    let out = stylize_sdf(
        &pre,
        &scene(true),
        &styles(1),
        &sdf_cfg(),
        extractor(),
        &mut rec,
    )
    .unwrap();
    assert_eq!(rec.records.len(), 4);
    assert!(rec.records.iter().all(|r| r.skipped));
    assert_eq!(out.field.params(), pre.field.params());
    assert_eq!(out.step, 4);
}

#[test]
fn sdf_pretraining_needs_masks() {
    assert!(matches!(
        pretrain_sdf(
            &scene(false),
            &tiny(FieldConfig::sdf(1)),
            &sdf_cfg(),
            None,
            &mut ()
        ),
        Err(InsError::Data(_))
    ));
}

#[test]
fn sdf_renders_are_deterministic() {
    let pre = pretrained_sdf();
    let cam = scene(true).cameras[0].clone();
    let code = StyleCode::one_hot(1, 2).unwrap();
    let a = render_path(pre, std::slice::from_ref(&cam), &code, &opts()).unwrap();
    let b = render_path(
        pre,
        &[cam],
        &code,
        &RenderOptions {
            parallel: true,
            ..opts()
        },
    )
    .unwrap();
    assert_eq!(a, b);
    let hits = a[0]
        .depth
        .as_ref()
        .unwrap()
        .iter()
        .filter(|d| **d < spec().far)
        .count();
    assert!(hits > 0);
}

#[test]
fn config_validation_rejects_bad_values() {
    let bad = [
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_decay: 1.5,
            ..TrainConfig::default()
        },
        TrainConfig {
            patch_size: 4,
            ..TrainConfig::default()
        },
        TrainConfig {
            device: "cuda".into(),
            ..TrainConfig::default()
        },
        TrainConfig {
            geometry_lr_multiplier: -1.0,
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(
            matches!(cfg.validate(), Err(InsError::Config(_))),
            "{cfg:?}"
        );
    }
    TrainConfig::default().validate().unwrap();
    let parsed: Result<TrainConfig, _> = serde_json::from_str(r#"{"lr": 1e-3, "bogus": 1}"#);
    assert!(parsed.is_err());
}
