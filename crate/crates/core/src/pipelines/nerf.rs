use ins_autograd::{Adam, AdamConfig, Binding, ParamSet, Tape, Tensor, Trainable};
use ndarray::IxDyn;
use rand::Rng;

use super::{
    check_finite, mean_over_styles, periodic, require_kind, require_styles, step_rng, Monitor,
    Perceptual, StepRecord, TrainConfig,
};
use crate::checkpoint::{Checkpoint, Phase};
use crate::dataio::{Image, PosedImageSet, StyleSet};
use crate::error::{InsError, Result};
use crate::fields::{prefix, FieldConfig, FieldKind, InsField, StyleCode};
use crate::losses::{
    geometry_loss_on_tape, recon_loss_on_tape, total_loss, FeatureExtractor, LossTerms, LossWeights,
};
use crate::rendering::{composite_on_tape, render_samples, Ray, RaySamples};
use crate::sampling::{all_pixels, camera_rays, stride_patch};

/// Background of radiance-field scenes.
const WHITE: [f64; 3] = [1.0; 3];

/// Parameters trained before any style exists: everything except the
/// style-conditioned density correction.
fn pretrain_trainable() -> Trainable {
    Trainable::Prefixes(vec![
        prefix::SIM.into(),
        prefix::CIM.into(),
        "am.l".into(),
        "am.color.".into(),
    ])
}

fn all_rays(scene: &PosedImageSet) -> Result<(Vec<Ray>, Vec<[f64; 3]>)> {
    let mut rays = vec![];
    let mut colors = vec![];
    for (img, cam) in scene.images.iter().zip(&scene.cameras) {
        let batch = camera_rays(cam, &all_pixels(img.height, img.width))?;
        rays.extend(batch.rays);
        colors.extend_from_slice(&img.pixels);
    }
    Ok((rays, colors))
}

fn rows(colors: &[[f64; 3]]) -> Tensor {
    let flat: Vec<f64> = colors.iter().flatten().copied().collect();
    Tensor::from_shape_vec(IxDyn(&[colors.len(), 3]), flat).expect("N×3")
}

/// Photometric pretraining of a radiance field on posed views.
///
/// With `resume`, training continues from the checkpoint's step up to
/// `cfg.pretrain_steps` and reproduces the uninterrupted run exactly.
pub fn pretrain_nerf(
    scene: &PosedImageSet,
    field_cfg: &FieldConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    monitor: &mut dyn Monitor,
) -> Result<Checkpoint> {
    cfg.validate()?;
    require_kind(field_cfg, FieldKind::Nerf, "pretrain_nerf")?;
    if scene.len() < 2 {
        return Err(InsError::Data(format!(
            "radiance-field pretraining needs at least 2 posed views, got {}",
            scene.len()
        )));
    }
    let (mut field, mut adam, start) = match resume {
        Some(c) => {
            if c.phase != Phase::Pretrain || c.field.config() != field_cfg {
                return Err(InsError::Config(
                    "resume checkpoint is not a pretraining state of this field".into(),
                ));
            }
            (c.field, c.optimizer, c.step)
        }
        None => (
            InsField::new(field_cfg.clone(), cfg.seed)?,
            Adam::new(AdamConfig::default()),
            0,
        ),
    };
    let snapshot = cfg.snapshot();
    let checkpoint = |field: &InsField, adam: &Adam, step: u64| Checkpoint {
        field: field.clone(),
        frozen: None,
        optimizer: adam.clone(),
        step,
        phase: Phase::Pretrain,
        config: snapshot.clone(),
    };
    let (rays, colors) = all_rays(scene)?;
    let zero = StyleCode::zeros(field_cfg.n_styles);
    let weights = LossWeights {
        phase_boundary: u64::MAX,
        ..cfg.weights
    };

    for step in start..cfg.pretrain_steps {
        let mut rng = step_rng(cfg.seed, step);
        let idx: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.random_range(0..rays.len()))
            .collect();
        let batch: Vec<Ray> = idx.iter().map(|&i| rays[i]).collect();
        let target = rows(&idx.iter().map(|&i| colors[i]).collect::<Vec<_>>());
        let samples = RaySamples::stratified(&batch, cfg.samples, Some(&mut rng))?;

        let tape = Tape::new();
        let p = Binding::new(&tape, field.params(), pretrain_trainable());
        let style = field.style_features(&p, &zero)?;
        let out = render_samples(&field, &p, &samples, style, WHITE);
        let terms = LossTerms {
            recon: Some(recon_loss_on_tape(out.color, &target)?),
            ..Default::default()
        };
        let (total, log) = total_loss(&tape, &terms, &weights, step);
        check_finite(&log, &[], step)?;
        let grads = p.gradients(&tape.backward(total));
        adam.step(field.params_mut(), &grads, |_| cfg.pretrain_lr(step));
        monitor.on_step(&StepRecord {
            phase: Phase::Pretrain,
            step,
            loss: log,
            weights: weights.at(step),
            aux: vec![],
            skipped: false,
        });
        if periodic(cfg, step) {
            monitor.on_checkpoint(&checkpoint(&field, &adam, step + 1))?;
        }
    }
    Ok(checkpoint(&field, &adam, start.max(cfg.pretrain_steps)))
}

/// Stylizes a pretrained radiance field with self-distilled geometry
/// consistency.
///
/// A copy of the content module is frozen first. Each step renders one
/// strided patch of a random view under every style code; the frozen copy is
/// evaluated at the same sample points to form the geometry term. With
/// style-conditioned density disabled only the style and amalgamation modules
/// train, so the density field stays exactly as pretrained.
pub fn stylize_nerf(
    pretrained: &Checkpoint,
    scene: &PosedImageSet,
    styles: &StyleSet,
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    monitor: &mut dyn Monitor,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if pretrained.phase != Phase::Pretrain {
        return Err(InsError::Config(format!(
            "stylization starts from a pretraining checkpoint, got phase `{}`",
            pretrained.phase
        )));
    }
    let field_cfg = pretrained.field.config().clone();
    require_kind(&field_cfg, FieldKind::Nerf, "stylize_nerf")?;
    require_styles(&field_cfg, styles)?;
    if scene.is_empty() {
        return Err(InsError::Data("scene has no views".into()));
    }
    let perceptual = Perceptual::new(extractor, cfg, styles)?;

    let mut field = pretrained.field.clone();
    let frozen: ParamSet = field.content_params();
    let mut adam = Adam::new(AdamConfig::default());
    let trainable = || {
        if field_cfg.style_density_enabled {
            Trainable::All
        } else {
            Trainable::Prefixes(vec![prefix::SIM.into(), prefix::AM.into()])
        }
    };
    let weights = LossWeights {
        phase_boundary: 0,
        ..cfg.weights
    };
    let start = pretrained.step;
    let snapshot = cfg.snapshot();
    let checkpoint = |field: &InsField, adam: &Adam, step: u64| Checkpoint {
        field: field.clone(),
        frozen: Some(frozen.clone()),
        optimizer: adam.clone(),
        step,
        phase: Phase::Stylize,
        config: snapshot.clone(),
    };
    let k = cfg.patch_size;

    for step in start..start + cfg.stylize_steps {
        let mut rng = step_rng(cfg.seed, step);
        let view = rng.random_range(0..scene.len());
        let (img, cam) = (&scene.images[view], &scene.cameras[view]);
        let patch = stride_patch(img.height, img.width, k, cfg.stride, &mut rng)?;
        let batch = camera_rays(cam, &patch.pixels)?;
        let samples = RaySamples::stratified(&batch.rays, cfg.samples, Some(&mut rng))?;
        let (r, kk) = (samples.n_rays(), samples.n_samples());
        let y = img.gather(&patch.pixels);
        let reference = perceptual.reference(&Image::from_tensor(k, k, &y)?)?;
        let sigma_frozen = frozen_density(&field, &frozen, &samples, r, kk);

        let tape = Tape::new();
        let p = Binding::new(&tape, field.params(), trainable());
        let content = field.content(&p, tape.constant(samples.points.clone()));
        let dirs = tape.constant(samples.dirs.clone());
        let mut parts = Vec::with_capacity(styles.len());
        for (i, code) in styles.codes.iter().enumerate() {
            let s = field.style_features(&p, code)?;
            let out = field.amalgamate(&p, &content, Some(dirs), s);
            let sigma = out.density.expect("radiance field").reshape(&[r, kk]);
            let render =
                composite_on_tape(out.color, sigma, &samples.depths, &samples.deltas, WHITE);
            let (c, st) = perceptual.terms(render.color, k, &reference, i)?;
            let terms = LossTerms {
                recon: Some(recon_loss_on_tape(render.color, &y)?),
                geometry: Some(geometry_loss_on_tape(sigma, &sigma_frozen)?),
                content: Some(c),
                style: Some(st),
            };
            parts.push(total_loss(&tape, &terms, &weights, step));
        }
        let (total, log) = mean_over_styles(&tape, parts);
        check_finite(&log, &[], step)?;
        let grads = p.gradients(&tape.backward(total));
        adam.step(field.params_mut(), &grads, |_| cfg.stylize_lr());
        monitor.on_step(&StepRecord {
            phase: Phase::Stylize,
            step,
            loss: log,
            weights,
            aux: vec![],
            skipped: false,
        });
        if periodic(cfg, step - start) {
            monitor.on_checkpoint(&checkpoint(&field, &adam, step + 1))?;
        }
    }
    Ok(checkpoint(&field, &adam, start + cfg.stylize_steps))
}

/// `R×K` densities of the frozen content copy at the shared sample points.
fn frozen_density(
    field: &InsField,
    frozen: &ParamSet,
    samples: &RaySamples,
    r: usize,
    k: usize,
) -> Tensor {
    let tape = Tape::new();
    let p = Binding::new(&tape, frozen, Trainable::None);
    let sigma = field.content_density(&p, tape.constant(samples.points.clone()));
    let v = sigma.reshape(&[r, k]).value();
    (*v).clone()
}
