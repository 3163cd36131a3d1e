use ins_autograd::{Adam, AdamConfig, Binding, Tape, Tensor, Trainable};
use ndarray::IxDyn;
use rand::Rng;

use super::{
    check_finite, mean_over_styles, periodic, require_kind, require_styles, step_rng, Monitor,
    Perceptual, StepRecord, TrainConfig,
};
use crate::checkpoint::{Checkpoint, Phase};
use crate::dataio::{Image, StyleSet};
use crate::error::{InsError, Result};
use crate::fields::{FieldConfig, FieldKind, InsField, StyleCode};
use crate::losses::{recon_loss_on_tape, total_loss, FeatureExtractor, LossTerms, LossWeights};
use crate::sampling::{pixel_grid, stride_patch};

/// Fits a 2-D image field to `image`, then stylizes it towards every style.
///
/// Steps `0..pretrain_steps` regress colors on random pixel batches with the
/// all-zero code. The remaining `stylize_steps` render one strided patch per
/// step under every one-hot code and minimize the averaged objective.
pub fn fit_siren(
    image: &Image,
    styles: &StyleSet,
    field_cfg: &FieldConfig,
    cfg: &TrainConfig,
    extractor: Option<&FeatureExtractor>,
    monitor: &mut dyn Monitor,
) -> Result<Checkpoint> {
    cfg.validate()?;
    require_kind(field_cfg, FieldKind::Siren, "fit_siren")?;
    require_styles(field_cfg, styles)?;
    let perceptual = match (cfg.stylize_steps, extractor) {
        (0, _) => None,
        (_, Some(e)) => Some(Perceptual::new(e, cfg, styles)?),
        (_, None) => {
            return Err(InsError::Config(
                "stylization steps need a feature extractor".into(),
            ))
        }
    };

    let mut field = InsField::new(field_cfg.clone(), cfg.seed)?;
    let coords: Vec<f64> = pixel_grid(image.height, image.width)
        .into_iter()
        .flatten()
        .collect();
    let n_px = image.pixels.len();
    let coords = Tensor::from_shape_vec(IxDyn(&[n_px, 2]), coords).expect("HW×2");
    let target = image.to_tensor();
    let zero = StyleCode::zeros(field_cfg.n_styles);
    let mut adam = Adam::new(AdamConfig::default());
    let snapshot = cfg.snapshot();
    let checkpoint = |field: &InsField, adam: &Adam, step: u64, phase: Phase| Checkpoint {
        field: field.clone(),
        frozen: None,
        optimizer: adam.clone(),
        step,
        phase,
        config: snapshot.clone(),
    };

    for step in 0..cfg.pretrain_steps {
        let mut rng = step_rng(cfg.seed, step);
        let (x, y) = if cfg.batch >= n_px {
            (coords.clone(), target.clone())
        } else {
            let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..n_px)).collect();
            (
                coords.select(ndarray::Axis(0), &idx),
                target.select(ndarray::Axis(0), &idx),
            )
        };
        let tape = Tape::new();
        let p = Binding::new(&tape, field.params(), Trainable::All);
        let out = field.forward(&p, tape.constant(x), None, &zero)?;
        let recon = recon_loss_on_tape(out.color, &y)?;
        let terms = LossTerms {
            recon: Some(recon),
            ..Default::default()
        };
        let weights = LossWeights {
            phase_boundary: cfg.pretrain_steps,
            ..cfg.weights
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
            monitor.on_checkpoint(&checkpoint(&field, &adam, step + 1, Phase::Pretrain))?;
        }
    }

    let Some(perceptual) = perceptual else {
        return Ok(checkpoint(
            &field,
            &adam,
            cfg.pretrain_steps,
            Phase::Pretrain,
        ));
    };
    adam = Adam::new(AdamConfig::default());
    let weights = LossWeights {
        phase_boundary: cfg.pretrain_steps,
        ..cfg.weights
    };
    let k = cfg.patch_size;
    for t in 0..cfg.stylize_steps {
        let step = cfg.pretrain_steps + t;
        let mut rng = step_rng(cfg.seed, step);
        let patch = stride_patch(image.height, image.width, k, cfg.stride, &mut rng)?;
        let idx: Vec<usize> = patch
            .pixels
            .iter()
            .map(|&(r, c)| r * image.width + c)
            .collect();
        let x = coords.select(ndarray::Axis(0), &idx);
        let y = image.gather(&patch.pixels);
        let reference = perceptual.reference(&Image::from_tensor(k, k, &y)?)?;

        let tape = Tape::new();
        let p = Binding::new(&tape, field.params(), Trainable::All);
        let content = field.content(&p, tape.constant(x));
        let mut parts = Vec::with_capacity(styles.len());
        for (i, code) in styles.codes.iter().enumerate() {
            let s = field.style_features(&p, code)?;
            let color = field.amalgamate(&p, &content, None, s).color;
            let (c, st) = perceptual.terms(color, k, &reference, i)?;
            let terms = LossTerms {
                recon: Some(recon_loss_on_tape(color, &y)?),
                geometry: None,
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
            weights: weights.at(step),
            aux: vec![],
            skipped: false,
        });
        if periodic(cfg, step) {
            monitor.on_checkpoint(&checkpoint(&field, &adam, step + 1, Phase::Stylize))?;
        }
    }
    Ok(checkpoint(
        &field,
        &adam,
        cfg.pretrain_steps + cfg.stylize_steps,
        Phase::Stylize,
    ))
}
