//! Training and inference procedures.
//!
//! Every pipeline draws its randomness from a generator keyed by
//! `(seed, global step)`, so a run resumed from a checkpoint retraces the
//! uninterrupted run exactly.

mod nerf;
mod render;
mod sdf;
mod siren;

use ins_autograd::{Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Phase};
use crate::dataio::{Image, StyleSet};
use crate::error::{InsError, Result};
use crate::fields::{FieldConfig, FieldKind};
use crate::losses::{
    content_loss_on_tape, default_content_keys, default_style_keys, style_grams,
    style_loss_on_tape, FeatureExtractor, FeatureValues, LayerKey, LossBreakdown, LossWeights,
    MIN_INPUT_SIDE,
};

pub use nerf::{pretrain_nerf, stylize_nerf};
pub use render::{
    evaluate, evaluate_frames, interpolate_styles, render_image, render_path, render_view,
    EvalReport, PerceptualEval, Target, ViewMetrics,
};
pub use sdf::{masked_patch, masked_style_loss, pretrain_sdf, stylize_sdf};
pub use siren::fit_siren;

/// Optimization schedule shared by all pipelines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Reconstruction-only steps (SIREN phase 1, radiance / SDF pretraining).
    pub pretrain_steps: u64,
    pub stylize_steps: u64,
    pub lr: f64,
    /// Pretraining learning rate decays exponentially to `lr * lr_decay`; stylization runs at that final rate.
    pub lr_decay: f64,
    /// SDF-network rate during SDF stylization, relative to the stylization rate.
    pub geometry_lr_multiplier: f64,
    /// Rays (or pixels) per pretraining step.
    pub batch: usize,
    /// Samples per ray.
    pub samples: usize,
    /// Side of the stylization patch in rays.
    pub patch_size: usize,
    /// Pixel spacing inside the stylization patch.
    pub stride: usize,
    /// Style images are cropped and resized to this side.
    pub style_size: usize,
    pub weights: LossWeights,
    pub content_layers: Vec<LayerKey>,
    pub style_layers: Vec<LayerKey>,
    /// Emit a checkpoint every this many steps; 0 emits only the final one.
    pub checkpoint_every: u64,
    /// Only `cpu` is implemented.
    pub device: String,
    /// Surface-reconstruction terms for signed-distance pretraining.
    pub sdf: SdfTerms,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_steps: 5000,
            stylize_steps: 2000,
            lr: 5e-4,
            lr_decay: 0.1,
            geometry_lr_multiplier: 1e-11,
            batch: 1024,
            samples: 64,
            patch_size: 64,
            stride: 4,
            style_size: 256,
            weights: LossWeights::default(),
            content_layers: default_content_keys(),
            style_layers: default_style_keys(),
            checkpoint_every: 0,
            device: "cpu".into(),
            sdf: SdfTerms::default(),
        }
    }
}

/// Extra objectives that shape the signed-distance network while pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdfTerms {
    /// Silhouette loss on rays outside the traced, masked surface.
    pub mask_weight: f64,
    /// Sharpness of the silhouette sigmoid.
    pub mask_sharpness: f64,
    /// Unit-gradient penalty.
    pub eikonal_weight: f64,
    /// Half side of the cube eikonal points are drawn from.
    pub bound: f64,
}

impl Default for SdfTerms {
    fn default() -> Self {
        Self {
            mask_weight: 100.0,
            mask_sharpness: 50.0,
            eikonal_weight: 0.1,
            bound: 1.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(InsError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be finite and > 0, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return err(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            ));
        }
        if !(self.geometry_lr_multiplier >= 0.0 && self.geometry_lr_multiplier.is_finite()) {
            return err(format!(
                "geometry_lr_multiplier must be finite and >= 0, got {}",
                self.geometry_lr_multiplier
            ));
        }
        for (name, v) in [
            ("batch", self.batch),
            ("samples", self.samples),
            ("stride", self.stride),
            ("style_size", self.style_size),
        ] {
            if v == 0 {
                return err(format!("{name} must be >= 1"));
            }
        }
        if self.patch_size < MIN_INPUT_SIDE {
            return err(format!(
                "patch_size must be >= {MIN_INPUT_SIDE}, got {}",
                self.patch_size
            ));
        }
        if self.style_size < MIN_INPUT_SIDE {
            return err(format!(
                "style_size must be >= {MIN_INPUT_SIDE}, got {}",
                self.style_size
            ));
        }
        if self.content_layers.is_empty() || self.style_layers.is_empty() {
            return err("content_layers and style_layers must not be empty".into());
        }
        if self.device != "cpu" {
            return err(format!(
                "device `{}` is not available; use `cpu`",
                self.device
            ));
        }
        let s = &self.sdf;
        for (name, v) in [
            ("sdf.mask_weight", s.mask_weight),
            ("sdf.eikonal_weight", s.eikonal_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(s.mask_sharpness > 0.0 && s.bound > 0.0) {
            return err("sdf.mask_sharpness and sdf.bound must be > 0".into());
        }
        self.weights.validate()
    }

    fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Stylization picks up at the rate pretraining ended on.
    fn stylize_lr(&self) -> f64 {
        self.lr * self.lr_decay
    }

    /// Pretraining rate at `step`.
    fn pretrain_lr(&self, step: u64) -> f64 {
        let span = self.pretrain_steps.max(1) as f64;
        self.lr * self.lr_decay.powf(step as f64 / span)
    }
}

/// An auxiliary objective outside the four stylization terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// What one optimizer step did. `loss.total` equals the weighted sum of the
/// four terms under `weights` plus `weight * value` of every aux term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub loss: LossBreakdown,
    pub weights: LossWeights,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aux: Vec<AuxTerm>,
    /// True when the step had nothing to optimize and left every parameter
    /// untouched.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
}

/// Observer of training progress.
pub trait Monitor {
    fn on_step(&mut self, _record: &StepRecord) {}

    /// Called for periodic checkpoints; the final one is returned instead.
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl Monitor for () {}

/// Collects every record in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<u64>,
}

impl Monitor for Recorder {
    fn on_step(&mut self, record: &StepRecord) {
        self.records.push(record.clone());
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        self.checkpoints.push(checkpoint.step);
        Ok(())
    }
}

pub(crate) fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub(crate) fn check_finite(loss: &LossBreakdown, aux: &[AuxTerm], step: u64) -> Result<()> {
    if let Some(term) = loss.non_finite_term() {
        return Err(InsError::NonFinite {
            term: term.into(),
            step,
        });
    }
    if let Some(a) = aux.iter().find(|a| !a.value.is_finite()) {
        return Err(InsError::NonFinite {
            term: a.name.clone(),
            step,
        });
    }
    Ok(())
}

pub(crate) fn require_kind(cfg: &FieldConfig, kind: FieldKind, what: &str) -> Result<()> {
    if cfg.kind != kind {
        return Err(InsError::Config(format!(
            "{what} needs a {kind:?} field, the configuration describes {:?}",
            cfg.kind
        )));
    }
    Ok(())
}

pub(crate) fn require_styles(cfg: &FieldConfig, styles: &StyleSet) -> Result<()> {
    if styles.len() != cfg.n_styles {
        return Err(InsError::Config(format!(
            "{} style images for a field conditioned on {} styles",
            styles.len(),
            cfg.n_styles
        )));
    }
    Ok(())
}

pub(crate) fn periodic(cfg: &TrainConfig, step: u64) -> bool {
    cfg.checkpoint_every > 0 && (step + 1).is_multiple_of(cfg.checkpoint_every)
}

/// Content references and style Gram targets for the perceptual terms.
pub(crate) struct Perceptual<'e> {
    extractor: &'e FeatureExtractor,
    content_keys: Vec<LayerKey>,
    style_keys: Vec<LayerKey>,
    all_keys: Vec<LayerKey>,
    grams: Vec<FeatureValues>,
}

impl<'e> Perceptual<'e> {
    pub(crate) fn new(
        extractor: &'e FeatureExtractor,
        cfg: &TrainConfig,
        styles: &StyleSet,
    ) -> Result<Self> {
        let mut all_keys: Vec<LayerKey> = cfg
            .content_layers
            .iter()
            .chain(&cfg.style_layers)
            .copied()
            .collect();
        all_keys.sort();
        all_keys.dedup();
        extractor.check_keys(&all_keys)?;
        let grams = styles
            .images
            .iter()
            .map(|s| style_grams(extractor, s, &cfg.style_layers))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            extractor,
            content_keys: cfg.content_layers.clone(),
            style_keys: cfg.style_layers.clone(),
            all_keys,
            grams,
        })
    }

    pub(crate) fn reference(&self, image: &Image) -> Result<FeatureValues> {
        self.extractor.extract_features(image, &self.content_keys)
    }

    /// Content and style losses of a rendered `side×side` patch.
    pub(crate) fn terms<'t>(
        &self,
        patch: Var<'t>,
        side: usize,
        reference: &FeatureValues,
        style: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let f = self
            .extractor
            .features_on_tape(patch, side, side, &self.all_keys)?;
        let pick = |keys: &[LayerKey]| keys.iter().map(|k| (*k, f[k])).collect();
        let content = content_loss_on_tape(&pick(&self.content_keys), reference);
        let style = style_loss_on_tape(&pick(&self.style_keys), &self.grams[style]);
        Ok((content, style))
    }
}

/// Mean of per-style objectives; the breakdown averages term by term.
pub(crate) fn mean_over_styles<'t>(
    tape: &'t Tape,
    parts: Vec<(Var<'t>, LossBreakdown)>,
) -> (Var<'t>, LossBreakdown) {
    let n = parts.len() as f64;
    let mut total = tape.scalar(0.0);
    let mut log = LossBreakdown::default();
    for (v, b) in parts {
        total = total.add(&v);
        log.recon += b.recon / n;
        log.geometry += b.geometry / n;
        log.content += b.content / n;
        log.style += b.style / n;
    }
    let total = total.scale(1.0 / n);
    log.total = total.item();
    (total, log)
}
