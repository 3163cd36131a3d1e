//! Perceptual features and training objectives.

mod backbone;

use std::collections::BTreeMap;

use ins_autograd::{Tape, Tensor, Var};
use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};

use crate::dataio::Image;
use crate::error::{InsError, Result};

pub use backbone::{
    default_content_keys, default_style_keys, BackboneKind, FeatureExtractor, LayerKey,
    IMAGENET_MEAN, IMAGENET_STD, MIN_INPUT_SIDE, SURROGATE_SEED, VGG16_FILE,
};

pub type Features<'t> = BTreeMap<LayerKey, Var<'t>>;
pub type FeatureValues = BTreeMap<LayerKey, Tensor>;

/// `F Fᵀ / (C H W)` for a `C×H×W` block.
pub fn gram(features: &Tensor) -> Result<Array2<f64>> {
    if features.ndim() != 3 {
        return Err(InsError::Argument(format!(
            "gram expects C×H×W features, got {:?}",
            features.shape()
        )));
    }
    let (c, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let f = features
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous");
    Ok(f.dot(&f.t()) / (c * h * w) as f64)
}

pub fn gram_on_tape<'t>(features: Var<'t>) -> Var<'t> {
    let s = features.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let f = features.reshape(&[c, hw]);
    f.matmul(&f.t()).scale(1.0 / (c * hw) as f64)
}

/// `Σ_keys ‖ΔF‖² / (C H W)`.
pub fn content_loss_on_tape<'t>(rendered: &Features<'t>, reference: &FeatureValues) -> Var<'t> {
    let mut acc: Option<Var<'t>> = None;
    for (key, fy) in rendered {
        let fc = &reference[key];
        let d = fy.sub(&fy.tape().constant(fc.clone()));
        let term = d.square().sum().scale(1.0 / fc.len() as f64);
        acc = Some(acc.map_or(term, |a| a.add(&term)));
    }
    acc.expect("at least one content layer")
}

/// `Σ_keys ‖G(S) − G(Y)‖²_F`; `target` holds the style Gram matrices.
pub fn style_loss_on_tape<'t>(rendered: &Features<'t>, target: &FeatureValues) -> Var<'t> {
    let mut acc: Option<Var<'t>> = None;
    for (key, fy) in rendered {
        let g = gram_on_tape(*fy);
        let d = g.sub(&fy.tape().constant(target[key].clone()));
        let term = d.square().sum();
        acc = Some(acc.map_or(term, |a| a.add(&term)));
    }
    acc.expect("at least one style layer")
}

/// Gram matrices of a style image at `keys`.
pub fn style_grams(
    extractor: &FeatureExtractor,
    style: &Image,
    keys: &[LayerKey],
) -> Result<FeatureValues> {
    // Same arithmetic as the rendered side, so identical images cancel exactly.
    let tape = Tape::new();
    let f = extractor.features_on_tape(
        tape.constant(style.to_tensor()),
        style.height,
        style.width,
        keys,
    )?;
    Ok(f.into_iter()
        .map(|(k, v)| (k, (*gram_on_tape(v).value()).clone()))
        .collect())
}

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(InsError::Argument(format!(
            "image sizes differ: {}×{} vs {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Value-level content loss between two equally sized images.
pub fn content_loss(
    extractor: &FeatureExtractor,
    rendered: &Image,
    reference: &Image,
    keys: &[LayerKey],
) -> Result<f64> {
    same_size(rendered, reference)?;
    let fc = extractor.extract_features(reference, keys)?;
    let tape = Tape::new();
    let fy = extractor.features_on_tape(
        tape.constant(rendered.to_tensor()),
        rendered.height,
        rendered.width,
        keys,
    )?;
    Ok(content_loss_on_tape(&fy, &fc).item())
}

/// Value-level style loss; the images may differ in size.
pub fn style_loss(
    extractor: &FeatureExtractor,
    rendered: &Image,
    style: &Image,
    keys: &[LayerKey],
) -> Result<f64> {
    let target = style_grams(extractor, style, keys)?;
    let tape = Tape::new();
    let fy = extractor.features_on_tape(
        tape.constant(rendered.to_tensor()),
        rendered.height,
        rendered.width,
        keys,
    )?;
    Ok(style_loss_on_tape(&fy, &target).item())
}

/// Mean squared error over pixels and channels.
pub fn recon_loss(rendered: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<f64> {
    if rendered.len() != reference.len() || rendered.is_empty() {
        return Err(InsError::Argument(format!(
            "recon_loss got {} rendered and {} reference pixels",
            rendered.len(),
            reference.len()
        )));
    }
    let sum: f64 = rendered
        .iter()
        .zip(reference)
        .flat_map(|(a, b)| (0..3).map(move |i| (a[i] - b[i]).powi(2)))
        .sum();
    Ok(sum / (3 * rendered.len()) as f64)
}

pub fn recon_loss_on_tape<'t>(rendered: Var<'t>, reference: &Tensor) -> Result<Var<'t>> {
    if rendered.shape() != reference.shape() {
        return Err(InsError::Argument(format!(
            "recon_loss shapes differ: {:?} vs {:?}",
            rendered.shape(),
            reference.shape()
        )));
    }
    Ok(rendered
        .sub(&rendered.tape().constant(reference.clone()))
        .square()
        .mean())
}

/// Mean absolute density difference.
pub fn geometry_loss(stylized: &[f64], frozen: &[f64]) -> Result<f64> {
    if stylized.len() != frozen.len() || stylized.is_empty() {
        return Err(InsError::Argument(format!(
            "geometry_loss got {} and {} densities",
            stylized.len(),
            frozen.len()
        )));
    }
    let sum: f64 = stylized
        .iter()
        .zip(frozen)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / stylized.len() as f64)
}

/// Gradient flows into `stylized` only.
pub fn geometry_loss_on_tape<'t>(stylized: Var<'t>, frozen: &Tensor) -> Result<Var<'t>> {
    if stylized.shape() != frozen.shape() {
        return Err(InsError::Argument(format!(
            "geometry_loss shapes differ: {:?} vs {:?}",
            stylized.shape(),
            frozen.shape()
        )));
    }
    Ok(stylized
        .sub(&stylized.tape().constant(frozen.clone()))
        .abs()
        .mean())
}

/// Term weights of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon: f64,
    pub geometry: f64,
    pub content: f64,
    pub style: f64,
    /// Steps before this one train reconstruction only.
    pub phase_boundary: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            geometry: 1e6,
            content: 1.0,
            style: 1e8,
            phase_boundary: 0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("recon", self.recon),
            ("geometry", self.geometry),
            ("content", self.content),
            ("style", self.style),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(InsError::Config(format!(
                    "weights.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Weights in effect at `step`.
    pub fn at(&self, step: u64) -> LossWeights {
        if step < self.phase_boundary {
            LossWeights {
                geometry: 0.0,
                content: 0.0,
                style: 0.0,
                ..*self
            }
        } else {
            *self
        }
    }
}

/// Raw loss terms; absent terms count as zero.
#[derive(Default)]
pub struct LossTerms<'t> {
    pub recon: Option<Var<'t>>,
    pub geometry: Option<Var<'t>>,
    pub content: Option<Var<'t>>,
    pub style: Option<Var<'t>>,
}

/// Raw term values and the weighted total, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub geometry: f64,
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// First non-finite term, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("geometry", self.geometry),
            ("content", self.content),
            ("style", self.style),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Weighted sum of the terms under the weights in effect at `step`.
pub fn total_loss<'t>(
    tape: &'t Tape,
    terms: &LossTerms<'t>,
    weights: &LossWeights,
    step: u64,
) -> (Var<'t>, LossBreakdown) {
    let w = weights.at(step);
    let mut total = tape.scalar(0.0);
    let mut log = LossBreakdown::default();
    for (term, lambda, slot) in [
        (terms.recon, w.recon, &mut log.recon),
        (terms.geometry, w.geometry, &mut log.geometry),
        (terms.content, w.content, &mut log.content),
        (terms.style, w.style, &mut log.style),
    ] {
        if let Some(t) = term {
            *slot = t.item();
            if lambda != 0.0 {
                total = total.add(&t.scale(lambda));
            }
        }
    }
    log.total = total.item();
    (total, log)
}

/// `N×3` tensor rows as pixel triples.
pub fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    let t = t.view().into_dimensionality::<Ix2>().expect("N×3");
    t.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}
