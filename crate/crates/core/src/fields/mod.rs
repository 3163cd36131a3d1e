//! Implicit networks: the SIREN image field, the radiance field and the
//! signed-distance surface, each split into a style module (SIM), a content
//! module (CIM) and an amalgamation module (AM).

mod encoding;
mod ins;
mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{InsError, Result};

pub use encoding::{encode, encode_with_jacobian, encoded_width, positional_encoding};
pub use ins::{prefix, ContentFeatures, FieldEval, InsField, SdfEval};
pub use layers::{Activation, Dense};

/// Condition vector selecting (one-hot) or mixing (convex weights) styles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleCode(Vec<f64>);

impl StyleCode {
    pub fn one_hot(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(InsError::Argument(format!(
                "style index {index} out of range for {n} styles"
            )));
        }
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        Ok(Self(w))
    }

    /// All-zero code, used while pretraining the content before any style
    /// exists.
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Convex combination; entries must be non-negative and sum to one.
    pub fn mixture(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(InsError::Argument(
                "style weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(InsError::Argument(format!(
                "style weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(weights))
    }

    /// `lambda * e_i + (1 - lambda) * e_j`.
    pub fn blend(i: usize, j: usize, lambda: f64, n: usize) -> Result<Self> {
        if i >= n || j >= n {
            return Err(InsError::Argument(format!(
                "style indices ({i}, {j}) out of range for {n} styles"
            )));
        }
        let mut w = vec![0.0; n];
        w[i] += lambda;
        w[j] += 1.0 - lambda;
        Self::mixture(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn is_one_hot(&self) -> bool {
        self.0.iter().filter(|w| **w == 1.0).count() == 1
            && self.0.iter().filter(|w| **w == 0.0).count() == self.0.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Siren,
    Nerf,
    Sdf,
}

/// Architecture of an [`InsField`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub kind: FieldKind,
    /// Number of training styles, the length of every [`StyleCode`].
    pub n_styles: usize,
    pub cim_depth: usize,
    pub cim_width: usize,
    pub sim_depth: usize,
    pub sim_width: usize,
    /// Width of the style features SIM hands to AM.
    pub style_width: usize,
    pub am_depth: usize,
    pub am_width: usize,
    /// Frequencies for 3-D positions (radiance and SDF fields).
    pub pos_freqs: usize,
    /// Frequencies for view directions (radiance field).
    pub dir_freqs: usize,
    /// SIREN frequency scale.
    pub omega0: f64,
    /// When false the density comes from CIM alone and AM only emits color.
    pub style_density_enabled: bool,
    /// Appearance embedding width emitted next to the signed distance.
    pub sdf_feature_width: usize,
    /// Sharpness of the softplus used inside the SDF network.
    pub sdf_softplus_beta: f64,
    /// Radius of the sphere the SDF network starts out as.
    pub sdf_init_radius: f64,
}

impl FieldConfig {
    pub fn siren(n_styles: usize) -> Self {
        Self {
            kind: FieldKind::Siren,
            n_styles,
            cim_depth: 5,
            cim_width: 256,
            sim_depth: 2,
            sim_width: 64,
            style_width: 64,
            am_depth: 3,
            am_width: 128,
            pos_freqs: 0,
            dir_freqs: 0,
            omega0: 30.0,
            style_density_enabled: false,
            sdf_feature_width: 0,
            sdf_softplus_beta: 100.0,
            sdf_init_radius: 0.5,
        }
    }

    pub fn nerf(n_styles: usize) -> Self {
        Self {
            kind: FieldKind::Nerf,
            cim_depth: 8,
            pos_freqs: 10,
            dir_freqs: 4,
            style_density_enabled: true,
            ..Self::siren(n_styles)
        }
    }

    pub fn sdf(n_styles: usize) -> Self {
        Self {
            kind: FieldKind::Sdf,
            pos_freqs: 6,
            sdf_feature_width: 64,
            ..Self::siren(n_styles)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_styles", self.n_styles),
            ("cim_depth", self.cim_depth),
            ("cim_width", self.cim_width),
            ("sim_depth", self.sim_depth),
            ("sim_width", self.sim_width),
            ("style_width", self.style_width),
            ("am_depth", self.am_depth),
            ("am_width", self.am_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(InsError::Config(format!("field.{name} must be >= 1")));
            }
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(InsError::Config("field.omega0 must be > 0".into()));
        }
        if self.kind == FieldKind::Sdf {
            if !(self.sdf_softplus_beta > 0.0) {
                return Err(InsError::Config(
                    "field.sdf_softplus_beta must be > 0".into(),
                ));
            }
            if !(self.sdf_init_radius > 0.0) {
                return Err(InsError::Config("field.sdf_init_radius must be > 0".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn check_code(&self, code: &StyleCode) -> Result<()> {
        if code.len() != self.n_styles {
            return Err(InsError::Config(format!(
                "style code has {} entries but the field was built for {} styles",
                code.len(),
                self.n_styles
            )));
        }
        Ok(())
    }
}

/// Value-only output of one field query.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutput {
    pub color: [f64; 3],
    /// Activated density (radiance field).
    pub density: Option<f64>,
    /// Signed distance (SDF).
    pub distance: Option<f64>,
}

/// Inputs of the SDF rendering head at a surface point.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfSurfacePoint {
    pub position: [f64; 3],
    pub normal: [f64; 3],
    pub embedding: Vec<f64>,
    pub view_dir: [f64; 3],
}

impl SdfSurfacePoint {
    pub fn validate(&self) -> Result<()> {
        let n = self.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-5 {
            return Err(InsError::Argument(format!(
                "surface normal has norm {n}, expected 1"
            )));
        }
        let finite = self
            .position
            .iter()
            .chain(&self.normal)
            .chain(&self.view_dir)
            .chain(&self.embedding)
            .all(|v| v.is_finite());
        if !finite {
            return Err(InsError::Argument("non-finite surface point".into()));
        }
        Ok(())
    }
}
