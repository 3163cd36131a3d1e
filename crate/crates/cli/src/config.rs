//! Run configuration: a TOML file, then command-line flags on top.

use std::fs;
use std::path::{Path, PathBuf};

use ins_core::fields::{FieldConfig, FieldKind};
use ins_core::losses::BackboneKind;
use ins_core::pipelines::TrainConfig;
use ins_core::rendering::RenderOptions;
use serde::{Deserialize, Serialize};

use crate::Command;

/// Everything one invocation needs. Relative paths resolve against the
/// working directory; the snapshot written to the run directory stores them
/// absolute.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub backbone: Option<BackboneKind>,
    /// Channel divisor of the surrogate backbone.
    pub surrogate_divisor: Option<usize>,
    pub deterministic: bool,
    pub data: DataSection,
    pub field: FieldSection,
    pub train: TrainConfig,
    pub render: RenderSection,
    pub interpolate: InterpolateSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Blender-layout scene directory (radiance and surface commands).
    pub scene: Option<PathBuf>,
    /// Read `mask/` images next to the views.
    pub masked: Option<bool>,
    /// In-memory sphere scene used when `scene` is unset.
    pub synthetic: Option<SyntheticScene>,
    /// Target image of `fit-siren`; the built-in test pattern when unset.
    pub image: Option<PathBuf>,
    /// Side the SIREN target is cropped and resized to.
    pub size: Option<usize>,
    /// Style images; their order fixes the style codes.
    pub styles: Vec<PathBuf>,
    /// Number of built-in procedural styles used when `styles` is empty.
    pub synthetic_styles: Option<usize>,
    /// Input checkpoint of stylize, render, interpolate and eval.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticScene {
    pub views: usize,
    pub size: usize,
}

impl Default for SyntheticScene {
    fn default() -> Self {
        Self { views: 8, size: 64 }
    }
}

/// Architecture overrides on top of the preset for the command's field kind.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSection {
    pub n_styles: Option<usize>,
    pub cim_depth: Option<usize>,
    pub cim_width: Option<usize>,
    pub sim_depth: Option<usize>,
    pub sim_width: Option<usize>,
    pub style_width: Option<usize>,
    pub am_depth: Option<usize>,
    pub am_width: Option<usize>,
    pub pos_freqs: Option<usize>,
    pub dir_freqs: Option<usize>,
    pub omega0: Option<f64>,
    pub style_density_enabled: Option<bool>,
    pub sdf_feature_width: Option<usize>,
    pub sdf_softplus_beta: Option<f64>,
    pub sdf_init_radius: Option<f64>,
}

macro_rules! overrides {
    ($sec:expr, $cfg:expr, $($f:ident),*) => {
        $(if let Some(v) = $sec.$f { $cfg.$f = v; })*
    };
}

impl FieldSection {
    pub fn resolve(&self, kind: FieldKind, n_styles: usize) -> FieldConfig {
        let mut c = match kind {
            FieldKind::Siren => FieldConfig::siren(n_styles),
            FieldKind::Nerf => FieldConfig::nerf(n_styles),
            FieldKind::Sdf => FieldConfig::sdf(n_styles),
        };
        overrides!(
            self,
            c,
            n_styles,
            cim_depth,
            cim_width,
            sim_depth,
            sim_width,
            style_width,
            am_depth,
            am_width,
            pos_freqs,
            dir_freqs,
            omega0,
            style_density_enabled,
            sdf_feature_width,
            sdf_softplus_beta,
            sdf_init_radius
        );
        c
    }

    pub fn from_config(c: &FieldConfig) -> Self {
        Self {
            n_styles: Some(c.n_styles),
            cim_depth: Some(c.cim_depth),
            cim_width: Some(c.cim_width),
            sim_depth: Some(c.sim_depth),
            sim_width: Some(c.sim_width),
            style_width: Some(c.style_width),
            am_depth: Some(c.am_depth),
            am_width: Some(c.am_width),
            pos_freqs: Some(c.pos_freqs),
            dir_freqs: Some(c.dir_freqs),
            omega0: Some(c.omega0),
            style_density_enabled: Some(c.style_density_enabled),
            sdf_feature_width: Some(c.sdf_feature_width),
            sdf_softplus_beta: Some(c.sdf_softplus_beta),
            sdf_init_radius: Some(c.sdf_init_radius),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    pub samples: usize,
    pub background: [f64; 3],
    /// Rays per tape.
    pub chunk: usize,
    /// Scene views to render; all of them when empty.
    pub views: Vec<usize>,
    /// One-hot style to render with.
    pub style: Option<usize>,
    /// Explicit code weights, overriding `style`.
    pub code: Option<Vec<f64>>,
    /// Lattice of image fields; defaults to `data.size`.
    pub height: Option<usize>,
    pub width: Option<usize>,
}

impl Default for RenderSection {
    fn default() -> Self {
        let d = RenderOptions::default();
        Self {
            samples: d.samples,
            background: d.background,
            chunk: d.chunk,
            views: vec![],
            style: None,
            code: None,
            height: None,
            width: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolateSection {
    /// Style shown by the first frame.
    pub from: usize,
    /// Style shown by the last frame.
    pub to: usize,
    pub steps: usize,
    /// Scene view the sweep is rendered from.
    pub view: usize,
}

impl Default for InterpolateSection {
    fn default() -> Self {
        Self {
            from: 0,
            to: 1,
            steps: 11,
            view: 0,
        }
    }
}

/// A configuration problem, reported with the offending field path.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::new("", one_line(&e)))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(
            if path == "." { String::new() } else { path },
            one_line(e.inner()),
        )
    })
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

/// Locates a core validation message under `section`, using the field name
/// the message starts with.
pub fn within(section: &str, e: ins_core::InsError) -> ConfigError {
    let message = match e {
        ins_core::InsError::Config(m) => m,
        other => other.to_string(),
    };
    let head = message.split_whitespace().next().unwrap_or("");
    let is_field = !section.is_empty()
        && !head.is_empty()
        && head
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || "_.".contains(c));
    let path = if is_field {
        format!("{section}.{head}")
    } else {
        section.to_string()
    };
    ConfigError::new(path, message)
}

fn one_line(e: &dyn std::fmt::Display) -> String {
    e.to_string()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub styles: Vec<PathBuf>,
    pub steps: Option<u64>,
    pub backbone: Option<BackboneKind>,
    pub deterministic: bool,
}

impl RunConfig {
    /// Applies flags. `--steps` sets the step count of the phase the command
    /// runs: phase 1 for `fit-siren`, pretraining for `train-*`, stylization
    /// for `stylize-*` and the frame count for `interpolate`.
    pub fn apply(&mut self, cmd: Command, o: Overrides) {
        if o.out.is_some() {
            self.out = o.out;
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if !o.styles.is_empty() {
            self.data.styles = o.styles;
        }
        if let Some(n) = o.steps {
            match cmd {
                Command::FitSiren | Command::TrainNerf | Command::TrainSdf => {
                    self.train.pretrain_steps = n
                }
                Command::StylizeNerf | Command::StylizeSdf => self.train.stylize_steps = n,
                Command::Interpolate => self.interpolate.steps = n as usize,
                Command::Render | Command::Eval => {}
            }
        }
        if o.backbone.is_some() {
            self.backbone = o.backbone;
        }
        self.deterministic |= o.deterministic;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.out.is_none() {
            return Err(ConfigError::new(
                "out",
                "no output directory (set `out` or pass --out)",
            ));
        }
        self.train.validate().map_err(|e| within("train", e))?;
        if self.render.samples == 0 || self.render.chunk == 0 {
            return Err(ConfigError::new("render", "samples and chunk must be > 0"));
        }
        if self.surrogate_divisor == Some(0) {
            return Err(ConfigError::new("surrogate_divisor", "must be > 0"));
        }
        if self.data.size == Some(0) {
            return Err(ConfigError::new("data.size", "must be > 0"));
        }
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            samples: self.render.samples,
            background: self.render.background,
            chunk: self.render.chunk,
            parallel: !self.deterministic,
        }
    }

    /// Copy with every path made absolute, suitable for rerunning elsewhere.
    pub fn snapshot(&self, field: Option<&FieldConfig>) -> RunConfig {
        let abs = |p: &PathBuf| std::path::absolute(p).unwrap_or_else(|_| p.clone());
        let mut s = self.clone();
        s.out = s.out.as_ref().map(abs);
        s.data.scene = s.data.scene.as_ref().map(abs);
        s.data.image = s.data.image.as_ref().map(abs);
        s.data.checkpoint = s.data.checkpoint.as_ref().map(abs);
        s.data.styles = s.data.styles.iter().map(abs).collect();
        if let Some(f) = field {
            s.field = FieldSection::from_config(f);
        }
        s
    }
}
