use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ins_core::checkpoint::{Checkpoint, Phase};
use ins_core::dataio::synthetic::{content_image, render_sphere, style_image, SphereSceneSpec};
use ins_core::dataio::{
    load_blender_scene, load_masked_scene, load_styles, read_rgba_over, square_crop, write_frames,
    Frame, Image, PosedImageSet, StyleSet,
};
use ins_core::fields::{FieldConfig, FieldKind, StyleCode};
use ins_core::losses::{BackboneKind, FeatureExtractor};
use ins_core::pipelines::{
    evaluate, fit_siren, interpolate_styles, pretrain_nerf, pretrain_sdf, render_view,
    stylize_nerf, stylize_sdf, Monitor, PerceptualEval, StepRecord, Target,
};
use ins_core::{InsError, Result};
use serde_json::json;

use crate::config::{within, ConfigError, RunConfig};
use crate::{Command, Failure};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const STEP_LOG: &str = "log.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const WEIGHTS_ENV: &str = "INS_WEIGHTS_DIR";
const DEFAULT_SURROGATE_DIVISOR: usize = 8;
const DEFAULT_IMAGE_SIZE: usize = 64;

/// Writes every step as a JSON line and every periodic checkpoint to
/// `checkpoints/step_NNNNNN.bin`.
struct RunLog {
    dir: PathBuf,
    steps: BufWriter<File>,
    error: Option<InsError>,
}

impl RunLog {
    fn create(dir: &Path) -> Result<Self> {
        let path = dir.join(STEP_LOG);
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            steps: BufWriter::new(file),
            error: None,
        })
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        let path = self.dir.join(STEP_LOG);
        self.steps.flush().map_err(|e| io_err(&path, e))
    }
}

impl Monitor for RunLog {
    fn on_step(&mut self, record: &StepRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("records serialize");
        if let Err(e) = writeln!(self.steps, "{line}") {
            self.error = Some(io_err(&self.dir.join(STEP_LOG), e));
        }
        if record.step.is_multiple_of(100) {
            log::info!(
                "{} step {}: loss {:.6e}",
                record.phase,
                record.step,
                record.loss.total
            );
        }
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        let dir = self.dir.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        checkpoint.save(&dir.join(format!("step_{:06}.bin", checkpoint.step)))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> InsError {
    InsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn dispatch(cmd: Command, cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let out = cfg.out.clone().expect("validated");
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let summary = match cmd {
        Command::FitSiren => fit(cfg, &out)?,
        Command::TrainNerf | Command::TrainSdf => train(cmd, cfg, &out)?,
        Command::StylizeNerf | Command::StylizeSdf => stylize(cmd, cfg, &out)?,
        Command::Render => render(cfg, &out)?,
        Command::Interpolate => interpolate(cfg, &out)?,
        Command::Eval => eval(cfg, &out)?,
    };
    println!("{summary}");
    Ok(())
}

fn write_snapshot(cfg: &RunConfig, field: Option<&FieldConfig>, out: &Path) -> Result<()> {
    let text = toml::to_string_pretty(&cfg.snapshot(field)).expect("config serializes");
    let path = out.join(CONFIG_SNAPSHOT);
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn extractor(cfg: &RunConfig) -> Result<FeatureExtractor> {
    let dir = std::env::var_os(WEIGHTS_ENV).map(PathBuf::from);
    FeatureExtractor::load(
        cfg.backbone.unwrap_or(BackboneKind::Vgg16),
        dir.as_deref(),
        cfg.surrogate_divisor.unwrap_or(DEFAULT_SURROGATE_DIVISOR),
    )
}

/// Styles from files, else the built-in procedural ones, else none.
fn styles(cfg: &RunConfig, expected: Option<usize>) -> Result<StyleSet> {
    let size = cfg.train.style_size;
    if !cfg.data.styles.is_empty() {
        let n = expected.unwrap_or(cfg.data.styles.len());
        return load_styles(&cfg.data.styles, n, size);
    }
    let n = cfg.data.synthetic_styles.unwrap_or(0);
    if let Some(want) = expected.filter(|w| *w != n) {
        return Err(InsError::Config(format!(
            "the field has {want} styles but {n} were given"
        )));
    }
    Ok(StyleSet::from_images(
        (0..n).map(|i| style_image(i, size)).collect(),
        (0..n).map(|i| format!("builtin_{i}")).collect(),
    ))
}

fn scene(cfg: &RunConfig, masked_default: bool) -> std::result::Result<PosedImageSet, Failure> {
    let masked = cfg.data.masked.unwrap_or(masked_default);
    if let Some(dir) = &cfg.data.scene {
        return Ok(if masked {
            load_masked_scene(dir)?
        } else {
            load_blender_scene(dir)?
        });
    }
    let Some(syn) = cfg.data.synthetic else {
        return Err(ConfigError::new("data.scene", "no scene (set `scene` or `synthetic`)").into());
    };
    let spec = SphereSceneSpec {
        views: syn.views,
        size: syn.size,
        ..SphereSceneSpec::default()
    };
    let bg = if masked { [0.0; 3] } else { [1.0; 3] };
    let (mut images, mut masks) = (vec![], vec![]);
    for cam in spec.cameras() {
        let (img, hit) = render_sphere(&cam, spec.radius, bg);
        images.push(img);
        masks.push(hit);
    }
    Ok(PosedImageSet {
        images,
        cameras: spec.cameras(),
        masks: masked.then_some(masks),
        near: spec.near,
        far: spec.far,
        names: (0..spec.views).map(|i| format!("r_{i}")).collect(),
    })
}

fn siren_target(cfg: &RunConfig) -> Result<Image> {
    let size = cfg.data.size.unwrap_or(DEFAULT_IMAGE_SIZE);
    match &cfg.data.image {
        Some(p) => Ok(square_crop(&read_rgba_over(p, [1.0; 3])?, size)),
        None => Ok(content_image(size)),
    }
}

fn input_checkpoint(cfg: &RunConfig) -> std::result::Result<Checkpoint, Failure> {
    match &cfg.data.checkpoint {
        Some(p) => Ok(Checkpoint::load(p)?),
        None => Err(
            ConfigError::new("data.checkpoint", "this command needs an input checkpoint").into(),
        ),
    }
}

fn n_styles(cfg: &RunConfig, styles: &StyleSet) -> std::result::Result<usize, Failure> {
    match cfg.field.n_styles.unwrap_or(styles.len()) {
        0 => Err(ConfigError::new(
            "field.n_styles",
            "unknown style count (give styles or set n_styles)",
        )
        .into()),
        n => Ok(n),
    }
}

/// The default code: all zeros before stylization, else the first style.
fn code(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<StyleCode> {
    let n = ckpt.field.config().n_styles;
    match (&cfg.render.code, cfg.render.style, ckpt.phase) {
        (Some(w), _, _) => StyleCode::mixture(w.clone()),
        (None, Some(i), _) => StyleCode::one_hot(i, n),
        (None, None, Phase::Pretrain) => Ok(StyleCode::zeros(n)),
        (None, None, Phase::Stylize) => StyleCode::one_hot(0, n),
    }
}

fn image_target(cfg: &RunConfig) -> Target {
    let size = cfg.data.size.unwrap_or(DEFAULT_IMAGE_SIZE);
    Target::Image {
        height: cfg.render.height.unwrap_or(size),
        width: cfg.render.width.unwrap_or(size),
    }
}

/// Targets, reference images, view names and the far bound.
type Targets = (Vec<Target>, Vec<Image>, Vec<String>, f64);

/// Render targets with reference images and names, in view order.
fn targets(cfg: &RunConfig, kind: FieldKind) -> std::result::Result<Targets, Failure> {
    if kind == FieldKind::Siren {
        let t = image_target(cfg);
        let reference = siren_target(cfg)?;
        return Ok((vec![t], vec![reference], vec!["image".into()], 1.0));
    }
    let s = scene(cfg, kind == FieldKind::Sdf)?;
    let views: Vec<usize> = if cfg.render.views.is_empty() {
        (0..s.len()).collect()
    } else {
        cfg.render.views.clone()
    };
    if let Some(v) = views.iter().find(|v| **v >= s.len()) {
        return Err(ConfigError::new(
            "render.views",
            format!("view {v} out of range for {} views", s.len()),
        )
        .into());
    }
    Ok((
        views
            .iter()
            .map(|&v| Target::Camera(s.cameras[v].clone()))
            .collect(),
        views.iter().map(|&v| s.images[v].clone()).collect(),
        views.iter().map(|&v| s.names[v].clone()).collect(),
        s.far,
    ))
}

/// Saves the first target under the zero code and under every style.
fn previews(cfg: &RunConfig, ckpt: &Checkpoint, target: &Target, out: &Path) -> Result<()> {
    let dir = out.join("preview");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let opts = cfg.render_options();
    let n = ckpt.field.config().n_styles;
    let mut codes = vec![("content".to_string(), StyleCode::zeros(n))];
    if ckpt.phase == Phase::Stylize {
        for i in 0..n {
            codes.push((format!("style_{i}"), StyleCode::one_hot(i, n)?));
        }
    }
    for (name, code) in codes {
        render_view(&ckpt.field, target, &code, &opts)?
            .color
            .save_png(&dir.join(format!("{name}.png")))?;
    }
    Ok(())
}

fn finish(ckpt: &Checkpoint, log: RunLog, out: &Path) -> Result<serde_json::Value> {
    log.finish()?;
    let path = out.join(CHECKPOINT);
    ckpt.save(&path)?;
    Ok(json!({ "checkpoint": path, "step": ckpt.step, "phase": ckpt.phase }))
}

fn fit(cfg: &RunConfig, out: &Path) -> std::result::Result<serde_json::Value, Failure> {
    let image = siren_target(cfg)?;
    let styles = styles(cfg, None)?;
    let field_cfg = cfg.field.resolve(FieldKind::Siren, n_styles(cfg, &styles)?);
    field_cfg.validate().map_err(|e| within("field", e))?;
    write_snapshot(cfg, Some(&field_cfg), out)?;
    let ext = if cfg.train.stylize_steps > 0 {
        Some(extractor(cfg)?)
    } else {
        None
    };
    let mut log = RunLog::create(out)?;
    let ckpt = fit_siren(
        &image,
        &styles,
        &field_cfg,
        &cfg.train,
        ext.as_ref(),
        &mut log,
    )?;
    let target = Target::Image {
        height: image.height,
        width: image.width,
    };
    previews(cfg, &ckpt, &target, out)?;
    Ok(finish(&ckpt, log, out)?)
}

fn train(
    cmd: Command,
    cfg: &RunConfig,
    out: &Path,
) -> std::result::Result<serde_json::Value, Failure> {
    let kind = if cmd == Command::TrainNerf {
        FieldKind::Nerf
    } else {
        FieldKind::Sdf
    };
    let scene = scene(cfg, kind == FieldKind::Sdf)?;
    let resume = cfg
        .data
        .checkpoint
        .as_deref()
        .map(Checkpoint::load)
        .transpose()?;
    let field_cfg = match &resume {
        Some(c) => c.field.config().clone(),
        None => cfg.field.resolve(kind, n_styles(cfg, &styles(cfg, None)?)?),
    };
    field_cfg.validate().map_err(|e| within("field", e))?;
    write_snapshot(cfg, Some(&field_cfg), out)?;
    let mut log = RunLog::create(out)?;
    let ckpt = match kind {
        FieldKind::Nerf => pretrain_nerf(&scene, &field_cfg, &cfg.train, resume, &mut log)?,
        _ => pretrain_sdf(&scene, &field_cfg, &cfg.train, resume, &mut log)?,
    };
    previews(cfg, &ckpt, &Target::Camera(scene.cameras[0].clone()), out)?;
    Ok(finish(&ckpt, log, out)?)
}

fn stylize(
    cmd: Command,
    cfg: &RunConfig,
    out: &Path,
) -> std::result::Result<serde_json::Value, Failure> {
    let pre = input_checkpoint(cfg)?;
    let sdf = cmd == Command::StylizeSdf;
    let scene = scene(cfg, sdf)?;
    let styles = styles(cfg, Some(pre.field.config().n_styles))?;
    write_snapshot(cfg, Some(pre.field.config()), out)?;
    let ext = extractor(cfg)?;
    let mut log = RunLog::create(out)?;
    let ckpt = if sdf {
        stylize_sdf(&pre, &scene, &styles, &cfg.train, &ext, &mut log)?
    } else {
        stylize_nerf(&pre, &scene, &styles, &cfg.train, &ext, &mut log)?
    };
    previews(cfg, &ckpt, &Target::Camera(scene.cameras[0].clone()), out)?;
    Ok(finish(&ckpt, log, out)?)
}

fn save_frames(frames: &[Frame], out: &Path, depth_scale: f64) -> Result<PathBuf> {
    let dir = out.join("frames");
    write_frames(frames, &dir, depth_scale)?;
    Ok(dir)
}

fn render(cfg: &RunConfig, out: &Path) -> std::result::Result<serde_json::Value, Failure> {
    let ckpt = input_checkpoint(cfg)?;
    write_snapshot(cfg, None, out)?;
    let code = code(cfg, &ckpt)?;
    let (targets, _, _, far) = targets(cfg, ckpt.field.kind())?;
    let opts = cfg.render_options();
    let frames = targets
        .iter()
        .map(|t| render_view(&ckpt.field, t, &code, &opts))
        .collect::<Result<Vec<_>>>()?;
    let dir = save_frames(&frames, out, far)?;
    Ok(json!({ "frames": dir, "count": frames.len() }))
}

fn interpolate(cfg: &RunConfig, out: &Path) -> std::result::Result<serde_json::Value, Failure> {
    let ckpt = input_checkpoint(cfg)?;
    write_snapshot(cfg, None, out)?;
    let iv = &cfg.interpolate;
    let (target, far) = if ckpt.field.kind() == FieldKind::Siren {
        (image_target(cfg), 1.0)
    } else {
        let s = scene(cfg, ckpt.field.kind() == FieldKind::Sdf)?;
        let cam = s.cameras.get(iv.view).cloned().ok_or_else(|| {
            ConfigError::new("interpolate.view", format!("view {} out of range", iv.view))
        })?;
        (Target::Camera(cam), s.far)
    };
    let frames = interpolate_styles(
        &ckpt,
        &target,
        iv.from,
        iv.to,
        iv.steps,
        &cfg.render_options(),
    )?;
    let dir = save_frames(&frames, out, far)?;
    Ok(json!({ "frames": dir, "count": frames.len() }))
}

fn eval(cfg: &RunConfig, out: &Path) -> std::result::Result<serde_json::Value, Failure> {
    let ckpt = input_checkpoint(cfg)?;
    write_snapshot(cfg, None, out)?;
    let code = code(cfg, &ckpt)?;
    let (targets, references, names, far) = targets(cfg, ckpt.field.kind())?;
    let styles = styles(cfg, None)?;
    let ext = if styles.is_empty() {
        None
    } else {
        Some(extractor(cfg)?)
    };
    let perceptual = ext.as_ref().map(|e| PerceptualEval {
        extractor: e,
        styles: &styles.images,
        content_layers: &cfg.train.content_layers,
        style_layers: &cfg.train.style_layers,
    });
    let (report, frames) = evaluate(
        &ckpt,
        &targets,
        &references,
        &names,
        &code,
        &cfg.render_options(),
        perceptual.as_ref(),
    )?;
    save_frames(&frames, out, far)?;
    let path = out.join("eval.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(json!({ "report": path, "mean_psnr": report.mean_psnr }))
}
