use ins_autograd::{Binding, Tape, Tensor, Trainable};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use super::sdf::{shading, trace_surface};
use crate::checkpoint::Checkpoint;
use crate::dataio::{psnr, Frame, Image};
use crate::error::{InsError, Result};
use crate::fields::{FieldKind, InsField, StyleCode};
use crate::losses::{content_loss, style_loss, FeatureExtractor, LayerKey};
use crate::rendering::{render_rays, RenderOptions};
use crate::sampling::{all_pixels, camera_rays, pixel_grid, Camera};

/// What to render: a camera view of a 3-D field or the lattice of a 2-D one.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Camera(Camera),
    Image { height: usize, width: usize },
}

/// The image field on an `height×width` lattice.
pub fn render_image(
    field: &InsField,
    height: usize,
    width: usize,
    code: &StyleCode,
) -> Result<Image> {
    if field.kind() != FieldKind::Siren {
        return Err(InsError::Config(
            "render_image needs a 2-D image field".into(),
        ));
    }
    let coords: Vec<f64> = pixel_grid(height, width).into_iter().flatten().collect();
    let coords = Tensor::from_shape_vec(IxDyn(&[height * width, 2]), coords).expect("HW×2");
    let tape = Tape::new();
    let p = Binding::new(&tape, field.params(), Trainable::None);
    let out = field.forward(&p, tape.constant(coords), None, code)?;
    Image::from_tensor(height, width, &out.color.value())
}

/// Rays per tape when shading a surface.
const SURFACE_CHUNK: usize = 1024;

fn render_surface(
    field: &InsField,
    camera: &Camera,
    code: &StyleCode,
    background: [f64; 3],
) -> Result<Frame> {
    let batch = camera_rays(camera, &all_pixels(camera.height, camera.width))?;
    let mut pixels = vec![background; batch.len()];
    let mut depth = vec![camera.far; batch.len()];
    for (c, rays) in batch.rays.chunks(SURFACE_CHUNK).enumerate() {
        let base = c * SURFACE_CHUNK;
        let surface = trace_surface(field, rays, |_| true);
        if surface.index.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let p = Binding::new(&tape, field.params(), Trainable::None);
        let style = field.style_features(&p, code)?;
        let sh = shading(field, &p, &surface)?;
        let colors = field
            .sdf_render_head(&p, sh.points, sh.normals, sh.dirs, sh.embedding, style)
            .value();
        for (row, &j) in surface.index.iter().enumerate() {
            pixels[base + j] = [colors[[row, 0]], colors[[row, 1]], colors[[row, 2]]];
            depth[base + j] = surface.t0[[row, 0]];
        }
    }
    Ok(Frame {
        color: Image::new(camera.height, camera.width, pixels)?,
        depth: Some(depth),
    })
}

/// One frame of `field` under `code`. Camera targets give depth as well:
/// expected depth for radiance fields, traced depth (far bound on misses)
/// for surfaces.
pub fn render_view(
    field: &InsField,
    target: &Target,
    code: &StyleCode,
    opts: &RenderOptions,
) -> Result<Frame> {
    field.config().check_code(code)?;
    match (field.kind(), target) {
        (FieldKind::Siren, Target::Image { height, width }) => Ok(Frame {
            color: render_image(field, *height, *width, code)?,
            depth: None,
        }),
        (FieldKind::Nerf, Target::Camera(cam)) => {
            let batch = camera_rays(cam, &all_pixels(cam.height, cam.width))?;
            let out = render_rays(field, &batch.rays, code, opts)?;
            Ok(Frame {
                color: Image::new(cam.height, cam.width, out.iter().map(|r| r.color).collect())?,
                depth: Some(out.iter().map(|r| r.depth).collect()),
            })
        }
        (FieldKind::Sdf, Target::Camera(cam)) => render_surface(field, cam, code, opts.background),
        (kind, _) => Err(InsError::Config(format!(
            "a {kind:?} field cannot render this target"
        ))),
    }
}

/// Frames for `cameras`, in order.
pub fn render_path(
    checkpoint: &Checkpoint,
    cameras: &[Camera],
    code: &StyleCode,
    opts: &RenderOptions,
) -> Result<Vec<Frame>> {
    cameras
        .iter()
        .map(|c| render_view(&checkpoint.field, &Target::Camera(c.clone()), code, opts))
        .collect()
}

/// Renders `target` under `lambda e_i + (1 - lambda) e_j` for `steps`
/// values of `lambda` going from 1 down to 0, so the first frame is style
/// `i` and the last style `j`.
pub fn interpolate_styles(
    checkpoint: &Checkpoint,
    target: &Target,
    i: usize,
    j: usize,
    steps: usize,
    opts: &RenderOptions,
) -> Result<Vec<Frame>> {
    let n = checkpoint.field.config().n_styles;
    if n < 2 {
        return Err(InsError::Argument(format!(
            "interpolation needs at least 2 styles, the field has {n}"
        )));
    }
    if i == j {
        return Err(InsError::Argument(format!(
            "interpolation endpoints must differ, got {i} twice"
        )));
    }
    if steps < 2 {
        return Err(InsError::Argument(format!(
            "steps must be >= 2, got {steps}"
        )));
    }
    (0..steps)
        .map(|s| {
            let lambda = 1.0 - s as f64 / (steps - 1) as f64;
            let code = StyleCode::blend(i, j, lambda, n)?;
            render_view(&checkpoint.field, target, &code, opts)
        })
        .collect()
}

/// Perceptual terms reported next to PSNR.
pub struct PerceptualEval<'a> {
    pub extractor: &'a FeatureExtractor,
    pub styles: &'a [Image],
    pub content_layers: &'a [LayerKey],
    pub style_layers: &'a [LayerKey],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub mse: f64,
    pub psnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content: Option<f64>,
    /// Style loss against every style image, in style order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_mse: f64,
}

/// Metrics of already rendered frames against references.
pub fn evaluate_frames(
    frames: &[Image],
    references: &[Image],
    names: &[String],
    perceptual: Option<&PerceptualEval<'_>>,
) -> Result<EvalReport> {
    if frames.len() != references.len() || frames.len() != names.len() || frames.is_empty() {
        return Err(InsError::Argument(format!(
            "{} frames, {} references and {} names",
            frames.len(),
            references.len(),
            names.len()
        )));
    }
    let mut views = Vec::with_capacity(frames.len());
    for ((frame, reference), name) in frames.iter().zip(references).zip(names) {
        let mse = frame.mse(reference)?;
        let (content, style) = match perceptual {
            Some(pe) => (
                Some(content_loss(
                    pe.extractor,
                    frame,
                    reference,
                    pe.content_layers,
                )?),
                Some(
                    pe.styles
                        .iter()
                        .map(|s| style_loss(pe.extractor, frame, s, pe.style_layers))
                        .collect::<Result<Vec<_>>>()?,
                ),
            ),
            None => (None, None),
        };
        views.push(ViewMetrics {
            name: name.clone(),
            mse,
            psnr: psnr(mse),
            content,
            style,
        });
    }
    let n = views.len() as f64;
    Ok(EvalReport {
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_mse: views.iter().map(|v| v.mse).sum::<f64>() / n,
        views,
    })
}

/// Renders every target, quantizes to the 8 bits frames are stored with and
/// scores the result, so reloading the written frames reproduces the report.
pub fn evaluate(
    checkpoint: &Checkpoint,
    targets: &[Target],
    references: &[Image],
    names: &[String],
    code: &StyleCode,
    opts: &RenderOptions,
    perceptual: Option<&PerceptualEval<'_>>,
) -> Result<(EvalReport, Vec<Frame>)> {
    let mut frames = targets
        .iter()
        .map(|t| render_view(&checkpoint.field, t, code, opts))
        .collect::<Result<Vec<_>>>()?;
    for f in &mut frames {
        f.color = f.color.quantized();
    }
    let colors: Vec<Image> = frames.iter().map(|f| f.color.clone()).collect();
    let report = evaluate_frames(&colors, references, names, perceptual)?;
    Ok((report, frames))
}
