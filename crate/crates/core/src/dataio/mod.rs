//! Scene, style and image ingestion; frame output.
//!
//! Scene directories follow the transforms-JSON convention:
//!
//! ```text
//! transforms_train.json
//! {
//!   "camera_angle_x": 0.6911112,          // horizontal field of view, radians
//!   "near": 2.0, "far": 6.0,              // optional, default 2 / 6
//!   "frames": [
//!     { "file_path": "./train/r_0",       // ".png" appended when missing
//!       "mask_path": "./mask/r_0.png",    // masked scenes only
//!       "transform_matrix": [[..4..], [..4..], [..4..], [..4..]] }
//!   ]
//! }
//! ```
//!
//! Frames are sorted by `file_path` before use.

mod image;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use ::image::{DynamicImage, ImageBuffer, Luma};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{InsError, Result};
use crate::fields::StyleCode;
use crate::sampling::{check_rotation, Camera, BLENDER_FAR, BLENDER_NEAR, ROTATION_TOL};

pub use self::image::{psnr, Image};

pub const TRANSFORMS_FILE: &str = "transforms_train.json";
pub const FRAMES_SIDECAR: &str = "frames.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformsFile {
    pub camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameRecord {
    pub file_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub transform_matrix: Vec<Vec<f64>>,
}

/// Posed views of one scene.
#[derive(Clone, Debug)]
pub struct PosedImageSet {
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    /// Row-major foreground flags per image.
    pub masks: Option<Vec<Vec<bool>>>,
    pub near: f64,
    pub far: f64,
    pub names: Vec<String>,
}

impl PosedImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Transforms-JSON scene with RGBA composited onto white.
pub fn load_blender_scene(dir: &Path) -> Result<PosedImageSet> {
    load_scene(dir, [1.0; 3], false)
}

/// Transforms-JSON scene whose frames carry `mask_path`; RGBA composited onto
/// black, masks thresholded at 0.5.
pub fn load_masked_scene(dir: &Path) -> Result<PosedImageSet> {
    load_scene(dir, [0.0; 3], true)
}

fn load_scene(dir: &Path, background: [f64; 3], masked: bool) -> Result<PosedImageSet> {
    let path = dir.join(TRANSFORMS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| InsError::io(&path, e))?;
    let mut meta: TransformsFile = serde_json::from_str(&text)
        .map_err(|e| InsError::Data(format!("{}: {e}", path.display())))?;
    meta.frames.sort_by(|a, b| a.file_path.cmp(&b.file_path));
    let near = meta.near.unwrap_or(BLENDER_NEAR);
    let far = meta.far.unwrap_or(BLENDER_FAR);
    if !(meta.camera_angle_x > 0.0 && meta.camera_angle_x < std::f64::consts::PI) {
        return Err(InsError::Data(format!(
            "camera_angle_x {} is not a valid field of view",
            meta.camera_angle_x
        )));
    }

    let mut set = PosedImageSet {
        images: vec![],
        cameras: vec![],
        masks: masked.then(Vec::new),
        near,
        far,
        names: vec![],
    };
    for frame in &meta.frames {
        let name = &frame.file_path;
        let pose = parse_pose(&frame.transform_matrix)
            .map_err(|e| InsError::Data(format!("frame `{name}`: {e}")))?;
        let img_path = resolve(dir, name);
        let img = read_rgba_over(&img_path, background)?;
        let focal = 0.5 * img.width as f64 / (0.5 * meta.camera_angle_x).tan();
        let camera = Camera::new(pose, focal, img.width, img.height, near, far)
            .map_err(|e| InsError::Data(format!("frame `{name}`: {e}")))?;
        if let Some(masks) = set.masks.as_mut() {
            let mp = frame
                .mask_path
                .as_ref()
                .ok_or_else(|| InsError::Data(format!("frame `{name}` has no mask_path")))?;
            let mask = read_mask(&resolve(dir, mp))?;
            if (mask.0, mask.1) != (img.height, img.width) {
                return Err(InsError::Data(format!(
                    "frame `{name}`: mask is {}×{} but image is {}×{}",
                    mask.0, mask.1, img.height, img.width
                )));
            }
            masks.push(mask.2);
        }
        set.images.push(img);
        set.cameras.push(camera);
        set.names.push(name.clone());
    }
    Ok(set)
}

fn resolve(dir: &Path, file: &str) -> PathBuf {
    let p = dir.join(file);
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

fn parse_pose(rows: &[Vec<f64>]) -> std::result::Result<Matrix4<f64>, String> {
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
        let dims: Vec<usize> = rows.iter().map(Vec::len).collect();
        return Err(format!(
            "transform_matrix must be 4×4, got rows of lengths {dims:?}"
        ));
    }
    let m = Matrix4::from_fn(|r, c| rows[r][c]);
    check_rotation(&m, ROTATION_TOL).map_err(|e| e.to_string())?;
    Ok(m)
}

fn open(path: &Path) -> Result<DynamicImage> {
    ::image::open(path).map_err(|e| self::image::image_error(path, e))
}

/// Decodes any supported image, compositing alpha over `background`.
pub fn read_rgba_over(path: &Path, background: [f64; 3]) -> Result<Image> {
    let rgba = open(path)?.into_rgba32f();
    let img = Image::from_fn(rgba.height() as usize, rgba.width() as usize, |r, c| {
        let p = rgba.get_pixel(c as u32, r as u32);
        let a = p[3] as f64;
        std::array::from_fn(|i| {
            let v = p[i] as f64 * a + (1.0 - a) * background[i];
            v.clamp(0.0, 1.0)
        })
    });
    Ok(img)
}

fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let g = open(path)?.to_luma32f();
    let bits = g.pixels().map(|p| p[0] >= 0.5).collect();
    Ok((g.height() as usize, g.width() as usize, bits))
}

/// Style images paired with one-hot codes in path order.
#[derive(Clone, Debug)]
pub struct StyleSet {
    pub images: Vec<Image>,
    /// `{index}_{file stem}`, unique even for repeated paths.
    pub names: Vec<String>,
    pub codes: Vec<StyleCode>,
}

impl StyleSet {
    pub fn from_images(images: Vec<Image>, names: Vec<String>) -> Self {
        let n = images.len();
        let codes = (0..n)
            .map(|i| StyleCode::one_hot(i, n).expect("index in range"))
            .collect();
        Self {
            images,
            names,
            codes,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loads `n` style images, scales the short side to `size` and
/// center-crops to `size×size`.
pub fn load_styles(paths: &[PathBuf], n: usize, size: usize) -> Result<StyleSet> {
    if paths.len() != n {
        return Err(InsError::Config(format!(
            "{} style images given for {n} styles",
            paths.len()
        )));
    }
    let mut images = Vec::with_capacity(n);
    let mut names = Vec::with_capacity(n);
    for (i, p) in paths.iter().enumerate() {
        let img = read_rgba_over(p, [1.0; 3])?;
        images.push(square_crop(&img, size));
        let stem = p
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        names.push(format!("{i}_{stem}"));
    }
    Ok(StyleSet::from_images(images, names))
}

/// Aspect-preserving resize to short side `size`, then center crop.
pub fn square_crop(img: &Image, size: usize) -> Image {
    let scale = size as f64 / img.height.min(img.width) as f64;
    let h = ((img.height as f64 * scale).round() as usize).max(size);
    let w = ((img.width as f64 * scale).round() as usize).max(size);
    let resized = if (h, w) == (img.height, img.width) {
        img.clone()
    } else {
        img.resize(h, w)
    };
    resized.crop((h - size) / 2, (w - size) / 2, size, size)
}

/// One rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub color: Image,
    /// Row-major metric depth.
    pub depth: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramesSidecar {
    /// Metric depth = pixel / 65535 × `depth_scale`.
    pub depth_scale: f64,
    pub color: Vec<String>,
    pub depth: Vec<String>,
}

/// Writes `frame_%04d.png` (8-bit RGB), `depth_%04d.png` (16-bit gray,
/// `depth / depth_scale` in `[0, 1]`) and a `frames.json` sidecar.
/// An empty frame list writes nothing.
pub fn write_frames(frames: &[Frame], dir: &Path, depth_scale: f64) -> Result<Vec<PathBuf>> {
    if frames.is_empty() {
        return Ok(vec![]);
    }
    fs::create_dir_all(dir).map_err(|e| InsError::io(dir, e))?;
    let mut files = vec![];
    let mut sidecar = FramesSidecar {
        depth_scale,
        color: vec![],
        depth: vec![],
    };
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frame_{i:04}.png");
        let path = dir.join(&name);
        f.color.save_png(&path)?;
        files.push(path);
        sidecar.color.push(name);
        if let Some(depth) = &f.depth {
            let (w, h) = (f.color.width as u32, f.color.height as u32);
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
                let d = depth[y as usize * w as usize + x as usize] / depth_scale;
                Luma([(d.clamp(0.0, 1.0) * 65535.0).round() as u16])
            });
            let name = format!("depth_{i:04}.png");
            let path = dir.join(&name);
            buf.save_with_format(&path, ::image::ImageFormat::Png)
                .map_err(|e| self::image::image_error(&path, e))?;
            files.push(path);
            sidecar.depth.push(name);
        }
    }
    let path = dir.join(FRAMES_SIDECAR);
    let text = serde_json::to_string_pretty(&sidecar).expect("serializable");
    fs::write(&path, text).map_err(|e| InsError::io(&path, e))?;
    files.push(path);
    Ok(files)
}

/// Reads a color frame written by [`write_frames`].
pub fn read_color_frame(path: &Path) -> Result<Image> {
    read_rgba_over(path, [0.0; 3])
}

/// Reads a 16-bit depth frame back to metric depth.
pub fn read_depth_frame(path: &Path, depth_scale: f64) -> Result<Vec<f64>> {
    let g = open(path)?.into_luma16();
    Ok(g.pixels()
        .map(|p| p[0] as f64 / 65535.0 * depth_scale)
        .collect())
}
