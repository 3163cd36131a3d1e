//! Procedural fixtures: an analytically rendered sphere scene (plain and
//! masked), a smooth content image and a few texture styles.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ::image::{GrayImage, Luma, Rgba, RgbaImage};

use super::{FrameRecord, Image, TransformsFile, TRANSFORMS_FILE};
use crate::error::{InsError, Result};
use crate::sampling::Camera;

#[derive(Clone, Debug, PartialEq)]
pub struct SphereSceneSpec {
    pub radius: f64,
    pub views: usize,
    pub size: usize,
    pub distance: f64,
    pub camera_angle_x: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for SphereSceneSpec {
    fn default() -> Self {
        Self {
            radius: 1.0,
            views: 8,
            size: 64,
            distance: 4.0,
            camera_angle_x: 0.6911112,
            near: 2.0,
            far: 6.0,
        }
    }
}

impl SphereSceneSpec {
    pub fn focal(&self) -> f64 {
        0.5 * self.size as f64 / (0.5 * self.camera_angle_x).tan()
    }

    /// Orbit of `views` cameras around the origin, z up, alternating
    /// elevation.
    pub fn cameras(&self) -> Vec<Camera> {
        (0..self.views)
            .map(|i| self.camera(i as f64 / self.views as f64, i))
            .collect()
    }

    /// Camera at orbit fraction `u` (`0..1`) with the elevation of view `i`.
    pub fn camera(&self, u: f64, i: usize) -> Camera {
        let phi = 2.0 * PI * u;
        let elev: f64 = if i.is_multiple_of(2) { 0.35 } else { -0.2 };
        let eye = [
            self.distance * elev.cos() * phi.cos(),
            self.distance * elev.cos() * phi.sin(),
            self.distance * elev.sin(),
        ];
        Camera::look_at(
            eye,
            [0.0; 3],
            [0.0, 0.0, 1.0],
            self.focal(),
            (self.size, self.size),
            (self.near, self.far),
        )
        .expect("orbit camera is well formed")
    }
}

/// Surface color as a function of the outward normal.
pub fn sphere_color(n: [f64; 3]) -> [f64; 3] {
    [0.55 + 0.4 * n[0], 0.5 + 0.35 * n[1], 0.45 + 0.4 * n[2]]
}

/// Exact ray-sphere render; returns the image and the hit mask.
pub fn render_sphere(camera: &Camera, radius: f64, background: [f64; 3]) -> (Image, Vec<bool>) {
    let mut mask = Vec::with_capacity(camera.width * camera.height);
    let img = Image::from_fn(camera.height, camera.width, |r, c| {
        let ray = camera.ray(r, c).expect("in bounds");
        let (o, d) = (ray.origin, ray.direction);
        let b = o[0] * d[0] + o[1] * d[1] + o[2] * d[2];
        let cc = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - radius * radius;
        let disc = b * b - cc;
        if disc < 0.0 {
            mask.push(false);
            return background;
        }
        let t = -b - disc.sqrt();
        let p = ray.at(t);
        mask.push(true);
        sphere_color([p[0] / radius, p[1] / radius, p[2] / radius])
    });
    (img, mask)
}

/// Writes the sphere scene in transforms-JSON layout. Plain scenes store RGBA
/// with a transparent background; masked scenes store RGB on black plus
/// binary masks.
pub fn write_sphere_scene(dir: &Path, spec: &SphereSceneSpec, masked: bool) -> Result<()> {
    let io = |p: &Path, e: std::io::Error| InsError::io(p, e);
    fs::create_dir_all(dir.join("train")).map_err(|e| io(dir, e))?;
    if masked {
        fs::create_dir_all(dir.join("mask")).map_err(|e| io(dir, e))?;
    }
    let mut frames = vec![];
    for (i, cam) in spec.cameras().iter().enumerate() {
        let bg = [0.0; 3];
        let (img, hit) = render_sphere(cam, spec.radius, bg);
        let name = format!("train/r_{i}");
        let rgba = RgbaImage::from_fn(img.width as u32, img.height as u32, |x, y| {
            let k = y as usize * img.width + x as usize;
            let p = img.pixels[k].map(super::image::to_u8);
            let alpha = if masked || hit[k] { 255 } else { 0 };
            Rgba([p[0], p[1], p[2], alpha])
        });
        let path = dir.join(format!("{name}.png"));
        rgba.save(&path)
            .map_err(|e| super::image::image_error(&path, e))?;
        let mask_path = if masked {
            let m = GrayImage::from_fn(img.width as u32, img.height as u32, |x, y| {
                Luma([if hit[y as usize * img.width + x as usize] {
                    255
                } else {
                    0
                }])
            });
            let rel = format!("mask/r_{i}.png");
            let path = dir.join(&rel);
            m.save(&path)
                .map_err(|e| super::image::image_error(&path, e))?;
            Some(rel)
        } else {
            None
        };
        let pose = cam.pose;
        frames.push(FrameRecord {
            file_path: format!("./{name}"),
            mask_path,
            transform_matrix: (0..4)
                .map(|r| (0..4).map(|c| pose[(r, c)]).collect())
                .collect(),
        });
    }
    let meta = TransformsFile {
        camera_angle_x: spec.camera_angle_x,
        near: Some(spec.near),
        far: Some(spec.far),
        frames,
    };
    let path = dir.join(TRANSFORMS_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("serializable");
    fs::write(&path, text).map_err(|e| io(&path, e))
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth content image: two color waves and a soft-edged disk.
pub fn content_image(size: usize) -> Image {
    let n = (size.max(2) - 1) as f64;
    Image::from_fn(size, size, |r, c| {
        let (u, v) = (c as f64 / n, r as f64 / n);
        let base = [
            0.5 + 0.3 * (2.0 * PI * (u + 0.3 * v)).sin(),
            0.45 + 0.3 * (1.5 * PI * v).cos() * (PI * u).cos(),
            0.5 + 0.25 * (2.0 * PI * (u - v)).cos(),
        ];
        let d = ((u - 0.62).powi(2) + (v - 0.4).powi(2)).sqrt();
        let a = 1.0 - smoothstep(0.18, 0.24, d);
        let disk = [0.9, 0.8, 0.2];
        std::array::from_fn(|i| (1.0 - a) * base[i] + a * disk[i])
    })
}

/// Procedural style textures; `index` selects the pattern.
pub fn style_image(index: usize, size: usize) -> Image {
    match index % 3 {
        0 => Image::from_fn(size, size, |r, c| {
            let s = ((r + c) as f64 * PI / 4.0).sin();
            if s > 0.0 {
                [0.95, 0.55, 0.1]
            } else {
                [0.1, 0.2, 0.6]
            }
        }),
        1 => Image::from_fn(size, size, |r, c| {
            if (r / 6 + c / 6) % 2 == 0 {
                [0.1, 0.4, 0.15]
            } else {
                [0.95, 0.9, 0.3]
            }
        }),
        _ => Image::from_fn(size, size, |r, c| {
            let (y, x) = ((r % 10) as f64 - 4.5, (c % 10) as f64 - 4.5);
            if x * x + y * y < 9.0 {
                [0.85, 0.1, 0.3]
            } else {
                [0.95, 0.95, 0.9]
            }
        }),
    }
}

/// Writes [`style_image`] patterns `0..count` as PNGs and returns the paths.
pub fn write_styles(dir: &Path, count: usize, size: usize) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| InsError::io(dir, e))?;
    (0..count)
        .map(|i| {
            let p = dir.join(format!("style_{i}.png"));
            style_image(i, size).save_png(&p)?;
            Ok(p)
        })
        .collect()
}
