use std::path::Path;

use ins_autograd::Tensor;
use ndarray::IxDyn;

use crate::error::{InsError, Result};

/// RGB image with channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(InsError::Data(format!(
                "{} pixels for a {height}×{width} image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Self {
        Self {
            height,
            width,
            pixels: vec![color; height * width],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let pixels = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    /// `HW×3` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let flat: Vec<f64> = self.pixels.iter().flatten().copied().collect();
        Tensor::from_shape_vec(IxDyn(&[self.pixels.len(), 3]), flat).expect("HW×3")
    }

    /// Inverse of [`Image::to_tensor`].
    pub fn from_tensor(height: usize, width: usize, t: &Tensor) -> Result<Self> {
        if t.shape() != [height * width, 3] {
            return Err(InsError::Argument(format!(
                "tensor of shape {:?} is not a {height}×{width} image",
                t.shape()
            )));
        }
        let v: Vec<f64> = t.iter().copied().collect();
        let pixels = v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(height, width, pixels)
    }

    /// Pixels at `coords`, in order, as an `N×3` tensor.
    pub fn gather(&self, coords: &[(usize, usize)]) -> Tensor {
        let flat: Vec<f64> = coords.iter().flat_map(|&(r, c)| self.get(r, c)).collect();
        Tensor::from_shape_vec(IxDyn(&[coords.len(), 3]), flat).expect("N×3")
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(InsError::Argument(format!(
                "image sizes differ: {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |i| (a[i] - b[i]).powi(2)))
            .sum();
        Ok(sum / (3 * self.pixels.len()) as f64)
    }

    /// Bilinear resize (the `image` crate's triangle filter).
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let rgb = self.to_rgb32f();
        let out = image::imageops::resize(
            &rgb,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::from_rgb32f(&out)
    }

    /// Crop of `height×width` starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        Image::from_fn(height, width, |r, c| self.get(top + r, left + c))
    }

    pub(crate) fn to_rgb32f(&self) -> image::Rgb32FImage {
        image::Rgb32FImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.get(y as usize, x as usize);
            image::Rgb([p[0] as f32, p[1] as f32, p[2] as f32])
        })
    }

    pub(crate) fn from_rgb32f(img: &image::Rgb32FImage) -> Image {
        Image::from_fn(img.height() as usize, img.width() as usize, |r, c| {
            let p = img.get_pixel(c as u32, r as u32);
            [
                (p[0] as f64).clamp(0.0, 1.0),
                (p[1] as f64).clamp(0.0, 1.0),
                (p[2] as f64).clamp(0.0, 1.0),
            ]
        })
    }

    /// Values rounded to the 8-bit levels [`Image::save_png`] stores.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|p| p.map(|v| to_u8(v) as f64 / 255.0))
                .collect(),
        }
    }

    /// 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.get(y as usize, x as usize);
            image::Rgb(p.map(to_u8))
        });
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_error(path, e))
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn image_error(path: &Path, e: image::ImageError) -> InsError {
    match e {
        image::ImageError::IoError(source) => InsError::io(path, source),
        other => InsError::Data(format!("{}: {other}", path.display())),
    }
}

/// `-10 log10(mse)`, capped at 99 dB for identical images.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        99.0
    } else {
        (-10.0 * mse.log10()).min(99.0)
    }
}
