//! Pinhole cameras, ray generation, strided patches and pixel grids.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;

use crate::error::{InsError, Result};
use crate::rendering::Ray;

/// Blender-format default bounds.
pub const BLENDER_NEAR: f64 = 2.0;
pub const BLENDER_FAR: f64 = 6.0;

/// Largest accepted entry of `R^T R - I` for a camera pose.
pub const ROTATION_TOL: f64 = 1e-3;

/// Pinhole camera. Looks down `-z` in camera space with `+x` right and `+y` up.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// Camera-to-world transform.
    pub pose: Matrix4<f64>,
    /// Focal length in pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        pose: Matrix4<f64>,
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        check_rotation(&pose, ROTATION_TOL)?;
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(InsError::Data(format!(
                "focal length must be > 0, got {focal}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(InsError::Data("camera image must be non-empty".into()));
        }
        if !(near > 0.0 && near < far) {
            return Err(InsError::Data(format!(
                "camera bounds must satisfy 0 < near < far, got ({near}, {far})"
            )));
        }
        Ok(Self {
            pose,
            focal,
            width,
            height,
            near,
            far,
        })
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        size: (usize, usize),
        bounds: (f64, f64),
    ) -> Result<Self> {
        let eye = Vector3::from(eye);
        let back = (eye - Vector3::from(target)).normalize();
        let right = Vector3::from(up).cross(&back);
        if right.norm() < 1e-9 {
            return Err(InsError::Argument(
                "up vector is parallel to the view axis".into(),
            ));
        }
        let right = right.normalize();
        let true_up = back.cross(&right);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        pose.fixed_view_mut::<3, 1>(0, 1).copy_from(&true_up);
        pose.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Self::new(pose, focal, size.1, size.0, bounds.0, bounds.1)
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.pose[(0, 3)], self.pose[(1, 3)], self.pose[(2, 3)]]
    }

    /// World-space ray through pixel `(row, col)`.
    pub fn ray(&self, row: usize, col: usize) -> Result<Ray> {
        if row >= self.height || col >= self.width {
            return Err(InsError::Argument(format!(
                "pixel ({row}, {col}) outside {}×{} image",
                self.height, self.width
            )));
        }
        let d = Vector3::new(
            (col as f64 - self.width as f64 / 2.0) / self.focal,
            -(row as f64 - self.height as f64 / 2.0) / self.focal,
            -1.0,
        );
        let r: Matrix3<f64> = self.pose.fixed_view::<3, 3>(0, 0).into_owned();
        let d = (r * d).normalize();
        Ray::new(self.origin(), [d.x, d.y, d.z], self.near, self.far)
    }
}

/// Rotation block orthonormal within `tol` (entrywise on `R^T R - I`).
pub fn check_rotation(pose: &Matrix4<f64>, tol: f64) -> Result<()> {
    if pose.iter().any(|v| !v.is_finite()) {
        return Err(InsError::Data("pose has non-finite entries".into()));
    }
    let r: Matrix3<f64> = pose.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > tol {
        return Err(InsError::Data(format!(
            "pose rotation is not orthonormal (deviation {err:.3e})"
        )));
    }
    Ok(())
}

/// Rays plus the pixel lattice they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub pixels: Vec<(usize, usize)>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

pub fn camera_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<RayBatch> {
    let rays = pixels
        .iter()
        .map(|&(r, c)| camera.ray(r, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(RayBatch {
        rays,
        pixels: pixels.to_vec(),
    })
}

/// Every pixel of the camera image, row-major.
pub fn all_pixels(height: usize, width: usize) -> Vec<(usize, usize)> {
    (0..height)
        .flat_map(|r| (0..width).map(move |c| (r, c)))
        .collect()
}

/// A `K×K` lattice of pixels spaced `stride` apart.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub size: usize,
    pub stride: usize,
    /// Top-left pixel `(row, col)`.
    pub anchor: (usize, usize),
    /// Row-major, `pixels[m * size + n] = anchor + (m * stride, n * stride)`.
    pub pixels: Vec<(usize, usize)>,
}

/// Side length covered by a strided patch.
pub fn footprint(size: usize, stride: usize) -> usize {
    (size - 1) * stride + 1
}

pub fn patch_at(size: usize, stride: usize, anchor: (usize, usize)) -> Patch {
    let pixels = (0..size)
        .flat_map(|m| (0..size).map(move |n| (anchor.0 + m * stride, anchor.1 + n * stride)))
        .collect();
    Patch {
        size,
        stride,
        anchor,
        pixels,
    }
}

/// Uniformly anchored strided patch inside an `H×W` image.
pub fn stride_patch<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    size: usize,
    stride: usize,
    rng: &mut R,
) -> Result<Patch> {
    if size == 0 || stride == 0 {
        return Err(InsError::Argument(
            "patch size and stride must be >= 1".into(),
        ));
    }
    let side = height.min(width);
    let extent = footprint(size, stride);
    if extent > side {
        let hint = if size > 1 && side >= size {
            format!("max feasible stride is {}", (side - 1) / (size - 1))
        } else {
            format!("no stride fits a {size}-pixel patch")
        };
        return Err(InsError::Argument(format!(
            "patch footprint {extent} exceeds image side {side}; {hint}"
        )));
    }
    let row = rng.random_range(0..=height - extent);
    let col = rng.random_range(0..=width - extent);
    Ok(patch_at(size, stride, (row, col)))
}

/// Normalized `(row, col)` coordinates in `[-1, 1]`, row-major.
pub fn pixel_grid(height: usize, width: usize) -> Vec<[f64; 2]> {
    let axis = |n: usize| -> Vec<f64> {
        if n == 1 {
            vec![0.0]
        } else {
            (0..n)
                .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
                .collect()
        }
    };
    let (rows, cols) = (axis(height), axis(width));
    rows.iter()
        .flat_map(|r| cols.iter().map(move |c| [*r, *c]))
        .collect()
}
