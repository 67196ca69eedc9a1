//! Camera and plane math.
//!
//! Conventions used everywhere in the crate:
//! - camera frame: x right, y down, z forward (meters);
//! - pixel `(u, v)` samples the ray through `((u - cx) / fx, (v - cy) / fy, 1)`
//!   with no half-pixel offset;
//! - a plane is stored as the scaled normal `n = ñ / d`, so every point `q`
//!   on it satisfies `nᵀq = 1`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rays whose dot product with a plane parameter is at most this are treated
/// as parallel to the plane.
pub const RAY_EPS: f64 = 1e-6;

/// Marker for a depth that could not be computed. Callers test with
/// [`is_valid_depth`]; it is never clamped into a finite value.
pub const INVALID_DEPTH: f64 = f64::NAN;

pub fn is_valid_depth(z: f64) -> bool {
    z.is_finite() && z > 0.0
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({0}, {1}) lies outside the image")]
    PixelOutOfBounds(f64, f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("plane fit is rank deficient ({0})")]
    DegenerateFit(String),
    #[error("mask is empty")]
    EmptyMask,
}

/// Pinhole intrinsics plus image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Equal focal lengths, principal point at the center of the pixel
    /// grid. Pixel centers sit at integer coordinates, so the center is
    /// `((W - 1) / 2, (H - 1) / 2)` and a mirrored image keeps it.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Ray through pixel `(u, v)` normalized to unit z.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point with positive z to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A plane as its scaled normal `n = ñ / d` (units 1/m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneParam(pub [f64; 3]);

impl PlaneParam {
    pub fn new(n: [f64; 3]) -> Self {
        Self(n)
    }

    /// From a unit normal `ñ` and camera-to-plane distance `d > 0`.
    pub fn from_normal_offset(normal: Vector3<f64>, offset: f64) -> Self {
        let n = normal.normalize() / offset;
        Self([n.x, n.y, n.z])
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::from(self.0)
    }

    pub fn norm(&self) -> f64 {
        self.vector().norm()
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite()) && self.norm() > 0.0
    }

    /// Unit normal `ñ = n / |n|`.
    pub fn unit_normal(&self) -> Vector3<f64> {
        self.vector() / self.norm()
    }

    /// Distance from the camera center `d = 1 / |n|` (meters).
    pub fn offset(&self) -> f64 {
        1.0 / self.norm()
    }

    /// `nᵀq - 1`; zero for points on the plane.
    pub fn residual(&self, q: &Vector3<f64>) -> f64 {
        self.vector().dot(q) - 1.0
    }
}

/// A 2D line segment in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub x1: [f64; 2],
    pub x2: [f64; 2],
}

impl LineSegment {
    pub fn new(x1: [f64; 2], x2: [f64; 2]) -> Self {
        Self { x1, x2 }
    }

    pub fn length(&self) -> f64 {
        (self.x2[0] - self.x1[0]).hypot(self.x2[1] - self.x1[1])
    }

    /// Both endpoints inside `[0, width) × [0, height)` and distinct.
    pub fn is_valid_for(&self, width: usize, height: usize) -> bool {
        let inside = |p: [f64; 2]| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < width as f64 && p[1] < height as f64;
        inside(self.x1) && inside(self.x2) && self.x1 != self.x2
    }

    /// The same segment with its endpoints swapped.
    pub fn reversed(&self) -> Self {
        Self::new(self.x2, self.x1)
    }

    /// Distance from `p` to the closest point of the segment.
    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        let d = [self.x2[0] - self.x1[0], self.x2[1] - self.x1[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 > 0.0 {
            (((p[0] - self.x1[0]) * d[0] + (p[1] - self.x1[1]) * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p[0] - self.x1[0] - t * d[0]).hypot(p[1] - self.x1[1] - t * d[1])
    }
}

/// Camera-frame point seen at `pixel` with z-depth `depth`.
pub fn backproject(pixel: [f64; 2], depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    if !k.contains(pixel[0], pixel[1]) {
        return Err(GeometryError::PixelOutOfBounds(pixel[0], pixel[1]));
    }
    Ok(k.ray(pixel[0], pixel[1]) * depth)
}

/// z-depth where the ray through `pixel` meets `plane`, or [`INVALID_DEPTH`]
/// when the ray is (nearly) parallel to the plane.
pub fn depth_from_plane(pixel: [f64; 2], plane: &PlaneParam, k: &CameraIntrinsics) -> f64 {
    let denom = plane.vector().dot(&k.ray(pixel[0], pixel[1]));
    if denom.abs() <= RAY_EPS || !denom.is_finite() {
        INVALID_DEPTH
    } else {
        1.0 / denom
    }
}

/// Least-squares plane through `points`, minimizing `Σ (nᵀq - 1)²`.
pub fn fit_plane(points: &[Vector3<f64>]) -> Result<PlaneParam, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::DegenerateFit(format!("{} points", points.len())));
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for q in points {
        ata += q * q.transpose();
        atb += q;
    }
    let svd = ata.svd(true, true);
    let s = svd.singular_values;
    let smax = s.max();
    let smin = s.min();
    // Collinear points, or points on a plane through the camera center, leave
    // the normal equations singular.
    if !(smax > 0.0) || smin <= smax * 1e-12 {
        return Err(GeometryError::DegenerateFit(format!("singular values {:?}", s.as_slice())));
    }
    let n = svd
        .solve(&atb, 0.0)
        .map_err(|e| GeometryError::DegenerateFit(e.to_string()))?;
    // one refinement step against the normal equations
    let r = atb - ata * n;
    let n = n + svd.solve(&r, 0.0).map_err(|e| GeometryError::DegenerateFit(e.to_string()))?;
    Ok(PlaneParam([n.x, n.y, n.z]))
}

/// Normalized mean pixel coordinate of a row-major mask, in `[0, 1]²`.
pub fn plane_center(mask: &[bool], width: usize, height: usize) -> Result<[f64; 2], GeometryError> {
    assert_eq!(mask.len(), width * height, "mask size mismatch");
    let (mut su, mut sv, mut count) = (0.0, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        su += (i % width) as f64;
        sv += (i / width) as f64;
        count += 1;
    }
    if count == 0 {
        return Err(GeometryError::EmptyMask);
    }
    let n = count as f64;
    Ok([su / n / width as f64, sv / n / height as f64])
}

/// Angle between two unit-normalizable vectors, in degrees.
pub fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}
