//! Synthetic piecewise-planar RGB-D scenes.
//!
//! A [`PlanarScene`] carries an image, a z-depth map, a per-pixel plane index
//! mask (0 = non-plane), the ground-truth planes and their normalized
//! centers, boundary line segments and the camera intrinsics. Scenes are
//! produced by [`generate_scene`] and persisted with [`write_dataset`] /
//! [`load_scene`].

mod generate;
mod io;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{depth_from_plane, is_valid_depth, plane_center, CameraIntrinsics, LineSegment, PlaneParam};

pub use generate::{generate_scene, jitter_lines, scene_seed, GeneratorConfig, Layout};
pub(crate) use io::{read_npy, write_npy};
pub use io::{load_scene, load_split, read_manifest, write_dataset, write_scene, DatasetManifest, SplitEntry};

/// Maximum deviation between a plane pixel's stored depth and the depth
/// implied by its plane parameter.
pub const PLANE_DEPTH_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene generation failed for seed {seed} after {attempts} attempts: {reason}")]
    Infeasible { seed: u64, attempts: usize, reason: String },
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("scene validation failed: {invariant}")]
    Validation { invariant: String },
    #[error("scene {scene}: {source}")]
    Load {
        scene: String,
        #[source]
        source: Box<SceneError>,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

impl SceneError {
    fn invalid(invariant: impl Into<String>) -> Self {
        Self::Validation {
            invariant: invariant.into(),
        }
    }
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarScene {
    pub width: usize,
    pub height: usize,
    /// `H × W × 3`, row-major, values in `[0, 1]`.
    pub image: Vec<f64>,
    /// `H × W` z-depth in meters.
    pub depth: Vec<f64>,
    /// `H × W` plane index; `0` is non-plane, `i ≥ 1` refers to `planes[i - 1]`.
    pub mask: Vec<u32>,
    pub planes: Vec<PlaneParam>,
    pub centers: Vec<[f64; 2]>,
    pub line_segments: Vec<LineSegment>,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl PlanarScene {
    pub fn num_planes(&self) -> usize {
        self.planes.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Row-major boolean mask of plane `index` (0-based into `planes`).
    pub fn plane_mask(&self, index: usize) -> Vec<bool> {
        let label = index as u32 + 1;
        self.mask.iter().map(|&m| m == label).collect()
    }

    /// Pixel indices of each plane, 0-based by plane.
    pub fn plane_pixels(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.planes.len()];
        for (i, &m) in self.mask.iter().enumerate() {
            if m > 0 {
                out[m as usize - 1].push(i);
            }
        }
        out
    }

    /// Image converted to channel-major `[3, H, W]` layout.
    pub fn image_chw(&self) -> Vec<f64> {
        let n = self.pixel_count();
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = self.image[p * 3 + c];
            }
        }
        out
    }

    /// Keeps every `factor`-th pixel along each axis. Intrinsics are scaled
    /// so plane parameters stay exact; planes left without pixels are
    /// dropped and the rest relabeled in order.
    pub fn downsample(&self, factor: usize) -> Result<PlanarScene, SceneError> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(SceneError::Config(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let f = factor as f64;
        let k = &self.intrinsics;
        let intrinsics = CameraIntrinsics::new(k.fx / f, k.fy / f, k.cx / f, k.cy / f, w, h)
            .map_err(|e| SceneError::Config(e.to_string()))?;
        let src = |u: usize, v: usize| v * factor * self.width + u * factor;
        let mut image = Vec::with_capacity(w * h * 3);
        let mut depth = Vec::with_capacity(w * h);
        let mut old_mask = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                let p = src(u, v);
                image.extend_from_slice(&self.image[p * 3..p * 3 + 3]);
                depth.push(self.depth[p]);
                old_mask.push(self.mask[p]);
            }
        }
        let mut relabel = vec![0u32; self.planes.len() + 1];
        let mut planes = Vec::new();
        for (i, plane) in self.planes.iter().enumerate() {
            if old_mask.contains(&(i as u32 + 1)) {
                planes.push(*plane);
                relabel[i + 1] = planes.len() as u32;
            }
        }
        let mask: Vec<u32> = old_mask.iter().map(|&m| relabel[m as usize]).collect();
        let centers = (1..=planes.len() as u32)
            .map(|label| {
                let m: Vec<bool> = mask.iter().map(|&x| x == label).collect();
                plane_center(&m, w, h).expect("plane has pixels")
            })
            .collect();
        let line_segments = self
            .line_segments
            .iter()
            .map(|s| LineSegment::new([s.x1[0] / f, s.x1[1] / f], [s.x2[0] / f, s.x2[1] / f]))
            .filter(|s| s.is_valid_for(w, h))
            .collect();
        Ok(PlanarScene {
            width: w,
            height: h,
            image,
            depth,
            mask,
            planes,
            centers,
            line_segments,
            intrinsics,
            seed: self.seed,
        })
    }

    /// Left-right mirror image of the scene. The principal point is
    /// reflected to `W - 1 - cx` and plane normals flip their x component,
    /// so depths stay consistent with the planes.
    pub fn mirrored(&self) -> PlanarScene {
        let (w, h) = (self.width, self.height);
        let flip = |p: usize| (p / w) * w + (w - 1 - p % w);
        let mut image = vec![0.0; self.image.len()];
        let mut depth = vec![0.0; self.depth.len()];
        let mut mask = vec![0u32; self.mask.len()];
        for p in 0..w * h {
            let q = flip(p);
            image[q * 3..q * 3 + 3].copy_from_slice(&self.image[p * 3..p * 3 + 3]);
            depth[q] = self.depth[p];
            mask[q] = self.mask[p];
        }
        let planes = self.planes.iter().map(|p| PlaneParam([-p.0[0], p.0[1], p.0[2]])).collect();
        let centers = (1..=self.planes.len() as u32)
            .map(|label| {
                let m: Vec<bool> = mask.iter().map(|&x| x == label).collect();
                plane_center(&m, w, h).expect("plane has pixels")
            })
            .collect();
        let xmax = (w - 1) as f64;
        let line_segments = self
            .line_segments
            .iter()
            .map(|s| LineSegment::new([xmax - s.x1[0], s.x1[1]], [xmax - s.x2[0], s.x2[1]]))
            .collect();
        let mut intrinsics = self.intrinsics;
        intrinsics.cx = xmax - intrinsics.cx;
        PlanarScene {
            width: w,
            height: h,
            image,
            depth,
            mask,
            planes,
            centers,
            line_segments,
            intrinsics,
            seed: self.seed,
        }
    }

    /// SHA-256 over every field, in a fixed order and byte layout.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        for v in self.image.iter().chain(&self.depth) {
            h.update(v.to_le_bytes());
        }
        for m in &self.mask {
            h.update(m.to_le_bytes());
        }
        for p in &self.planes {
            for v in p.0 {
                h.update(v.to_le_bytes());
            }
        }
        for c in &self.centers {
            for v in c {
                h.update(v.to_le_bytes());
            }
        }
        for s in &self.line_segments {
            for v in s.x1.iter().chain(&s.x2) {
                h.update(v.to_le_bytes());
            }
        }
        let k = &self.intrinsics;
        for v in [k.fx, k.fy, k.cx, k.cy] {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Re-checks every scene invariant. `max_planes` bounds the plane count
    /// when given (the query count of the model that will consume the scene).
    pub fn validate(&self, max_planes: Option<usize>) -> Result<(), SceneError> {
        let n = self.pixel_count();
        if n == 0 {
            return Err(SceneError::invalid("image is empty"));
        }
        if self.image.len() != 3 * n || self.depth.len() != n || self.mask.len() != n {
            return Err(SceneError::invalid("array sizes do not match the image size"));
        }
        let k = &self.intrinsics;
        if k.width != self.width || k.height != self.height {
            return Err(SceneError::invalid("intrinsics image size differs from scene size"));
        }
        k.validate().map_err(|e| SceneError::invalid(e.to_string()))?;
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SceneError::invalid("image values outside [0, 1]"));
        }
        let m = self.planes.len();
        if let Some(kq) = max_planes {
            if m > kq {
                return Err(SceneError::invalid(format!("{m} planes exceed the query count {kq}")));
            }
        }
        if let Some(bad) = self.mask.iter().find(|&&v| v as usize > m) {
            return Err(SceneError::invalid(format!("mask value {bad} exceeds plane count {m}")));
        }
        if self.centers.len() != m {
            return Err(SceneError::invalid("center count differs from plane count"));
        }
        if let Some(i) = self.planes.iter().position(|p| !p.is_valid()) {
            return Err(SceneError::invalid(format!("plane {} has a zero or non-finite parameter", i + 1)));
        }
        for (p, (&z, &label)) in self.depth.iter().zip(&self.mask).enumerate() {
            if label == 0 {
                continue;
            }
            let plane = &self.planes[label as usize - 1];
            let px = [(p % self.width) as f64, (p / self.width) as f64];
            let expected = depth_from_plane(px, plane, k);
            if !is_valid_depth(z) || !is_valid_depth(expected) || (z - expected).abs() > PLANE_DEPTH_TOLERANCE {
                return Err(SceneError::invalid(format!(
                    "depth at pixel {px:?} ({z}) is not on plane {label} ({expected})"
                )));
            }
        }
        for i in 0..m {
            let mask = self.plane_mask(i);
            match plane_center(&mask, self.width, self.height) {
                Ok(c) => {
                    let stored = self.centers[i];
                    if (c[0] - stored[0]).abs() > 1e-12 || (c[1] - stored[1]).abs() > 1e-12 {
                        return Err(SceneError::invalid(format!("center of plane {} is stale", i + 1)));
                    }
                }
                Err(_) => return Err(SceneError::invalid(format!("plane {} has no pixels", i + 1))),
            }
        }
        if let Some(s) = self.line_segments.iter().find(|s| !s.is_valid_for(self.width, self.height)) {
            return Err(SceneError::invalid(format!("line segment {s:?} is degenerate or out of bounds")));
        }
        Ok(())
    }
}
