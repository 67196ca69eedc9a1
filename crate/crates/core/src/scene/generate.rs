//! Box-room scene generator.
//!
//! World frame: X right, Y up, Z forward, floor at `Y = 0`. The camera sits
//! at `(0, h, 0)` with a small yaw and downward pitch. Walls are tall enough
//! that every viewing ray meets geometry, so every pixel gets a depth.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PlanarScene, SceneError};
use crate::geometry::{depth_from_plane, plane_center, CameraIntrinsics, LineSegment, PlaneParam};

/// Planes closer than this to the camera center are rejected.
pub const MIN_PLANE_DISTANCE: f64 = 0.3;

const WALL_TOP: f64 = 100.0;
const NEAR_Z: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Floor, two or three walls, up to `max_boxes` boxes and an optional
    /// non-planar bump.
    BoxRoom,
    /// One fronto-parallel plane at `distance` meters filling the frame.
    Frontal { distance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    pub layout: Layout,
    /// Planes beyond this count (smallest first) are relabeled non-plane.
    pub max_planes: usize,
    pub max_boxes: usize,
    /// Probability that a scene contains a smooth non-planar bump.
    pub bump_probability: f64,
    /// Planes covering less than this fraction of the image become non-plane.
    pub min_plane_fraction: f64,
    pub min_segment_length: f64,
    /// Standard deviation (pixels) of Gaussian endpoint jitter.
    pub line_noise: f64,
    pub image_noise: f64,
    /// Adds a sinusoidal albedo texture in plane coordinates.
    pub texture: bool,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 192,
            focal_scale: 0.9,
            layout: Layout::BoxRoom,
            max_planes: 10,
            max_boxes: 3,
            bump_probability: 0.3,
            min_plane_fraction: 0.01,
            min_segment_length: 8.0,
            line_noise: 0.0,
            image_noise: 0.02,
            texture: false,
            max_retries: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn with_size(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, SceneError> {
        let f = self.focal_scale * self.width as f64;
        CameraIntrinsics::centered(f, self.width, self.height).map_err(|e| SceneError::Config(e.to_string()))
    }

    fn validate(&self) -> Result<(), SceneError> {
        if self.width < 64 || self.height < 48 {
            return Err(SceneError::Config(format!(
                "image size {}x{} is below the 64x48 minimum",
                self.width, self.height
            )));
        }
        if self.layout == Layout::BoxRoom && self.max_planes < 2 {
            return Err(SceneError::Config("a box room needs max_planes >= 2".into()));
        }
        if let Layout::Frontal { distance } = self.layout {
            if !(distance >= MIN_PLANE_DISTANCE) {
                return Err(SceneError::Config(format!("frontal plane distance {distance} is too close")));
            }
        }
        if !(self.focal_scale > 0.0) || self.line_noise < 0.0 || self.image_noise < 0.0 {
            return Err(SceneError::Config("negative or zero scale parameter".into()));
        }
        Ok(())
    }
}

/// Seed of scene `index` in a split generated from `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// An axis-aligned rectangle in world space: `axis` is the constant
/// coordinate (0 = X, 1 = Y, 2 = Z), `lo`/`hi` bound the two others in
/// increasing axis order.
#[derive(Debug, Clone, Copy)]
struct Face {
    axis: usize,
    value: f64,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Face {
    fn other_axes(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    fn corners(&self) -> [Vector3<f64>; 4] {
        let [a, b] = self.other_axes();
        let mk = |u: f64, v: f64| {
            let mut p = Vector3::zeros();
            p[self.axis] = self.value;
            p[a] = u;
            p[b] = v;
            p
        };
        [
            mk(self.lo[0], self.lo[1]),
            mk(self.hi[0], self.lo[1]),
            mk(self.hi[0], self.hi[1]),
            mk(self.lo[0], self.hi[1]),
        ]
    }

    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let d = dir[self.axis];
        if d.abs() < 1e-12 {
            return None;
        }
        let t = (self.value - origin[self.axis]) / d;
        if t <= 1e-9 {
            return None;
        }
        let p = origin + dir * t;
        let [a, b] = self.other_axes();
        let inside = p[a] >= self.lo[0] && p[a] <= self.hi[0] && p[b] >= self.lo[1] && p[b] <= self.hi[1];
        inside.then_some(t)
    }
}

struct Sphere {
    center: Vector3<f64>,
    radius: f64,
}

impl Sphere {
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let oc = origin - self.center;
        let a = dir.dot(dir);
        let b = 2.0 * oc.dot(dir);
        let c = oc.dot(&oc) - self.radius * self.radius;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let t = (-b - disc.sqrt()) / (2.0 * a);
        (t > 1e-9).then_some(t)
    }
}

struct Camera {
    center: Vector3<f64>,
    /// world → camera rotation (rows: right, down, forward)
    rot: Matrix3<f64>,
}

impl Camera {
    fn new(height: f64, yaw: f64, pitch: f64) -> Self {
        let forward = Vector3::new(yaw.sin() * pitch.cos(), -pitch.sin(), yaw.cos() * pitch.cos());
        let right = Vector3::new(yaw.cos(), 0.0, -yaw.sin());
        let down = right.cross(&forward);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            center: Vector3::new(0.0, height, 0.0),
            rot,
        }
    }

    fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * (p - self.center)
    }

    fn world_dir(&self, cam_dir: &Vector3<f64>) -> Vector3<f64> {
        self.rot.transpose() * cam_dir
    }

    /// Camera-frame plane parameter of a world face, with its distance.
    fn plane_of(&self, face: &Face) -> (PlaneParam, f64) {
        let mut nw = Vector3::zeros();
        nw[face.axis] = 1.0;
        let offset = face.value - nw.dot(&self.center);
        let nc = self.rot * nw;
        let n = nc / offset;
        (PlaneParam([n.x, n.y, n.z]), offset.abs())
    }
}

struct World {
    camera: Camera,
    faces: Vec<Face>,
    albedo: Vec<[f64; 3]>,
    bump: Option<Sphere>,
}

fn sample_world(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> World {
    let cam_height = rng.random_range(1.2..1.7);
    let yaw = rng.random_range(-25f64..25.0).to_radians();
    let pitch = rng.random_range(5f64..20.0).to_radians();
    let camera = Camera::new(cam_height, yaw, pitch);

    let depth = rng.random_range(3.0..6.0);
    let left = -rng.random_range(1.5..3.0);
    let right = rng.random_range(1.5..3.0);
    // 3 walls, or back wall plus one side wall with the back wall running on
    let walls = rng.random_range(2..=3);
    let (has_left, has_right) = if walls == 3 {
        (true, true)
    } else if rng.random_bool(0.5) {
        (true, false)
    } else {
        (false, true)
    };
    let x_lo = if has_left { left } else { -1e3 };
    let x_hi = if has_right { right } else { 1e3 };
    let back = -10.0;

    let mut faces = vec![
        // floor
        Face {
            axis: 1,
            value: 0.0,
            lo: [x_lo, back],
            hi: [x_hi, depth],
        },
        // back wall
        Face {
            axis: 2,
            value: depth,
            lo: [x_lo, 0.0],
            hi: [x_hi, WALL_TOP],
        },
    ];
    if has_left {
        faces.push(Face {
            axis: 0,
            value: left,
            lo: [0.0, back],
            hi: [WALL_TOP, depth],
        });
    }
    if has_right {
        faces.push(Face {
            axis: 0,
            value: right,
            lo: [0.0, back],
            hi: [WALL_TOP, depth],
        });
    }

    let n_boxes = rng.random_range(0..=cfg.max_boxes);
    let mut footprints: Vec<[f64; 4]> = Vec::new();
    for _ in 0..n_boxes {
        for _attempt in 0..10 {
            let sx = rng.random_range(0.5..1.4);
            let sz = rng.random_range(0.5..1.2);
            let h = rng.random_range(0.4..1.1);
            let x0 = rng.random_range(left.max(-2.5) + 0.1..right.min(2.5) - 0.1 - sx).min(right - sx - 0.1);
            let z0 = rng.random_range(1.8..(depth - sz - 0.1).max(1.9));
            let fp = [x0, x0 + sx, z0, z0 + sz];
            let clear = footprints
                .iter()
                .all(|o| fp[1] + 0.1 < o[0] || o[1] + 0.1 < fp[0] || fp[3] + 0.1 < o[2] || o[3] + 0.1 < fp[2]);
            if !clear || fp[3] > depth - 0.05 || fp[0] < left + 0.05 || fp[1] > right - 0.05 {
                continue;
            }
            footprints.push(fp);
            faces.push(Face {
                axis: 1,
                value: h,
                lo: [fp[0], fp[2]],
                hi: [fp[1], fp[3]],
            });
            faces.push(Face {
                axis: 2,
                value: fp[2],
                lo: [fp[0], 0.0],
                hi: [fp[1], h],
            });
            faces.push(Face {
                axis: 2,
                value: fp[3],
                lo: [fp[0], 0.0],
                hi: [fp[1], h],
            });
            faces.push(Face {
                axis: 0,
                value: fp[0],
                lo: [0.0, fp[2]],
                hi: [h, fp[3]],
            });
            faces.push(Face {
                axis: 0,
                value: fp[1],
                lo: [0.0, fp[2]],
                hi: [h, fp[3]],
            });
            break;
        }
    }

    let bump = if rng.random_bool(cfg.bump_probability.clamp(0.0, 1.0)) {
        let radius = rng.random_range(0.25..0.5);
        let x = rng.random_range(left.max(-2.0) + radius..right.min(2.0) - radius);
        let z = rng.random_range(2.0..depth - radius);
        let s = Sphere {
            center: Vector3::new(x, radius, z),
            radius,
        };
        let overlaps = footprints
            .iter()
            .any(|f| x + radius > f[0] && x - radius < f[1] && z + radius > f[2] && z - radius < f[3]);
        (!overlaps).then_some(s)
    } else {
        None
    };

    let albedo = faces
        .iter()
        .map(|_| {
            [
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
            ]
        })
        .collect();
    World {
        camera,
        faces,
        albedo,
        bump,
    }
}

fn frontal_world(distance: f64) -> World {
    World {
        camera: Camera::new(0.0, 0.0, 0.0),
        faces: vec![Face {
            axis: 2,
            value: distance,
            lo: [-1e3, -1e3],
            hi: [1e3, 1e3],
        }],
        albedo: vec![[0.6, 0.5, 0.4]],
        bump: None,
    }
}

/// What the ray through a pixel hits first.
#[derive(Clone, Copy, PartialEq)]
enum Hit {
    Face(usize),
    Bump,
}

/// Generates one scene. The same `(seed, config)` always produces the same
/// scene, bit for bit.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<PlanarScene, SceneError> {
    config.validate()?;
    let k = config.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_reason = String::new();
    let attempts = config.max_retries.max(1);
    for _ in 0..attempts {
        let world = match config.layout {
            Layout::BoxRoom => sample_world(&mut rng, config),
            Layout::Frontal { distance } => frontal_world(distance),
        };
        match render(&world, &k, config, &mut rng, seed) {
            Ok(scene) => return Ok(scene),
            Err(reason) => last_reason = reason,
        }
    }
    Err(SceneError::Infeasible {
        seed,
        attempts,
        reason: last_reason,
    })
}

fn render(
    world: &World,
    k: &CameraIntrinsics,
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<PlanarScene, String> {
    let (w, h) = (k.width, k.height);
    let n = w * h;
    let cam = &world.camera;
    let planes: Vec<(PlaneParam, f64)> = world.faces.iter().map(|f| cam.plane_of(f)).collect();

    let mut hits = vec![Hit::Bump; n];
    let mut depth = vec![0.0; n];
    let mut bump_normals = vec![Vector3::zeros(); n];
    for v in 0..h {
        for u in 0..w {
            let p = v * w + u;
            let ray_c = k.ray(u as f64, v as f64);
            let dir = cam.world_dir(&ray_c);
            let mut best: Option<(f64, Hit)> = None;
            for (i, f) in world.faces.iter().enumerate() {
                if let Some(t) = f.hit(&cam.center, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, Hit::Face(i)));
                    }
                }
            }
            if let Some(s) = &world.bump {
                if let Some(t) = s.hit(&cam.center, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, Hit::Bump));
                        let q = cam.center + dir * t;
                        bump_normals[p] = cam.rot * (q - s.center).normalize();
                    }
                }
            }
            let Some((t, hit)) = best else {
                return Err(format!("pixel ({u}, {v}) sees no geometry"));
            };
            hits[p] = hit;
            // ray_c has unit z, so the ray parameter is the z-depth
            depth[p] = match hit {
                Hit::Face(i) => depth_from_plane([u as f64, v as f64], &planes[i].0, k),
                Hit::Bump => t,
            };
            if !(depth[p] > 0.0) || !depth[p].is_finite() {
                return Err(format!("invalid depth at pixel ({u}, {v})"));
            }
        }
    }

    // keep sufficiently large faces, largest first, up to max_planes
    let mut area = vec![0usize; world.faces.len()];
    for hit in &hits {
        if let Hit::Face(i) = hit {
            area[*i] += 1;
        }
    }
    let min_area = ((cfg.min_plane_fraction * n as f64).ceil() as usize).max(1);
    let mut order: Vec<usize> = (0..world.faces.len()).filter(|&i| area[i] >= min_area).collect();
    order.sort_by(|&a, &b| area[b].cmp(&area[a]).then(a.cmp(&b)));
    let max_planes = match cfg.layout {
        Layout::BoxRoom => cfg.max_planes,
        Layout::Frontal { .. } => 1,
    };
    order.truncate(max_planes);
    if cfg.layout == Layout::BoxRoom && order.len() < 2 {
        return Err(format!("only {} visible planes", order.len()));
    }
    if let Some(&i) = order.iter().find(|&&i| planes[i].1 < MIN_PLANE_DISTANCE) {
        return Err(format!("plane {i} is {:.3} m from the camera", planes[i].1));
    }
    let mut label_of = vec![0u32; world.faces.len()];
    for (rank, &i) in order.iter().enumerate() {
        label_of[i] = rank as u32 + 1;
    }
    let mask: Vec<u32> = hits
        .iter()
        .map(|hit| match hit {
            Hit::Face(i) => label_of[*i],
            Hit::Bump => 0,
        })
        .collect();
    let scene_planes: Vec<PlaneParam> = order.iter().map(|&i| planes[i].0).collect();
    let mut centers = Vec::with_capacity(order.len());
    for label in 1..=order.len() as u32 {
        let m: Vec<bool> = mask.iter().map(|&x| x == label).collect();
        centers.push(plane_center(&m, w, h).map_err(|e| e.to_string())?);
    }

    let image = shade(world, k, cfg, &hits, &depth, &bump_normals, &planes, rng);
    let mut line_segments = boundary_segments(world, k, cfg, &planes, &hits, &depth, &area);
    if cfg.line_noise > 0.0 {
        line_segments = jitter_segments(line_segments, cfg.line_noise, w, h, rng);
    }

    Ok(PlanarScene {
        width: w,
        height: h,
        image,
        depth,
        mask,
        planes: scene_planes,
        centers,
        line_segments,
        intrinsics: *k,
        seed,
    })
}

#[allow(clippy::too_many_arguments)]
fn shade(
    world: &World,
    k: &CameraIntrinsics,
    cfg: &GeneratorConfig,
    hits: &[Hit],
    depth: &[f64],
    bump_normals: &[Vector3<f64>],
    planes: &[(PlaneParam, f64)],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (w, h) = (k.width, k.height);
    let light = Vector3::new(0.3, -0.5, -1.0).normalize();
    let noise = Normal::new(0.0, cfg.image_noise.max(1e-12)).expect("finite noise scale");
    let mut image = vec![0.0; w * h * 3];
    for p in 0..w * h {
        let (u, v) = ((p % w) as f64, (p / w) as f64);
        let (albedo, normal, texture) = match hits[p] {
            Hit::Face(i) => {
                // outward normal faces the camera
                let n = -planes[i].0.unit_normal();
                let t = if cfg.texture {
                    let q = world.camera.rot.transpose() * (k.ray(u, v) * depth[p]) + world.camera.center;
                    let [a, b] = world.faces[i].other_axes();
                    let s = (q[a] * std::f64::consts::TAU / 0.5).sin() * (q[b] * std::f64::consts::TAU / 0.5).sin();
                    0.85 + 0.15 * s
                } else {
                    1.0
                };
                (world.albedo[i], n, t)
            }
            Hit::Bump => ([0.7, 0.7, 0.7], bump_normals[p], 1.0),
        };
        let lambert = normal.dot(&(-light)).max(0.0);
        let shading = 0.35 + 0.65 * lambert;
        for c in 0..3 {
            let mut value = albedo[c] * shading * texture;
            if cfg.image_noise > 0.0 {
                value += noise.sample(rng);
            }
            image[p * 3 + c] = value.clamp(0.0, 1.0);
        }
    }
    image
}

fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ina, inb) = (a.z >= NEAR_Z, b.z >= NEAR_Z);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR_Z - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

/// Sutherland–Hodgman clip of a 2D polygon to `[0, xmax] × [0, ymax]`.
fn clip_rect(poly: Vec<[f64; 2]>, xmax: f64, ymax: f64) -> Vec<[f64; 2]> {
    let edges: [(usize, f64, bool); 4] = [(0, 0.0, true), (0, xmax, false), (1, 0.0, true), (1, ymax, false)];
    let mut cur = poly;
    for (axis, bound, keep_above) in edges {
        if cur.is_empty() {
            break;
        }
        let inside = |p: &[f64; 2]| if keep_above { p[axis] >= bound } else { p[axis] <= bound };
        let mut next = Vec::new();
        for i in 0..cur.len() {
            let a = cur[i];
            let b = cur[(i + 1) % cur.len()];
            let (ia, ib) = (inside(&a), inside(&b));
            if ia {
                next.push(a);
            }
            if ia != ib {
                let t = (bound - a[axis]) / (b[axis] - a[axis]);
                let mut p = [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t];
                p[axis] = bound;
                next.push(p);
            }
        }
        cur = next;
    }
    cur
}

/// Projected boundary edges of every visible face, split into visible runs.
fn boundary_segments(
    world: &World,
    k: &CameraIntrinsics,
    cfg: &GeneratorConfig,
    planes: &[(PlaneParam, f64)],
    hits: &[Hit],
    depth: &[f64],
    area: &[usize],
) -> Vec<LineSegment> {
    let (w, h) = (k.width, k.height);
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let depth_at = |x: usize, y: usize| depth[y * w + x];
    let visible = |p: [f64; 2], plane: &PlaneParam, face: usize| {
        let z = depth_from_plane(p, plane, k);
        if !(z > 0.0) {
            return false;
        }
        let (x0, y0) = (p[0].floor() as usize, p[1].floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
            .iter()
            .any(|&(x, y)| hits[y * w + x] == Hit::Face(face) || depth_at(x, y) >= z * 0.99 - 1e-6)
    };

    let mut segments: Vec<LineSegment> = Vec::new();
    for (fi, face) in world.faces.iter().enumerate() {
        if area[fi] == 0 {
            continue;
        }
        let cam_poly: Vec<Vector3<f64>> = face.corners().iter().map(|c| world.camera.to_camera(c)).collect();
        let near = clip_near(&cam_poly);
        if near.len() < 3 {
            continue;
        }
        let projected: Vec<[f64; 2]> = near.iter().map(|p| k.project(p)).collect();
        let poly = clip_rect(projected, xmax, ymax);
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if len < cfg.min_segment_length {
                continue;
            }
            let steps = (len * 2.0).ceil() as usize;
            let mut run_start: Option<[f64; 2]> = None;
            let mut last_visible = a;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let p = [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t];
                if visible(p, &planes[fi].0, fi) {
                    if run_start.is_none() {
                        run_start = Some(p);
                    }
                    last_visible = p;
                } else if let Some(start) = run_start.take() {
                    push_segment(&mut segments, start, last_visible, cfg.min_segment_length);
                }
            }
            if let Some(start) = run_start {
                push_segment(&mut segments, start, last_visible, cfg.min_segment_length);
            }
        }
    }
    segments
}

fn push_segment(segments: &mut Vec<LineSegment>, a: [f64; 2], b: [f64; 2], min_len: f64) {
    let seg = LineSegment::new(a, b);
    if seg.length() < min_len {
        return;
    }
    let close = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).hypot(p[1] - q[1]) <= 1.0;
    let duplicate = segments
        .iter()
        .any(|s| (close(s.x1, a) && close(s.x2, b)) || (close(s.x1, b) && close(s.x2, a)));
    if !duplicate {
        segments.push(seg);
    }
}

/// Gaussian endpoint jitter with standard deviation `sigma` pixels,
/// clamped to the image; segments that collapse to a point are dropped.
pub fn jitter_lines(segments: &[LineSegment], sigma: f64, width: usize, height: usize, seed: u64) -> Vec<LineSegment> {
    if sigma <= 0.0 {
        return segments.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jitter_segments(segments.to_vec(), sigma, width, height, &mut rng)
}

fn jitter_segments(
    segments: Vec<LineSegment>,
    sigma: f64,
    w: usize,
    h: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<LineSegment> {
    let normal = Normal::new(0.0, sigma).expect("finite line noise");
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    segments
        .into_iter()
        .filter_map(|s| {
            let mut j = |p: [f64; 2]| {
                [
                    (p[0] + normal.sample(rng)).clamp(0.0, xmax),
                    (p[1] + normal.sample(rng)).clamp(0.0, ymax),
                ]
            };
            let seg = LineSegment::new(j(s.x1), j(s.x2));
            (seg.x1 != seg.x2).then_some(seg)
        })
        .collect()
}
