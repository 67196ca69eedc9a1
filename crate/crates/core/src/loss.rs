//! Matched training objective.
//!
//! Predictions are matched to padded ground truth per image; the total is
//! `cls + param + center_inst + λ (pull + push) + depth + center_pix +
//! aux_weight · aux`, where `aux` sums `cls + param + center_inst` over the
//! intermediate decoder outputs, each matched on its own.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Var;
use crate::geometry::{backproject, is_valid_depth, PlaneParam};
use crate::matching::{cost_matrix, pad_ground_truth, solve_matching, GtSlot, MatchError, MatchResult, PredictedSlot};
use crate::model::{ModelOutput, Prediction, PLANE_CLASS};
use crate::scene::PlanarScene;
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-12;
const COS_EPS: f64 = 1e-8;

/// How per-plane and per-pixel sums are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Sums over planes, pixels and points become means.
    Mean,
    /// Literal sums.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Center weight in the matching cost.
    pub omega: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Pull margin.
    pub delta1: f64,
    /// Push margin.
    pub delta2: f64,
    /// Weight of pull + push.
    pub lambda: f64,
    /// Weight of the intermediate-layer terms.
    pub aux_weight: f64,
    /// Maximum number of sampled 3D points per plane.
    pub plane_point_cap: usize,
    pub normalization: LossNormalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            omega: 2.0,
            beta1: 5.0,
            beta2: 2.0,
            delta1: 0.5,
            delta2: 1.5,
            lambda: 5.0,
            aux_weight: 0.1,
            plane_point_cap: 512,
            normalization: LossNormalization::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let weights = [self.omega, self.beta1, self.beta2, self.delta1, self.delta2, self.lambda];
        if weights.iter().any(|w| !(*w > 0.0)) || !(self.aux_weight >= 0.0) {
            return Err(LossError::Config("loss weights and margins must be positive".into()));
        }
        if self.delta2 <= self.delta1 {
            return Err(LossError::Config("push margin must exceed pull margin".into()));
        }
        if self.plane_point_cap == 0 {
            return Err(LossError::Config("plane_point_cap must be positive".into()));
        }
        Ok(())
    }

    fn reduce(&self, count: usize) -> f64 {
        match self.normalization {
            LossNormalization::Mean if count > 0 => 1.0 / count as f64,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("loss component {component} is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
    #[error("pixel outputs are required for the dense losses")]
    MissingPixels,
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub param: f64,
    pub center_inst: f64,
    pub pull: f64,
    pub push: f64,
    pub depth: f64,
    pub center_pix: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 9] {
        [
            ("cls", self.cls),
            ("param", self.param),
            ("center_inst", self.center_inst),
            ("pull", self.pull),
            ("push", self.push),
            ("depth", self.depth),
            ("center_pix", self.center_pix),
            ("aux", self.aux),
            ("total", self.total),
        ]
    }

    pub fn check_finite(&self) -> Result<(), LossError> {
        for (component, value) in self.components() {
            if !value.is_finite() {
                return Err(LossError::NonFinite { component, value });
            }
        }
        Ok(())
    }

    /// Componentwise `self + other * weight`.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.cls += other.cls * weight;
        self.param += other.param * weight;
        self.center_inst += other.center_inst * weight;
        self.pull += other.pull * weight;
        self.push += other.push * weight;
        self.depth += other.depth * weight;
        self.center_pix += other.center_pix * weight;
        self.aux += other.aux * weight;
        self.total += other.total * weight;
    }
}

/// Ground truth of one scene in the form the losses consume.
#[derive(Debug, Clone)]
pub struct SceneTargets {
    pub width: usize,
    pub height: usize,
    pub slots: Vec<GtSlot>,
    pub planes: Vec<PlaneParam>,
    pub centers: Vec<[f64; 2]>,
    /// Pixel indices of each plane.
    pub plane_pixels: Vec<Vec<usize>>,
    /// Sampled 3D points of each plane, as `[3, n_i]`.
    pub plane_points: Vec<Tensor>,
    pub depth: Vec<f64>,
}

impl SceneTargets {
    /// `sample_seed` drives the subsampling of plane points.
    pub fn new(scene: &PlanarScene, queries: usize, cap: usize, sample_seed: u64) -> Result<Self, LossError> {
        let slots = pad_ground_truth(&scene.planes, &scene.centers, queries)?;
        let plane_pixels = scene.plane_pixels();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let plane_points = plane_pixels
            .iter()
            .map(|pixels| {
                let chosen: Vec<usize> = if pixels.len() > cap {
                    let mut idx = sample(&mut rng, pixels.len(), cap).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| pixels[i]).collect()
                } else {
                    pixels.clone()
                };
                let pts: Vec<_> = chosen
                    .iter()
                    .filter(|&&p| is_valid_depth(scene.depth[p]))
                    .filter_map(|&p| {
                        let px = [(p % scene.width) as f64, (p / scene.width) as f64];
                        backproject(px, scene.depth[p], &scene.intrinsics).ok()
                    })
                    .collect();
                let n = pts.len();
                let mut data = vec![0.0; 3 * n];
                for (j, q) in pts.iter().enumerate() {
                    for r in 0..3 {
                        data[r * n + j] = q[r];
                    }
                }
                Tensor::new([3, n], data)
            })
            .collect();
        Ok(Self {
            width: scene.width,
            height: scene.height,
            slots,
            planes: scene.planes.clone(),
            centers: scene.centers.clone(),
            plane_pixels,
            plane_points,
            depth: scene.depth.clone(),
        })
    }

    pub fn num_planes(&self) -> usize {
        self.planes.len()
    }
}

fn predicted_slots(pred: &Prediction<'_>) -> Vec<PredictedSlot> {
    let probs = pred.probs.value();
    let params = pred.params.value();
    let centers = pred.centers.map(|c| c.value());
    (0..probs.rows())
        .map(|i| PredictedSlot {
            prob_plane: probs.at(i, PLANE_CLASS),
            param: [params.at(i, 0), params.at(i, 1), params.at(i, 2)],
            center: centers.as_ref().map(|c| [c.at(i, 0), c.at(i, 1)]),
        })
        .collect()
}

pub fn match_prediction(pred: &Prediction<'_>, targets: &SceneTargets, cfg: &LossConfig) -> Result<MatchResult, LossError> {
    let cost = cost_matrix(&targets.slots, &predicted_slots(pred), cfg.omega);
    Ok(solve_matching(&cost)?)
}

/// Mean over all `K` slots of `-log p(matched class)`.
pub fn classification_loss<'t>(probs: Var<'t>, sigma: &[usize], slots: &[GtSlot]) -> Var<'t> {
    let idx = slots
        .iter()
        .zip(sigma)
        .map(|(slot, &j)| {
            let class = if slot.is_plane() { PLANE_CLASS } else { 1 - PLANE_CLASS };
            j * 2 + class
        })
        .collect();
    -probs.gather(idx).clamp_min(PROB_FLOOR).ln().mean()
}

/// Per matched plane: `L1(n̂, n) + β1 (1 − cos(n̂, n)) + β2 · mean_q |nᵀq − 1|`,
/// reduced over planes.
pub fn plane_param_loss<'t>(params: Var<'t>, sigma: &[usize], targets: &SceneTargets, cfg: &LossConfig) -> Var<'t> {
    let tape = params.tape();
    let m = targets.num_planes();
    if m == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let pred = params.gather_rows(sigma[..m].to_vec());
    let gt_data: Vec<f64> = targets.planes.iter().flat_map(|p| p.0).collect();
    let gt = tape.constant(Tensor::new([m, 3], gt_data));
    let l1 = (pred - gt).abs().sum();

    let dot = (pred * gt).row_sum();
    let gt_norm = tape.constant(Tensor::new([m], targets.planes.iter().map(PlaneParam::norm).collect()));
    let denom = (pred.row_norm() * gt_norm).clamp_min(COS_EPS);
    let cos = dot.div(denom);
    let one_minus_cos = (-cos).add_scalar(1.0).sum();

    // all points against all predicted planes, then keep each plane's block
    let total: usize = targets.plane_points.iter().map(Tensor::cols).sum();
    let mut pts = vec![0.0; 3 * total];
    let mut idx = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut offset = 0;
    for (i, q) in targets.plane_points.iter().enumerate() {
        let n = q.cols();
        for r in 0..3 {
            pts[r * total + offset..r * total + offset + n].copy_from_slice(&q.data()[r * n..(r + 1) * n]);
        }
        idx.extend((0..n).map(|j| i * total + offset + j));
        weights.extend(std::iter::repeat_n(cfg.reduce(n), n));
        offset += n;
    }
    let point_term = if total > 0 {
        let residual = pred.matmul(tape.constant(Tensor::new([3, total], pts))).gather(idx);
        (residual.add_scalar(-1.0).abs() * tape.constant(Tensor::new([total], weights))).sum()
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    (l1 + one_minus_cos.scale(cfg.beta1) + point_term.scale(cfg.beta2)).scale(cfg.reduce(m))
}

/// Mean Euclidean distance between matched and ground-truth centers.
pub fn center_instance_loss<'t>(centers: Var<'t>, sigma: &[usize], targets: &SceneTargets, cfg: &LossConfig) -> Var<'t> {
    let tape = centers.tape();
    let m = targets.num_planes();
    if m == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let gt = tape.constant(Tensor::new([m, 2], targets.centers.iter().flatten().copied().collect()));
    (centers.gather_rows(sigma[..m].to_vec()) - gt)
        .row_norm()
        .sum()
        .scale(cfg.reduce(m))
}

/// Pull and push terms of the associative embedding loss. `embed_map` is
/// `[ε, H * W]`.
pub fn embedding_loss<'t>(
    embeds: Var<'t>,
    embed_map: Var<'t>,
    sigma: &[usize],
    targets: &SceneTargets,
    cfg: &LossConfig,
) -> (Var<'t>, Var<'t>) {
    let tape = embeds.tape();
    let m = targets.num_planes();
    let zero = || tape.constant(Tensor::scalar(0.0));
    let planes: Vec<usize> = (0..m).filter(|&i| !targets.plane_pixels[i].is_empty()).collect();
    let pull = if planes.is_empty() {
        zero()
    } else {
        let mut pixels = Vec::new();
        let mut owners = Vec::new();
        let mut weights = Vec::new();
        for &i in &planes {
            let g = &targets.plane_pixels[i];
            pixels.extend_from_slice(g);
            owners.extend(std::iter::repeat_n(sigma[i], g.len()));
            weights.extend(std::iter::repeat_n(cfg.reduce(g.len()), g.len()));
        }
        let n = pixels.len();
        let pix = embed_map.transpose().gather_rows(pixels);
        let inst = embeds.gather_rows(owners);
        let hinge = (pix - inst).row_norm().add_scalar(-cfg.delta1).relu();
        (hinge * tape.constant(Tensor::new([n], weights))).sum().scale(cfg.reduce(m))
    };
    let push = if m < 2 {
        zero()
    } else {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    a.push(sigma[i]);
                    b.push(sigma[j]);
                }
            }
        }
        let d = (embeds.gather_rows(a) - embeds.gather_rows(b)).row_norm();
        (-d).add_scalar(cfg.delta2).relu().sum().scale(cfg.reduce(m))
    };
    (pull, push)
}

/// Mean absolute depth error over valid ground-truth pixels. `depth_map`
/// is `[1, H * W]`. Returns `None` when no pixel has valid depth.
pub fn depth_loss<'t>(depth_map: Var<'t>, targets: &SceneTargets, cfg: &LossConfig) -> Option<Var<'t>> {
    let valid: Vec<usize> = (0..targets.depth.len()).filter(|&p| is_valid_depth(targets.depth[p])).collect();
    if valid.is_empty() {
        return None;
    }
    let gt = depth_map
        .tape()
        .constant(Tensor::new([valid.len()], valid.iter().map(|&p| targets.depth[p]).collect()));
    let n = valid.len();
    Some((depth_map.gather(valid) - gt).abs().sum().scale(cfg.reduce(n)))
}

/// Mean Euclidean distance between the center map and each planar pixel's
/// plane center. `center_map` is `[2, H * W]`.
pub fn center_pixel_loss<'t>(center_map: Var<'t>, targets: &SceneTargets, cfg: &LossConfig) -> Var<'t> {
    let tape = center_map.tape();
    let mut pixels = Vec::new();
    let mut gt = Vec::new();
    for (i, g) in targets.plane_pixels.iter().enumerate() {
        pixels.extend_from_slice(g);
        for _ in g {
            gt.extend_from_slice(&targets.centers[i]);
        }
    }
    if pixels.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let n = pixels.len();
    let gt = tape.constant(Tensor::new([n, 2], gt));
    (center_map.transpose().gather_rows(pixels) - gt)
        .row_norm()
        .sum()
        .scale(cfg.reduce(n))
}

/// Matched instance-level terms of one prediction set.
struct InstanceTerms<'t> {
    cls: Var<'t>,
    param: Var<'t>,
    center: Option<Var<'t>>,
    sigma: Vec<usize>,
}

fn instance_terms<'t>(pred: &Prediction<'t>, targets: &SceneTargets, cfg: &LossConfig) -> Result<InstanceTerms<'t>, LossError> {
    let m = match_prediction(pred, targets, cfg)?;
    Ok(InstanceTerms {
        cls: classification_loss(pred.probs, &m.sigma, &targets.slots),
        param: plane_param_loss(pred.params, &m.sigma, targets, cfg),
        center: pred.centers.map(|c| center_instance_loss(c, &m.sigma, targets, cfg)),
        sigma: m.sigma,
    })
}

/// Full objective of one image. `no_valid_depth` flags an image whose depth
/// term was skipped.
pub struct SceneLoss<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    pub sigma: Vec<usize>,
    pub no_valid_depth: bool,
}

pub fn scene_loss<'t>(out: &ModelOutput<'t>, targets: &SceneTargets, cfg: &LossConfig) -> Result<SceneLoss<'t>, LossError> {
    let pixels = out.pixels.ok_or(LossError::MissingPixels)?;
    let main = instance_terms(&out.main, targets, cfg)?;
    let (pull, push) = embedding_loss(out.main.embeds, pixels.embed, &main.sigma, targets, cfg);
    let depth = depth_loss(pixels.depth, targets, cfg);
    let center_pix = pixels.center.map(|c| center_pixel_loss(c, targets, cfg));

    let mut total = main.cls + main.param + (pull + push).scale(cfg.lambda);
    if let Some(c) = main.center {
        total = total + c;
    }
    if let Some(d) = depth {
        total = total + d;
    }
    if let Some(c) = center_pix {
        total = total + c;
    }
    let mut aux_value = 0.0;
    if cfg.aux_weight > 0.0 && !out.aux.is_empty() {
        let mut aux_sum: Option<Var<'t>> = None;
        for pred in &out.aux {
            let t = instance_terms(pred, targets, cfg)?;
            let mut term = t.cls + t.param;
            if let Some(c) = t.center {
                term = term + c;
            }
            aux_sum = Some(match aux_sum {
                Some(s) => s + term,
                None => term,
            });
        }
        let aux = aux_sum.expect("non-empty aux");
        aux_value = aux.item();
        total = total + aux.scale(cfg.aux_weight);
    }
    let breakdown = LossBreakdown {
        cls: main.cls.item(),
        param: main.param.item(),
        center_inst: main.center.map_or(0.0, |v| v.item()),
        pull: pull.item(),
        push: push.item(),
        depth: depth.map_or(0.0, |v| v.item()),
        center_pix: center_pix.map_or(0.0, |v| v.item()),
        aux: aux_value,
        total: total.item(),
    };
    breakdown.check_finite()?;
    Ok(SceneLoss {
        total,
        breakdown,
        sigma: main.sigma,
        no_valid_depth: depth.is_none(),
    })
}

#[cfg(test)]
mod tests;
