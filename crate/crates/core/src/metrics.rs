//! Plane/pixel recall, segmentation quality (VI, RI, SC) and depth accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_deg, depth_from_plane, is_valid_depth, PlaneParam};
use crate::scene::PlanarScene;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("size mismatch: {0}")]
    Size(String),
    #[error("no valid pixels")]
    Empty,
    #[error("non-positive depth {value} at pixel {pixel}")]
    NonPositiveDepth { pixel: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// Mean absolute depth difference over the intersection, meters.
    Depth,
    /// Angle between unit normals, degrees.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchProtocol {
    /// One-to-one, pairs taken by descending IOU.
    #[default]
    Greedy,
    /// Each GT plane takes its best-IOU prediction; predictions may repeat.
    BestPerGt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelDenominator {
    #[default]
    PlanePixels,
    AllPixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecallOptions {
    pub protocol: MatchProtocol,
    pub pixel_denominator: PixelDenominator,
}

pub const IOU_GATE: f64 = 0.5;

/// Depth thresholds 0, 0.05, ..., 0.60 m.
pub fn depth_thresholds() -> Vec<f64> {
    (0..=12).map(|i| i as f64 * 0.05).collect()
}

pub fn normal_thresholds() -> Vec<f64> {
    vec![5.0, 30.0]
}

/// Per-scene recall counts; curves over many scenes are formed by summing
/// counts before dividing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCounts {
    pub thresholds: Vec<f64>,
    pub correct_planes: Vec<usize>,
    pub covered_pixels: Vec<usize>,
    pub total_planes: usize,
    pub total_pixels: usize,
}

impl RecallCounts {
    pub fn add(&mut self, other: &RecallCounts) {
        assert_eq!(self.thresholds, other.thresholds, "threshold lists differ");
        for (a, b) in self.correct_planes.iter_mut().zip(&other.correct_planes) {
            *a += b;
        }
        for (a, b) in self.covered_pixels.iter_mut().zip(&other.covered_pixels) {
            *a += b;
        }
        self.total_planes += other.total_planes;
        self.total_pixels += other.total_pixels;
    }

    pub fn curve(&self) -> RecallCurve {
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        RecallCurve {
            thresholds: self.thresholds.clone(),
            plane_recall: self.correct_planes.iter().map(|&c| frac(c, self.total_planes)).collect(),
            pixel_recall: self.covered_pixels.iter().map(|&c| frac(c, self.total_pixels)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub thresholds: Vec<f64>,
    pub plane_recall: Vec<f64>,
    pub pixel_recall: Vec<f64>,
}

impl RecallCurve {
    /// Plane recall at the given threshold, if it is on the curve.
    pub fn plane_at(&self, t: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map(|i| self.plane_recall[i])
    }
}

/// One matched GT plane: prediction index (0-based), IOU, intersection size
/// and geometric error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneMatch {
    pub gt: usize,
    pub pred: usize,
    pub iou: f64,
    pub intersection: usize,
    pub error: f64,
}

fn label_sizes(mask: &[u32], n_labels: usize) -> Vec<usize> {
    let mut out = vec![0; n_labels + 1];
    for &m in mask {
        out[m as usize] += 1;
    }
    out
}

/// IOU-gated one-to-one matches between GT planes and predicted planes.
pub fn match_planes(
    pred_mask: &[u32],
    pred_planes: &[PlaneParam],
    gt: &PlanarScene,
    mode: RecallMode,
    protocol: MatchProtocol,
) -> Vec<PlaneMatch> {
    let (m, p) = (gt.num_planes(), pred_planes.len());
    let mut inter = vec![0usize; m * p];
    for (&g, &q) in gt.mask.iter().zip(pred_mask) {
        if g > 0 && q > 0 {
            inter[(g as usize - 1) * p + q as usize - 1] += 1;
        }
    }
    let gs = label_sizes(&gt.mask, m);
    let ps = label_sizes(pred_mask, p);
    let iou = |i: usize, j: usize| {
        let x = inter[i * p + j];
        x as f64 / (gs[i + 1] + ps[j + 1] - x) as f64
    };
    let mut pairs: Vec<(usize, usize)> = match protocol {
        MatchProtocol::Greedy => {
            let mut all: Vec<(usize, usize)> =
                (0..m).flat_map(|i| (0..p).map(move |j| (i, j))).filter(|&(i, j)| inter[i * p + j] > 0).collect();
            all.sort_by(|a, b| iou(b.0, b.1).total_cmp(&iou(a.0, a.1)).then(a.cmp(b)));
            let mut gt_used = vec![false; m];
            let mut pred_used = vec![false; p];
            let mut out = Vec::new();
            for (i, j) in all {
                if !gt_used[i] && !pred_used[j] {
                    gt_used[i] = true;
                    pred_used[j] = true;
                    out.push((i, j));
                }
            }
            out
        }
        MatchProtocol::BestPerGt => (0..m)
            .filter_map(|i| {
                (0..p)
                    .filter(|&j| inter[i * p + j] > 0)
                    .max_by(|&a, &b| iou(i, a).total_cmp(&iou(i, b)).then(b.cmp(&a)))
                    .map(|j| (i, j))
            })
            .collect(),
    };
    pairs.retain(|&(i, j)| iou(i, j) > IOU_GATE);
    pairs.sort();
    pairs
        .into_iter()
        .map(|(i, j)| {
            let error = match mode {
                RecallMode::Depth => {
                    let (gi, pj) = (i as u32 + 1, j as u32 + 1);
                    let mut sum = 0.0;
                    for (px, (&g, &q)) in gt.mask.iter().zip(pred_mask).enumerate() {
                        if g == gi && q == pj {
                            let uv = [(px % gt.width) as f64, (px / gt.width) as f64];
                            let z = depth_from_plane(uv, &pred_planes[j], &gt.intrinsics);
                            sum += if is_valid_depth(z) { (z - gt.depth[px]).abs() } else { f64::INFINITY };
                        }
                    }
                    sum / inter[i * p + j] as f64
                }
                RecallMode::Normal => angle_deg(&pred_planes[j].unit_normal(), &gt.planes[i].unit_normal()),
            };
            PlaneMatch {
                gt: i,
                pred: j,
                iou: iou(i, j),
                intersection: inter[i * p + j],
                error,
            }
        })
        .collect()
}

/// Recall counts of one scene, or `None` when the scene has no GT planes.
pub fn plane_pixel_recall(
    pred_mask: &[u32],
    pred_planes: &[PlaneParam],
    gt: &PlanarScene,
    thresholds: &[f64],
    mode: RecallMode,
    options: RecallOptions,
) -> Result<Option<RecallCounts>, MetricError> {
    if pred_mask.len() != gt.mask.len() {
        return Err(MetricError::Size(format!("{} vs {} pixels", pred_mask.len(), gt.mask.len())));
    }
    if let Some(&bad) = pred_mask.iter().find(|&&q| q as usize > pred_planes.len()) {
        return Err(MetricError::Size(format!("mask label {bad} without a plane")));
    }
    if gt.num_planes() == 0 {
        return Ok(None);
    }
    let matches = match_planes(pred_mask, pred_planes, gt, mode, options.protocol);
    let total_pixels = match options.pixel_denominator {
        PixelDenominator::PlanePixels => gt.mask.iter().filter(|&&g| g > 0).count(),
        PixelDenominator::AllPixels => gt.mask.len(),
    };
    let mut counts = RecallCounts {
        thresholds: thresholds.to_vec(),
        correct_planes: vec![0; thresholds.len()],
        covered_pixels: vec![0; thresholds.len()],
        total_planes: gt.num_planes(),
        total_pixels,
    };
    for (t, &thr) in thresholds.iter().enumerate() {
        for m in matches.iter().filter(|m| m.error < thr) {
            counts.correct_planes[t] += 1;
            counts.covered_pixels[t] += m.intersection;
        }
    }
    Ok(Some(counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub vi: f64,
    pub ri: f64,
    pub sc: f64,
}

fn pairs(n: usize) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// VI (nats), RI and SC between two label maps. Every label, including 0,
/// is its own segment.
pub fn seg_scores(pred: &[u32], gt: &[u32]) -> Result<SegScores, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Size(format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = gt.len();
    let mut joint: HashMap<(u32, u32), usize> = HashMap::new();
    let mut a: HashMap<u32, usize> = HashMap::new();
    let mut b: HashMap<u32, usize> = HashMap::new();
    for (&s, &g) in pred.iter().zip(gt) {
        *joint.entry((s, g)).or_default() += 1;
        *a.entry(s).or_default() += 1;
        *b.entry(g).or_default() += 1;
    }
    let mut joint: Vec<((u32, u32), usize)> = joint.into_iter().collect();
    joint.sort();
    let mut a: Vec<(u32, usize)> = a.into_iter().collect();
    a.sort();
    let mut b: Vec<(u32, usize)> = b.into_iter().collect();
    b.sort();
    let total = pairs(n);
    let ri = if total == 0 {
        1.0
    } else {
        let same_both: u128 = joint.iter().map(|&(_, c)| pairs(c)).sum();
        let same_a: u128 = a.iter().map(|&(_, c)| pairs(c)).sum();
        let same_b: u128 = b.iter().map(|&(_, c)| pairs(c)).sum();
        // agreements = pairs together in both + pairs apart in both
        let agree = total + 2 * same_both - same_a - same_b;
        agree as f64 / total as f64
    };
    let nf = n as f64;
    let entropy = |counts: &mut dyn Iterator<Item = usize>| -> f64 {
        counts
            .map(|c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let ha = entropy(&mut a.iter().map(|x| x.1));
    let hb = entropy(&mut b.iter().map(|x| x.1));
    let hab = entropy(&mut joint.iter().map(|x| x.1));
    let vi = (2.0 * hab - ha - hb).max(0.0);
    let a_size: HashMap<u32, usize> = a.iter().copied().collect();
    let mut sc = 0.0;
    for &(g, size) in &b {
        let best = joint
            .iter()
            .filter(|((_, jg), _)| *jg == g)
            .map(|&((s, _), x)| x as f64 / (size + a_size[&s] - x) as f64)
            .fold(0.0, f64::max);
        sc += size as f64 * best;
    }
    Ok(SegScores { vi, ri, sc: sc / nf })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthScores {
    pub rel: f64,
    pub log10: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Standard depth accuracy over pixels where `valid` is set.
pub fn depth_scores(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<DepthScores, MetricError> {
    if pred.len() != gt.len() || valid.len() != gt.len() {
        return Err(MetricError::Size(format!("{} / {} / {}", pred.len(), gt.len(), valid.len())));
    }
    let (mut rel, mut lg, mut sq, mut count) = (0.0, 0.0, 0.0, 0usize);
    let mut deltas = [0usize; 3];
    for (i, ((&p, &g), _)) in pred.iter().zip(gt).zip(valid).enumerate().filter(|(_, (_, &v))| v) {
        for value in [p, g] {
            if !(value > 0.0) {
                return Err(MetricError::NonPositiveDepth { pixel: i, value });
            }
        }
        rel += (p - g).abs() / g;
        lg += (p.log10() - g.log10()).abs();
        sq += (p - g) * (p - g);
        let (lo, hi) = if p < g { (p, g) } else { (g, p) };
        for (k, d) in deltas.iter_mut().enumerate() {
            if hi < 1.25f64.powi(k as i32 + 1) * lo {
                *d += 1;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::Empty);
    }
    let c = count as f64;
    Ok(DepthScores {
        rel: rel / c,
        log10: lg / c,
        rmse: (sq / c).sqrt(),
        delta1: deltas[0] as f64 / c,
        delta2: deltas[1] as f64 / c,
        delta3: deltas[2] as f64 / c,
    })
}
