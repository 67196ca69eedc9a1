use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_err, io_err, HarnessError};
use crate::geometry::is_valid_depth;
use crate::metrics::{
    depth_scores, depth_thresholds, normal_thresholds, plane_pixel_recall, seg_scores, DepthScores, RecallCounts,
    RecallCurve, RecallMode, RecallOptions, SegScores,
};
use crate::model::{ModelConfig, ModelInput, PlaneFormer};
use crate::scene::PlanarScene;
use crate::segmentation::{segment, KeptInstance, SegmentationResult, DEFAULT_THRESHOLD};

/// Depth threshold of the headline plane recall, meters.
pub const HEADLINE_DEPTH: f64 = 0.6;

/// Anything that turns a scene into a segmentation.
pub trait Predictor {
    fn predict(&self, scene: &PlanarScene) -> Result<SegmentationResult, HarnessError>;
}

pub struct ModelPredictor<'m> {
    pub model: &'m PlaneFormer,
    /// `false` feeds an empty line sequence.
    pub use_lines: bool,
    pub threshold: f64,
}

impl<'m> ModelPredictor<'m> {
    pub fn new(model: &'m PlaneFormer, use_lines: bool) -> Self {
        Self {
            model,
            use_lines,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, scene: &PlanarScene) -> Result<SegmentationResult, HarnessError> {
        let image = scene.image_chw();
        let inf = self.model.predict(&ModelInput::from_scene(scene, &image), self.use_lines)?;
        Ok(segment(&inf.instances, &inf.pixels, &scene.intrinsics, self.threshold))
    }
}

/// Returns the ground truth itself; an oracle for the evaluation pipeline.
pub struct GroundTruthPredictor;

impl Predictor for GroundTruthPredictor {
    fn predict(&self, scene: &PlanarScene) -> Result<SegmentationResult, HarnessError> {
        let kept = scene
            .planes
            .iter()
            .enumerate()
            .map(|(i, &param)| KeptInstance {
                slot: i,
                prob: 1.0,
                param,
                embedding: Vec::new(),
            })
            .collect();
        Ok(SegmentationResult {
            width: scene.width,
            height: scene.height,
            mask: scene.mask.clone(),
            kept,
            assembled_depth: scene.depth.clone(),
            fallback_pixels: 0,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub recall: RecallOptions,
    /// Free-form tag copied into the report.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub gt_planes: usize,
    pub pred_planes: usize,
    /// `None` when the scene has no ground-truth planes.
    pub depth_recall: Option<RecallCounts>,
    pub normal_recall: Option<RecallCounts>,
    pub seg: SegScores,
    pub depth: Option<DepthScores>,
    pub fallback_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub label: String,
    pub scenes: usize,
    /// Scenes without ground-truth planes, left out of the recall curves.
    pub skipped: usize,
    pub depth_curve: RecallCurve,
    pub normal_curve: RecallCurve,
    pub vi: f64,
    pub ri: f64,
    pub sc: f64,
    pub depth: Option<DepthScores>,
    pub fallback_pixels: usize,
}

impl EvalSummary {
    pub fn plane_recall_at_depth(&self, t: f64) -> f64 {
        self.depth_curve.plane_at(t).unwrap_or(f64::NAN)
    }

    /// `(plane recall @0.6 m, RI, SC)`; larger is better for each.
    pub fn headline(&self) -> [f64; 3] {
        [self.plane_recall_at_depth(HEADLINE_DEPTH), self.ri, self.sc]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<SceneRecord>,
    pub summary: EvalSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Scene(SceneRecord),
    Summary(EvalSummary),
}

fn mean_of<T>(items: &[T], f: impl Fn(&T) -> f64) -> f64 {
    items.iter().map(f).sum::<f64>() / items.len().max(1) as f64
}

/// Runs `predictor` on every scene and scores it.
pub fn evaluate(predictor: &dyn Predictor, scenes: &[PlanarScene], opts: &EvalOptions) -> Result<EvalReport, HarnessError> {
    let mut records = Vec::with_capacity(scenes.len());
    for (index, scene) in scenes.iter().enumerate() {
        let seg = predictor.predict(scene)?;
        let planes = seg.planes();
        let depth_recall = plane_pixel_recall(&seg.mask, &planes, scene, &depth_thresholds(), RecallMode::Depth, opts.recall)?;
        let normal_recall =
            plane_pixel_recall(&seg.mask, &planes, scene, &normal_thresholds(), RecallMode::Normal, opts.recall)?;
        let valid: Vec<bool> = scene.depth.iter().map(|&z| is_valid_depth(z) && z > 0.0).collect();
        let depth = if valid.iter().any(|&v| v) {
            Some(depth_scores(&seg.assembled_depth, &scene.depth, &valid)?)
        } else {
            None
        };
        records.push(SceneRecord {
            index,
            seed: scene.seed,
            gt_planes: scene.num_planes(),
            pred_planes: planes.len(),
            depth_recall,
            normal_recall,
            seg: seg_scores(&seg.mask, &scene.mask)?,
            depth,
            fallback_pixels: seg.fallback_pixels,
        });
    }
    let summary = summarize(&records, &opts.label);
    Ok(EvalReport { records, summary })
}

fn sum_counts(records: &[SceneRecord], pick: impl Fn(&SceneRecord) -> &Option<RecallCounts>, thresholds: Vec<f64>) -> RecallCurve {
    let mut total = RecallCounts {
        correct_planes: vec![0; thresholds.len()],
        covered_pixels: vec![0; thresholds.len()],
        thresholds,
        total_planes: 0,
        total_pixels: 0,
    };
    for c in records.iter().filter_map(|r| pick(r).as_ref()) {
        total.add(c);
    }
    total.curve()
}

fn summarize(records: &[SceneRecord], label: &str) -> EvalSummary {
    let depths: Vec<DepthScores> = records.iter().filter_map(|r| r.depth).collect();
    let depth = (!depths.is_empty()).then(|| DepthScores {
        rel: mean_of(&depths, |d| d.rel),
        log10: mean_of(&depths, |d| d.log10),
        rmse: mean_of(&depths, |d| d.rmse),
        delta1: mean_of(&depths, |d| d.delta1),
        delta2: mean_of(&depths, |d| d.delta2),
        delta3: mean_of(&depths, |d| d.delta3),
    });
    EvalSummary {
        label: label.to_string(),
        scenes: records.len(),
        skipped: records.iter().filter(|r| r.depth_recall.is_none()).count(),
        depth_curve: sum_counts(records, |r| &r.depth_recall, depth_thresholds()),
        normal_curve: sum_counts(records, |r| &r.normal_recall, normal_thresholds()),
        vi: mean_of(records, |r| r.seg.vi),
        ri: mean_of(records, |r| r.seg.ri),
        sc: mean_of(records, |r| r.seg.sc),
        depth,
        fallback_pixels: records.iter().map(|r| r.fallback_pixels).sum(),
    }
}

/// Loads a checkpoint (refusing one whose fingerprint differs from
/// `expected`) and evaluates it.
pub fn evaluate_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
    scenes: &[PlanarScene],
    use_lines: bool,
    opts: &EvalOptions,
) -> Result<EvalReport, HarnessError> {
    let (model, _) = PlaneFormer::load(path, expected)?;
    evaluate(&ModelPredictor::new(&model, use_lines), scenes, opts)
}

/// One JSON record per scene followed by the summary record.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in &report.records {
        let line = serde_json::to_string(&ReportLine::Scene(r.clone())).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    let line = serde_json::to_string(&ReportLine::Summary(report.summary.clone())).expect("summary serializes");
    writeln!(w, "{line}").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<EvalReport, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut summary = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))? {
            ReportLine::Scene(r) => records.push(r),
            ReportLine::Summary(s) => summary = Some(s),
        }
    }
    let summary = summary.ok_or_else(|| format_err(path, "missing summary record"))?;
    Ok(EvalReport { records, summary })
}
