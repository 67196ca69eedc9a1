use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_err, io_err, HarnessError};
use crate::geometry::{CameraIntrinsics, LineSegment};
use crate::model::{ModelInput, PlaneFormer, PlaneInstanceSet};
use crate::scene::{read_npy, write_npy};
use crate::segmentation::{segment, SegmentationResult};
use crate::tensor::Tensor;

/// Parses `x1 y1 x2 y2` records, one per line, in pixels. Blank lines and
/// `#` comments are skipped. Every segment must lie inside a `width × height`
/// image.
pub fn parse_line_file(text: &str, width: usize, height: usize) -> Result<Vec<LineSegment>, HarnessError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let record = raw.split('#').next().unwrap_or("").trim();
        if record.is_empty() {
            continue;
        }
        let bad = |reason: String| HarnessError::LineFile {
            line: i + 1,
            record: raw.to_string(),
            reason,
        };
        let values: Vec<f64> = record
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{t:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 4 {
            return Err(bad(format!("expected 4 numbers, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite coordinate".into()));
        }
        let s = LineSegment::new([values[0], values[1]], [values[2], values[3]]);
        if !s.is_valid_for(width, height) {
            return Err(bad(format!("degenerate or outside the {width}x{height} image")));
        }
        out.push(s);
    }
    Ok(out)
}

/// Loads an RGB image as row-major `H × W × 3` values in `[0, 1]`, from a
/// PNG or from an `.npy` file holding `f64` `[H, W, 3]`.
pub fn load_image(path: &Path) -> Result<(Vec<f64>, usize, usize), HarnessError> {
    let is_npy = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy"));
    if is_npy {
        let file = File::open(path).map_err(io_err(path))?;
        let npy = npyz::NpyFile::new(BufReader::new(file)).map_err(|e| format_err(path, e))?;
        let shape = npy.shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(format_err(path, format!("shape {shape:?}, expected [H, W, 3]")));
        }
        let data: Vec<f64> = npy.into_vec().map_err(|e| format_err(path, e))?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format_err(path, "values outside [0, 1]"));
        }
        Ok((data, shape[1] as usize, shape[0] as usize))
    } else {
        let img = image::open(path).map_err(|e| format_err(path, e))?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Ok((data, w as usize, h as usize))
    }
}

#[derive(Debug, Clone)]
pub struct InferRequest {
    /// Row-major `H × W × 3`.
    pub image: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub lines: Vec<LineSegment>,
    pub intrinsics: CameraIntrinsics,
    pub use_lines: bool,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct InferResult {
    pub segmentation: SegmentationResult,
    pub instances: PlaneInstanceSet,
    /// `[K, H4 * W4]`, head-averaged last decoder layer.
    pub context_attention: Tensor,
    /// `[K, n]`, absent without line tokens.
    pub line_attention: Option<Tensor>,
    /// `(W4, H4)`
    pub context_grid: (usize, usize),
}

pub fn infer(model: &PlaneFormer, req: &InferRequest) -> Result<InferResult, HarnessError> {
    let n = req.width * req.height;
    if req.image.len() != 3 * n {
        return Err(HarnessError::Config(format!(
            "image has {} values, expected {}",
            req.image.len(),
            3 * n
        )));
    }
    if req.intrinsics.width != req.width || req.intrinsics.height != req.height {
        return Err(HarnessError::Config("intrinsics size differs from the image".into()));
    }
    let mut chw = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            chw[c * n + p] = req.image[p * 3 + c];
        }
    }
    let input = ModelInput {
        image: &chw,
        width: req.width,
        height: req.height,
        lines: &req.lines,
    };
    let inf = model.predict(&input, req.use_lines)?;
    let segmentation = segment(&inf.instances, &inf.pixels, &req.intrinsics, req.threshold);
    Ok(InferResult {
        segmentation,
        instances: inf.instances,
        context_attention: inf.context_attention,
        line_attention: inf.line_attention,
        context_grid: inf.context_grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDump {
    pub slot: usize,
    pub prob: f64,
    pub param: [f64; 3],
    pub center: Option<[f64; 2]>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub image_width: usize,
    pub image_height: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    /// One row per slot over the context grid, row-major.
    pub context: Vec<Vec<f64>>,
    /// One row per slot over the line segments.
    pub lines: Option<Vec<Vec<f64>>>,
    pub segments: Vec<LineSegment>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes `image.npy`, `mask.npy`, `depth.npy`, `instances.json` and
/// `attention.json` into `dir`.
pub fn write_inference(dir: &Path, req: &InferRequest, res: &InferResult) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (w, h) = (req.width as u64, req.height as u64);
    write_npy(&dir.join("image.npy"), &[h, w, 3], &req.image)?;
    write_npy(&dir.join("mask.npy"), &[h, w], &res.segmentation.mask)?;
    write_npy(&dir.join("depth.npy"), &[h, w], &res.segmentation.assembled_depth)?;
    let inst = &res.instances;
    let kept = inst.kept();
    let dump: Vec<InstanceDump> = (0..inst.len())
        .map(|i| InstanceDump {
            slot: i,
            prob: inst.probs[i],
            param: inst.params[i].0,
            center: inst.centers.as_ref().map(|c| c[i]),
            kept: kept.contains(&i),
        })
        .collect();
    write_json(&dir.join("instances.json"), &dump)?;
    let attention = AttentionDump {
        image_width: req.width,
        image_height: req.height,
        grid_width: res.context_grid.0,
        grid_height: res.context_grid.1,
        context: rows(&res.context_attention),
        lines: res.line_attention.as_ref().map(rows),
        segments: req.lines.clone(),
    };
    write_json(&dir.join("attention.json"), &attention)
}

/// Everything [`write_inference`] stored.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceFiles {
    pub width: usize,
    pub height: usize,
    pub image: Vec<f64>,
    pub mask: Vec<u32>,
    pub depth: Vec<f64>,
    pub instances: Vec<InstanceDump>,
    pub attention: AttentionDump,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

pub fn read_inference(dir: &Path) -> Result<InferenceFiles, HarnessError> {
    let attention: AttentionDump = read_json(&dir.join("attention.json"))?;
    let instances: Vec<InstanceDump> = read_json(&dir.join("instances.json"))?;
    let (w, h) = (attention.image_width, attention.image_height);
    let (wu, hu) = (w as u64, h as u64);
    Ok(InferenceFiles {
        width: w,
        height: h,
        image: read_npy(&dir.join("image.npy"), &[hu, wu, 3])?,
        mask: read_npy(&dir.join("mask.npy"), &[hu, wu])?,
        depth: read_npy(&dir.join("depth.npy"), &[hu, wu])?,
        instances,
        attention,
    })
}
