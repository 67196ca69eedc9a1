//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<scene_id>/image.npy   f64, H × W × 3
//! <root>/<split>/<scene_id>/depth.npy   f64, H × W
//! <root>/<split>/<scene_id>/mask.npy    u32, H × W
//! <root>/<split>/<scene_id>/meta.json   planes, centers, segments, intrinsics
//! ```
//!
//! Arrays are little-endian NPY files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use npyz::WriterBuilder;
use serde::{Deserialize, Serialize};

use super::{generate_scene, scene_seed, GeneratorConfig, PlanarScene, SceneError};
use crate::geometry::{CameraIntrinsics, LineSegment, PlaneParam};

const MANIFEST_FILE: &str = "manifest.json";

/// Request to materialize one split of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub count: usize,
    pub seed: u64,
    /// Image size is taken from `generator.width` / `generator.height`.
    pub generator: GeneratorConfig,
}

/// What `manifest.json` records for each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    /// Content hash of every scene, in index order.
    pub scene_hashes: Vec<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ManifestFile {
    splits: BTreeMap<String, SplitEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    width: usize,
    height: usize,
    seed: u64,
    intrinsics: CameraIntrinsics,
    planes: Vec<PlaneParam>,
    centers: Vec<[f64; 2]>,
    line_segments: Vec<LineSegment>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn scene_dir_name(index: usize) -> String {
    format!("{index:05}")
}

pub(crate) fn write_npy<T: npyz::AutoSerialize + Copy>(path: &Path, shape: &[u64], data: &[T]) -> Result<(), SceneError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = npyz::WriteOptions::new()
        .default_dtype()
        .shape(shape)
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(io_err(path))?;
    writer.extend(data.iter().copied()).map_err(io_err(path))?;
    writer.finish().map_err(io_err(path))
}

pub(crate) fn read_npy<T: npyz::Deserialize>(path: &Path, shape: &[u64]) -> Result<Vec<T>, SceneError> {
    let file = File::open(path).map_err(io_err(path))?;
    let format = |reason: String| SceneError::Format {
        path: path.display().to_string(),
        reason,
    };
    let npy = npyz::NpyFile::new(BufReader::new(file)).map_err(|e| format(e.to_string()))?;
    if npy.shape() != shape {
        return Err(format(format!("shape {:?}, expected {:?}", npy.shape(), shape)));
    }
    npy.into_vec().map_err(|e| format(e.to_string()))
}

/// Writes one scene into `dir` (created if missing).
pub fn write_scene(dir: &Path, scene: &PlanarScene) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (h, w) = (scene.height as u64, scene.width as u64);
    write_npy(&dir.join("image.npy"), &[h, w, 3], &scene.image)?;
    write_npy(&dir.join("depth.npy"), &[h, w], &scene.depth)?;
    write_npy(&dir.join("mask.npy"), &[h, w], &scene.mask)?;
    let meta = SceneMeta {
        width: scene.width,
        height: scene.height,
        seed: scene.seed,
        intrinsics: scene.intrinsics,
        planes: scene.planes.clone(),
        centers: scene.centers.clone(),
        line_segments: scene.line_segments.clone(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("scene metadata serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

/// Reads and re-validates a scene written by [`write_scene`]. Any failure
/// is wrapped in [`SceneError::Load`] naming the scene directory.
pub fn load_scene(dir: &Path) -> Result<PlanarScene, SceneError> {
    load_scene_inner(dir).map_err(|e| SceneError::Load {
        scene: dir.display().to_string(),
        source: Box::new(e),
    })
}

fn load_scene_inner(dir: &Path) -> Result<PlanarScene, SceneError> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: SceneMeta = serde_json::from_str(&text).map_err(|e| SceneError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let (h, w) = (meta.height as u64, meta.width as u64);
    let scene = PlanarScene {
        width: meta.width,
        height: meta.height,
        image: read_npy(&dir.join("image.npy"), &[h, w, 3])?,
        depth: read_npy(&dir.join("depth.npy"), &[h, w])?,
        mask: read_npy(&dir.join("mask.npy"), &[h, w])?,
        planes: meta.planes,
        centers: meta.centers,
        line_segments: meta.line_segments,
        intrinsics: meta.intrinsics,
        seed: meta.seed,
    };
    scene.validate(None)?;
    Ok(scene)
}

/// Reads the split table of `<root>/manifest.json`.
pub fn read_manifest(root: &Path) -> Result<BTreeMap<String, SplitEntry>, SceneError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| SceneError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(file.splits)
}

/// Generates and writes every scene of a split, then records the split in
/// the root manifest (other splits already listed there are kept).
pub fn write_dataset(manifest: &DatasetManifest) -> Result<SplitEntry, SceneError> {
    let split_dir = manifest.root.join(&manifest.split);
    fs::create_dir_all(&split_dir).map_err(io_err(&split_dir))?;
    let mut hashes = Vec::with_capacity(manifest.count);
    for index in 0..manifest.count {
        let scene = generate_scene(scene_seed(manifest.seed, index as u64), &manifest.generator)?;
        write_scene(&split_dir.join(scene_dir_name(index)), &scene)?;
        hashes.push(scene.content_hash());
    }
    let entry = SplitEntry {
        count: manifest.count,
        width: manifest.generator.width,
        height: manifest.generator.height,
        seed: manifest.seed,
        generator: manifest.generator.clone(),
        scene_hashes: hashes,
    };
    let path = manifest.root.join(MANIFEST_FILE);
    let mut file = if path.exists() {
        ManifestFile {
            splits: read_manifest(&manifest.root)?,
        }
    } else {
        ManifestFile::default()
    };
    file.splits.insert(manifest.split.clone(), entry.clone());
    let text = serde_json::to_string_pretty(&file).expect("manifest serializes");
    let mut out = File::create(&path).map_err(io_err(&path))?;
    out.write_all(text.as_bytes()).map_err(io_err(&path))?;
    Ok(entry)
}

/// Loads every scene of a split listed in the root manifest, in index order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<PlanarScene>, SceneError> {
    let splits = read_manifest(root)?;
    let entry = splits.get(split).ok_or_else(|| SceneError::Format {
        path: root.join(MANIFEST_FILE).display().to_string(),
        reason: format!("no split named {split:?}"),
    })?;
    (0..entry.count)
        .map(|i| load_scene(&root.join(split).join(scene_dir_name(i))))
        .collect()
}
