//! Named parameter storage and the checkpoint archive format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::rc::Rc;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("checkpoint {path} was written for config {found}, expected {expected}")]
    Fingerprint { path: String, found: String, expected: String },
    #[error("checkpoint {path} is missing parameter {name}")]
    Missing { path: String, name: String },
}

/// Model parameters by name. Values are reference counted so a forward
/// pass can borrow them without copying.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Rc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), Rc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Rc<Tensor>> {
        self.params.get(name)
    }

    /// Mutable access; clones the value only if a forward pass still holds it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Rc::make_mut)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// Writes named tensors plus string metadata as a safetensors archive
/// (little-endian f64).
pub fn save_tensors(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: HashMap<String, String>,
) -> Result<(), CheckpointError> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), raw, t.shape().to_vec())
        })
        .collect();
    let views: Vec<(String, TensorView<'_>)> = bytes
        .iter()
        .map(|(name, raw, shape)| {
            let view = TensorView::new(Dtype::F64, shape.clone(), raw).expect("byte length matches shape");
            (name.clone(), view)
        })
        .collect();
    let buffer = safetensors::serialize(views, &Some(metadata)).map_err(|e| CheckpointError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CheckpointError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    // write then rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, buffer)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub type TensorArchive = (BTreeMap<String, Tensor>, HashMap<String, String>);

pub fn load_tensors(path: &Path) -> Result<TensorArchive, CheckpointError> {
    let p = path.display().to_string();
    let buffer = std::fs::read(path).map_err(|source| CheckpointError::Io { path: p.clone(), source })?;
    let format = |reason: String| CheckpointError::Format { path: p.clone(), reason };
    let (_, meta) = SafeTensors::read_metadata(&buffer).map_err(|e| format(e.to_string()))?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let st = SafeTensors::deserialize(&buffer).map_err(|e| format(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(format(format!("tensor {name} has dtype {:?}", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(name, Tensor::new(view.shape().to_vec(), data));
    }
    Ok((tensors, metadata))
}
