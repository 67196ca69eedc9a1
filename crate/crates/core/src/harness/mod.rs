//! Training, evaluation, inference and plotting drivers.

mod config;
mod evaluate;
mod infer;
mod optim;
mod plot;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::loss::LossError;
use crate::metrics::MetricError;
use crate::model::{CheckpointError, ModelError};
use crate::scene::SceneError;

pub use config::{ModelOverrides, ModelPreset, TrainConfig};
pub use evaluate::{
    evaluate, evaluate_checkpoint, read_report, write_report, EvalOptions, EvalReport, EvalSummary, GroundTruthPredictor,
    ModelPredictor, Predictor, SceneRecord, HEADLINE_DEPTH,
};
pub use infer::{
    infer, load_image, parse_line_file, read_inference, write_inference, AttentionDump, InferRequest, InferResult,
    InferenceFiles, InstanceDump,
};
pub use optim::{learning_rate, Adam};
pub use plot::{plot_attention, plot_loss_curve, plot_mask_overlay, plot_recall_curves, render_attention_png, render_mask_png};
pub use train::{read_run_log, train, MetricSnapshot, RunRecord, TrainOptions, TrainOutcome, CHECKPOINT_FILE, RUN_LOG_FILE};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("loss failed at epoch {epoch}, step {step}: {source}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    Loss {
        epoch: usize,
        step: usize,
        #[source]
        source: LossError,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("non-finite gradient for {param} at epoch {epoch}, step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NonFiniteGradient {
        param: String,
        epoch: usize,
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("line file record {line} ({record:?}): {reason}")]
    LineFile { line: usize, record: String, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("plot failed: {0}")]
    Plot(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn format_err(path: &Path, reason: impl ToString) -> HarnessError {
    HarnessError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}
