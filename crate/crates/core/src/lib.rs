//! Single-image piecewise-planar reconstruction with a line-guided
//! transformer. See the crate README for the command-line workflow.

pub mod autograd;
pub mod tensor;
pub mod geometry;
pub mod scene;
pub mod model;
pub mod matching;
pub mod loss;
pub mod segmentation;
pub mod metrics;
pub mod harness;

pub use geometry::{CameraIntrinsics, LineSegment, PlaneParam};
pub use harness::{HarnessError, TrainConfig};
pub use loss::{LossBreakdown, LossConfig};
pub use matching::{solve_matching, MatchResult};
pub use metrics::{seg_scores, SegScores};
pub use model::{Inference, ModelConfig, ModelInput, PlaneFormer, PlaneInstanceSet};
pub use scene::{generate_scene, GeneratorConfig, PlanarScene};
pub use segmentation::{segment, SegmentationResult};
pub use tensor::Tensor;
