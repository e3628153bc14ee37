//! A small anchor-based detector trained on synthetic scenes.
//!
//! The model has a shared trunk, a shared box-regression head and either
//! two task-specific classification heads (polyp, artifact) or one flat
//! seven-way head. Gradients are derived by hand; [`grad_check`] compares
//! them against central finite differences.

mod checkpoint;
mod decode;
mod model;
mod scene;
mod train;

pub use checkpoint::{checkpoint_from_json, checkpoint_to_json, load_checkpoint, save_checkpoint};
pub use decode::{nms, predict_boxes, predict_dataset};
pub use model::{
    backward, Architecture, Forward, OutputGrads, ParamBlock, ParamBlocks, ToyModel,
    ARTIFACT_OUTPUTS, FLAT_OUTPUTS,
};
pub use scene::{
    generate_scene, generate_scenes, scene_frame_id, scenes_to_dataset, SceneKnobs,
    SyntheticScene,
};
pub use train::{
    grad_check, head_isolation, loss_and_grad, train, train_observed, GradCheckOptions,
    GradCheckReport, LossBreakdown, StepInfo, TrainConfig, TrainOutcome, TrainingExample,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss diverged at step {step}: {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    Parse(String),
}

impl From<crate::loss::LossError> for ToyError {
    fn from(e: crate::loss::LossError) -> Self {
        ToyError::Config(e.to_string())
    }
}
