//! Optimization, checkpoints and the run-level commands.

mod adam;
mod checkpoint;
mod config;
pub mod gradsuite;
mod run;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use run::{
    ablate, ablate_with_data, distance_sidecar, evaluate_checkpoint, evaluate_model, metrics_row, predict_pair,
    scale_distance, train, train_with_data, Ablation, AblationRow, EpochRecord, Evaluation, Prediction, TrainReport,
    METRICS_HEADER,
};
