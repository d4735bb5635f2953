//! Training, evaluation, prediction, gradient checking and ablations.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod train;

pub use ablate::{ablate, ablate_samples, format_table, AblationRow, Component, Variant};
pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, Checkpoint, TrainState};
pub use config::TrainConfig;
pub use eval::{
    decode_visual, encode_visual, evaluate, evaluate_model, evaluate_predictions, predict, predict_map, save_visual,
    Prediction,
};
pub use gradcheck::{
    gradcheck, gradcheck_model, gradcheck_samples, GradcheckReport, GroupCheck, DEFAULT_STEP, DEFAULT_THRESHOLD,
};
pub use train::{epoch_order, loss_and_grads, Adam, Batch, EpochRecord, StepRecord, StopReason, Trainer};
