//! Initialization, the adaptive-moment optimizer and the training loop.

mod adam;
mod init;
mod train;

pub use adam::{adam_step, clip_global_norm, AdamState, TrainConfig};
pub use init::{init_params, INIT_STD};
pub use train::{
    batch_gradients, evaluate_model, fit_model, predict_all, train, train_model, CachedInputs, Fitted, LogRow, TrainLog,
};
