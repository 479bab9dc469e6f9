//! Losses, the two-stage schedule and the training loop.
//!
//! Stage 1 (iterations `1..=pose_joint_iters`) draws rays from every
//! training frame and updates poses and both networks under the
//! photometric and correspondence losses. Afterwards the pose layer is
//! frozen and each iteration draws rays from a single frame, adding the
//! depth loss.

mod config;
mod losses;
mod trainer;

pub use crate::data::CorrespondenceRecord;
pub use config::{
    apply_override, CorrespondenceTime, EvalConfig, LogConfig, LossWeights, RenderConfig, Schedule,
    TrainConfig,
};
pub use losses::{
    correspondence_loss, correspondence_loss_value, correspondence_terms, depth_loss,
    masked_squared_error, photometric_loss, CorrespondenceBatch, LossCounters,
};
pub use trainer::{
    read_log, render_rays_on_tape, restore, run_training, training_samples, LogRow, RayBatch,
    TrainOutput, TrainState, Trainer, CHECKPOINT_FILE, LOG_FILE, POSE_GROUP,
};
