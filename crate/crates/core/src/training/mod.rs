//! Losses, optimisation, the joint post-editing/de-noising update and
//! checkpoint retention and averaging.

mod checkpoint;
mod config;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{average_checkpoints, load_checkpoint_dir, mean_params, Checkpoint, CheckpointStore};
pub use config::{config_digest, TrainConfig};
pub use loss::{joint_loss, smoothed_loss, smoothing_distribution};
pub use optim::{adam_update, lr_at, AdamConfig, AdamState};
pub use trainer::{
    joint_gradients, pass_gradients, pass_rng, task_loss, validation_perplexity, JointGradients, RunSummary,
    StepReport, Task, Trainer,
};
