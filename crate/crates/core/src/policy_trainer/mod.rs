//! Actor-critic networks, PPO with GAE, and the training loop.

pub mod checkpoint;
pub mod mlp;
pub mod norm;
pub mod ppo;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointError, TrainProgress};
pub use mlp::Mlp;
pub use norm::RunningNorm;
pub use ppo::{
    compute_gae, lr_schedule, ppo_update, Adam, LossReport, MlpParams, PpoConfig, PpoError, RolloutBuffer,
};
pub use train::{train, MetricsRow, TrainConfig, TrainError, TrainOutcome, Trainer};
