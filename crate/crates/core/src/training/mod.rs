//! Joint objective, optimizer, schedule, training loop and checkpoints.

pub mod checkpoint;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{Container, Entry};
pub use loss::{stp_loss, LossParts};
pub use optim::{adamw_step, AdamState, AdamWConfig};
pub use schedule::{lr_at, Schedule};
pub use trainer::{batch_objective, masked_targets, pair_objective, text_digest, StepStats, TrainConfig, Trainer};
