//! Objectives, the optimization loop and scheduled sampling.

mod config;
mod step;
mod trainer;

pub use config::{scheduled_sampling_epsilon, Regime, TrainConfig};
pub use step::{build_loss, Branch, LossGraph, Objective, StepNoise};
pub use trainer::{train, EpochRecord, StepRecord, TrainOutcome};
