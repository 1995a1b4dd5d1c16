//! Self-distillation with an EMA teacher, multi-crop views and centering.

pub mod config;
pub mod head;
pub mod loss;
pub mod trainer;

pub use config::{DinoConfig, Schedule, ScheduleValues};
pub use head::HeadConfig;
pub use trainer::{DinoState, EpochStats, StepStats, Trainer};
