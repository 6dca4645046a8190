//! File formats and the command line for `shieldrl-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod decisions;
pub mod error;
pub mod metrics;

pub use checkpoint::Checkpoint;
pub use config::{EnvConfig, ExperimentConfig};
pub use error::AppError;
