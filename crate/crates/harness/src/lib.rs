//! Experiment harness for the `wsnn` library: reference models, training with
//! early stopping, evaluation, ensembling, saliency maps and checkpoints.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod models;
pub mod saliency;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
