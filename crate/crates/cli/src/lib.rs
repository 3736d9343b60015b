//! Command-line harness around the `speaker-align` library: experiment
//! runs, ablation sweeps, attention-dump ingestion and heatmap export.

pub mod analysis;
pub mod cli;
pub mod dump;
pub mod error;
pub mod heatmap;

pub use cli::main_entry;
pub use error::{CliError, Result};
