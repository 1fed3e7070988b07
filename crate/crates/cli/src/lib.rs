//! Experiment runner: training, ablation sweeps, verification suites and
//! exports, each usable as a library call or through the `pppc` binary.

pub mod ablate;
pub mod error;
pub mod export;
pub mod manifest;
pub mod train;
pub mod verify;

use std::path::PathBuf;

pub use error::{CliError, CliResult, ExitStatus};

/// Environment variable naming the directory that run outputs go under.
pub const OUTPUT_ROOT_ENV: &str = "PPPC_OUTPUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
