//! Command implementations behind the `waterbird` binary. Every command
//! reads its inputs from the resolved [`PipelineConfig`] (plus optional
//! path arguments) and writes beneath the configured output root.

pub mod commands;
pub mod config;

use std::fmt::Display;

use thiserror::Error;

pub use config::{Overrides, PipelineConfig};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or missing input: exit code 1.
    #[error("{0}")]
    Input(String),
    /// Internal consistency check failed: exit code 2.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn input(e: impl Display) -> Self {
        CliError::Input(e.to_string())
    }

    pub fn invariant(e: impl Display) -> Self {
        CliError::Invariant(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Invariant(_) => 2,
        }
    }
}
