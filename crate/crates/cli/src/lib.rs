// SPDX-License-Identifier: MIT
//! Library backing the `gnies` command-line tool: dataset layout and CSV
//! handling, plus the generate / fit / path / eval pipelines. The binary in
//! `main.rs` is a thin argument-parsing layer over these functions, which
//! keeps every pipeline drivable (and testable) in-process.

pub mod data;
pub mod pipeline;

pub use data::{load_dataset, Dataset, Manifest};
pub use pipeline::{
    evaluate, fit, generate, regularization_path, EvalRow, FitConfig, GenerateConfig, PathRow,
    TruthKind,
};

/// Errors carry the process exit code: 2 for configuration problems, 3 for
/// data problems, 4 for solver failures.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("solver error: {0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Solver(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<gnies::scm::ScmError> for CliError {
    fn from(e: gnies::scm::ScmError) -> Self {
        use gnies::scm::ScmError::*;
        match e {
            BadGenParams(_) | NonPositiveTolerance => CliError::Config(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

impl From<gnies::score::ScoreError> for CliError {
    fn from(e: gnies::score::ScoreError) -> Self {
        use gnies::score::ScoreError::*;
        match e {
            TooFewSamples(_) | NoEnvironments | DimensionMismatch(_, _) | NotSymmetric => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Solver(e.to_string()),
        }
    }
}

impl From<gnies::search::SearchError> for CliError {
    fn from(e: gnies::search::SearchError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<gnies::graphs::GraphError> for CliError {
    fn from(e: gnies::graphs::GraphError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<gnies::metrics::MetricsError> for CliError {
    fn from(e: gnies::metrics::MetricsError) -> Self {
        CliError::Solver(e.to_string())
    }
}
