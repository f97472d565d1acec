use std::path::PathBuf;

use rvae_autodiff::TensorError;
use thiserror::Error;

use crate::graph::GraphIssue;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid graph: {}", format_issues(.0))]
    InvalidGraph(Vec<GraphIssue>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("mask length {mask} does not match {nodes} nodes")]
    MaskLength { mask: usize, nodes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("covariance factorization failed after jitter retries: {0}")]
    Factorization(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("{0} not found: {1}")]
    NotFound(&'static str, PathBuf),

    #[error("malformed record at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_issues(issues: &[GraphIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
