//! Several requests sharing one pipeline: their trees are packed side by
//! side each step and every stage runs one packed forward over all of them.

mod ragged;
mod scheduler;
mod serve;
mod step;

use thiserror::Error;

use crate::model::ModelError;
use crate::pipeline::PipelineError;

pub use ragged::{RaggedBatch, Segment};
pub use scheduler::Scheduler;
pub use serve::{
    parse_workload, serve, PromptSpec, Request, RequestReport, ServeConfig, ServeReport,
    WorkloadEntry,
};
pub use step::{batched_step, BatchMember, BatchStep};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("nothing to pack")]
    Empty,
    #[error("batch of {nodes} nodes exceeds the limit of {max}")]
    Overflow { nodes: usize, max: usize },
    #[error("batch invariant violated: {0}")]
    Invariant(String),
    #[error("invalid batch config: {0}")]
    Config(String),
    #[error("workload line {line}: {message}")]
    Workload { line: usize, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl BatchError {
    pub fn is_invariant(&self) -> bool {
        match self {
            BatchError::Invariant(_) => true,
            BatchError::Pipeline(e) => e.is_invariant(),
            _ => false,
        }
    }
}

/// Splits `w_total` evenly over `active` requests, oldest first; the
/// remainder goes to the oldest ones and nobody gets less than 1.
pub fn split_width(w_total: usize, active: usize) -> Vec<usize> {
    if active == 0 {
        return Vec::new();
    }
    let base = w_total / active;
    let extra = w_total % active;
    (0..active)
        .map(|i| (base + usize::from(i < extra)).max(1))
        .collect()
}
