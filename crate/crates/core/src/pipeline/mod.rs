//! The pipelined speculative decoding step machine.
//!
//! Tree level `d` lives `d` stages behind the root: the root's final hidden
//! state sits at the last stage, its children one stage earlier, and so on.
//! Each step drafts one level from the tree's bottom, computes every stage,
//! verifies the root at the last stage, prunes every stage to the verified
//! child's subtree (or flushes on a miss) and shifts all packets one stage
//! down, feeding the new level into the first stage.

mod bank;
mod metrics;
mod session;
mod stage;
mod worker;

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::perf::CostModel;
use crate::source::{BeamConfig, SourceError};
use crate::tree::TreeError;

pub use bank::{ComputeResult, LocalBank, StageBank};
pub use metrics::{
    percentile, Counters, Emission, Phase, RunMetrics, StepTrace, TraceRow, TRACE_HEADER,
};
pub use session::{
    run, run_with_bank, LevelLedger, PendingStep, PrefillRecord, RunOutput, Session, StageActivity,
    StepCore, StepOutcome, StepTiming, StopReason,
};
pub use stage::{
    LocalMask, PreparedCompute, PruneDirective, PruneReport, StageAudit, StageMessage, StageState,
};
pub use worker::WorkerBank;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("draft source: {0}")]
    Source(SourceError),
    #[error("pipeline invariant violated: {0}")]
    Invariant(String),
    #[error("stage worker failed: {0}")]
    Worker(String),
}

impl PipelineError {
    /// True for internal consistency failures, as opposed to bad input.
    pub fn is_invariant(&self) -> bool {
        matches!(
            self,
            PipelineError::Invariant(_)
                | PipelineError::Worker(_)
                | PipelineError::Tree(TreeError::Invariant(_))
                | PipelineError::Model(ModelError::ContractViolation(_))
                | PipelineError::Model(ModelError::MissingAncestor { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "specpipe")]
    SpecPipe,
    /// Plain pipeline parallelism: no drafting, one token per full pass.
    #[serde(rename = "vanilla-pp")]
    VanillaPp,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "specpipe" => Ok(Mode::SpecPipe),
            "vanilla-pp" => Ok(Mode::VanillaPp),
            other => Err(format!(
                "unknown mode {other:?} (expected specpipe or vanilla-pp)"
            )),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::SpecPipe => "specpipe",
            Mode::VanillaPp => "vanilla-pp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of stages `m`.
    pub stages: usize,
    /// Layers per stage; even split (extra layers to earlier stages) if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_split: Option<Vec<usize>>,
    /// Overlap pruning with transmission inside each stage.
    #[serde(default)]
    pub overlap: bool,
    /// One thread per stage instead of the single-threaded loop.
    #[serde(default)]
    pub workers: bool,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub beam: BeamConfig,
}

impl PipelineConfig {
    pub fn new(stages: usize, beam: BeamConfig) -> Self {
        Self {
            stages,
            layer_split: None,
            overlap: false,
            workers: false,
            mode: Mode::SpecPipe,
            cost: CostModel::default(),
            beam,
        }
    }

    /// Contiguous layer ranges, one per stage, covering `0..layers`.
    pub fn layer_ranges(&self, layers: usize) -> Result<Vec<Range<usize>>, PipelineError> {
        let m = self.stages;
        if m < 2 {
            return Err(PipelineError::Config(format!(
                "{m} stages, need at least 2"
            )));
        }
        let counts = match &self.layer_split {
            Some(split) => {
                if split.len() != m {
                    return Err(PipelineError::Config(format!(
                        "layer split has {} entries for {m} stages",
                        split.len()
                    )));
                }
                if split.contains(&0) || split.iter().sum::<usize>() != layers {
                    return Err(PipelineError::Config(format!(
                        "layer split {split:?} does not partition {layers} layers"
                    )));
                }
                split.clone()
            }
            None => {
                if m > layers {
                    return Err(PipelineError::Config(format!(
                        "{m} stages for a {layers}-layer model"
                    )));
                }
                (0..m)
                    .map(|i| layers / m + usize::from(i < layers % m))
                    .collect()
            }
        };
        let mut start = 0;
        Ok(counts
            .into_iter()
            .map(|c| {
                let r = start..start + c;
                start += c;
                r
            })
            .collect())
    }

    pub fn validate(&self, layers: usize) -> Result<(), PipelineError> {
        self.layer_ranges(layers)?;
        self.beam.validate().map_err(PipelineError::Config)?;
        self.cost
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}
