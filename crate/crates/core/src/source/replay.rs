//! JSON Lines draft traces: one line per provider call,
//! `{"step": u64, "frontier_node": u64, "candidates": [{"token": u32, "prob": f64}]}`.
//! A stalled call is recorded as `"stalled": true` with no candidates.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Candidate, DraftProvider, DraftRequest, SourceError};
use crate::tree::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub step: u64,
    pub frontier_node: NodeId,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stalled: bool,
}

/// Plays back recorded candidate lists in order.
#[derive(Debug, Clone)]
pub struct ReplayDraft {
    lines: Vec<TraceLine>,
    next: usize,
}

impl ReplayDraft {
    pub fn new(lines: Vec<TraceLine>) -> Self {
        Self { lines, next: 0 }
    }

    /// Parses a whole trace up front; blank lines are skipped.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, SourceError> {
        let mut lines = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| SourceError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine =
                serde_json::from_str(&line).map_err(|e| SourceError::Trace {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            lines.push(parsed);
        }
        Ok(Self::new(lines))
    }

    pub fn from_path(path: &Path) -> Result<Self, SourceError> {
        let file = std::fs::File::open(path)
            .map_err(|e| SourceError::Io(format!("{}: {e}", path.display())))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn remaining(&self) -> usize {
        self.lines.len() - self.next
    }
}

impl DraftProvider for ReplayDraft {
    fn draft(&mut self, req: &DraftRequest<'_>) -> Result<Vec<Candidate>, SourceError> {
        let Some(line) = self.lines.get(self.next) else {
            return Err(SourceError::Exhausted);
        };
        let number = self.next + 1;
        if line.step != req.step || line.frontier_node != req.frontier_node {
            return Err(SourceError::Mismatch {
                line: number,
                step: req.step,
                node: req.frontier_node.0,
                found_step: line.step,
                found_node: line.frontier_node.0,
            });
        }
        self.next += 1;
        if line.stalled {
            return Err(SourceError::Stalled);
        }
        if line.candidates.len() < req.k {
            return Err(SourceError::InsufficientCandidates {
                needed: req.k,
                got: line.candidates.len(),
            });
        }
        Ok(line.candidates[..req.k].to_vec())
    }
}

/// Wraps a provider and keeps every answer it gives.
pub struct RecordingDraft<P> {
    inner: P,
    lines: Vec<TraceLine>,
}

impl<P: DraftProvider> RecordingDraft<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            lines: Vec::new(),
        }
    }

    pub fn lines(&self) -> &[TraceLine] {
        &self.lines
    }

    pub fn into_lines(self) -> Vec<TraceLine> {
        self.lines
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for line in &self.lines {
            serde_json::to_writer(&mut out, line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl<P: DraftProvider> DraftProvider for RecordingDraft<P> {
    fn draft(&mut self, req: &DraftRequest<'_>) -> Result<Vec<Candidate>, SourceError> {
        let result = self.inner.draft(req);
        match &result {
            Ok(list) => self.lines.push(TraceLine {
                step: req.step,
                frontier_node: req.frontier_node,
                candidates: list.clone(),
                stalled: false,
            }),
            Err(SourceError::Stalled) => self.lines.push(TraceLine {
                step: req.step,
                frontier_node: req.frontier_node,
                candidates: Vec::new(),
                stalled: true,
            }),
            Err(_) => {}
        }
        result
    }
}
