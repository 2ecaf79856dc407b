//! Speculative token sources: draft providers and the fixed-width level rule.

mod replay;
mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{Child, NodeId, SpecTree, TokenId};

pub use replay::{RecordingDraft, ReplayDraft, TraceLine};
pub use synthetic::{SyntheticDraft, SyntheticDraftConfig, CALIBRATED_RANK_DECAY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: TokenId,
    pub prob: f64,
}

/// What a provider is asked for: `k` continuations of `verified ++ path`.
#[derive(Debug, Clone, Copy)]
pub struct DraftRequest<'a> {
    pub step: u64,
    pub frontier_node: NodeId,
    /// Committed tokens; the last one is the tree root.
    pub verified: &'a [TokenId],
    /// Tokens from the root's child down to the frontier node.
    pub path: &'a [TokenId],
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SourceError {
    /// No level this step; the pipeline proceeds without one.
    #[error("draft source stalled")]
    Stalled,
    /// Nothing more to draft; the run stops early.
    #[error("draft source exhausted")]
    Exhausted,
    #[error("insufficient candidates: needed {needed}, got {got}")]
    InsufficientCandidates { needed: usize, got: usize },
    #[error("invalid candidate list: {0}")]
    InvalidCandidates(String),
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error("trace line {line} is for step {found_step} node {found_node}, run asked for step {step} node {node}")]
    Mismatch {
        line: usize,
        step: u64,
        node: u64,
        found_step: u64,
        found_node: u64,
    },
    #[error("trace i/o: {0}")]
    Io(String),
}

pub trait DraftProvider {
    /// Returns `req.k` candidates in descending probability.
    fn draft(&mut self, req: &DraftRequest<'_>) -> Result<Vec<Candidate>, SourceError>;
}

impl<P: DraftProvider + ?Sized> DraftProvider for Box<P> {
    fn draft(&mut self, req: &DraftRequest<'_>) -> Result<Vec<Candidate>, SourceError> {
        (**self).draft(req)
    }
}

/// Tree width `w` and candidates per frontier node `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub w: usize,
    pub k: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { w: 64, k: 16 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.w < 1 {
            return Err("tree width w must be at least 1".into());
        }
        if self.k < 2 {
            return Err(format!(
                "k = {} but at least 2 candidates are required",
                self.k
            ));
        }
        Ok(())
    }
}

fn check_candidates(list: &[Candidate], k: usize, vocab: u32) -> Result<(), SourceError> {
    if list.len() < k {
        return Err(SourceError::InsufficientCandidates {
            needed: k,
            got: list.len(),
        });
    }
    if list.len() > k {
        return Err(SourceError::InvalidCandidates(format!(
            "{} candidates for k = {k}",
            list.len()
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(k);
    for (i, c) in list.iter().enumerate() {
        if c.token.0 >= vocab {
            return Err(SourceError::InvalidCandidates(format!(
                "token {} outside vocabulary {vocab}",
                c.token.0
            )));
        }
        if !(c.prob > 0.0 && c.prob <= 1.0) {
            return Err(SourceError::InvalidCandidates(format!(
                "probability {} outside (0, 1]",
                c.prob
            )));
        }
        if !seen.insert(c.token) {
            return Err(SourceError::InvalidCandidates(format!(
                "token {} listed twice",
                c.token.0
            )));
        }
        if i > 0 && list[i - 1].prob < c.prob {
            return Err(SourceError::InvalidCandidates(
                "probabilities not in descending order".into(),
            ));
        }
    }
    Ok(())
}

/// Drafts the next level: `k` candidates for every bottom-level node, ranked
/// by cumulative probability, the best `w` kept.
///
/// Ties in cumulative probability go to the lower parent index, then the
/// lower token id. The result is ordered for [`SpecTree::layer_append`].
pub fn expand_fixed_width<D: DraftProvider + ?Sized>(
    tree: &SpecTree,
    beam: &BeamConfig,
    draft: &mut D,
    verified: &[TokenId],
    step: u64,
) -> Result<Vec<Child>, SourceError> {
    let mut pool: Vec<(f64, Child)> = Vec::new();
    for parent in tree.bottom_level() {
        let path: Vec<TokenId> = tree.root_path(parent)[1..]
            .iter()
            .map(|&i| tree.tokens()[i])
            .collect();
        let req = DraftRequest {
            step,
            frontier_node: tree.ids()[parent],
            verified,
            path: &path,
            k: beam.k,
        };
        let list = draft.draft(&req)?;
        check_candidates(&list, beam.k, tree.vocab())?;
        let base = tree
            .cumulative_prob(parent)
            .expect("bottom level index is in range");
        pool.extend(list.into_iter().map(|c| {
            (
                base * c.prob,
                Child {
                    parent,
                    token: c.token,
                    prob: c.prob,
                },
            )
        }));
    }
    pool.sort_by(|(ca, a), (cb, b)| {
        cb.total_cmp(ca)
            .then(a.parent.cmp(&b.parent))
            .then(a.token.cmp(&b.token))
    });
    pool.truncate(beam.w);
    let mut level: Vec<Child> = pool.into_iter().map(|(_, c)| c).collect();
    level.sort_by(Child::layer_order);
    Ok(level)
}
