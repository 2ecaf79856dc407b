use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Candidate, DraftProvider, DraftRequest, SourceError};
use crate::tree::TokenId;

/// Rank decay that puts cumulative top-32 accuracy at 0.99 when the true
/// token is ranked first 62% of the time and never missing outright:
/// `0.62 + 0.38 * (1 - d^31) = 0.99`.
pub const CALIBRATED_RANK_DECAY: f64 = 0.889_281_461_448_013_7;

/// Statistical stand-in for a draft model.
///
/// Per call, the true next token is ranked first with probability `top1_hit`,
/// absent with probability `miss_prob`, and otherwise placed at rank
/// `2 + G` where `G` is geometric with continuation probability `rank_decay`
/// (ranks beyond `k` count as absent). `stall_prob` is the chance that a call
/// reports the source as stalled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDraftConfig {
    pub top1_hit: f64,
    pub rank_decay: f64,
    pub miss_prob: f64,
    #[serde(default)]
    pub stall_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticDraftConfig {
    fn default() -> Self {
        Self {
            top1_hit: 0.62,
            rank_decay: CALIBRATED_RANK_DECAY,
            miss_prob: 0.0,
            stall_prob: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticDraftConfig {
    pub fn perfect(seed: u64) -> Self {
        Self {
            top1_hit: 1.0,
            rank_decay: 0.0,
            miss_prob: 0.0,
            stall_prob: 0.0,
            seed,
        }
    }

    /// Top-1 with probability `p`, otherwise absent.
    pub fn per_step_hit(p: f64, seed: u64) -> Self {
        Self {
            top1_hit: p,
            rank_decay: 0.0,
            miss_prob: 1.0 - p,
            stall_prob: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("top1_hit", self.top1_hit),
            ("rank_decay", self.rank_decay),
            ("miss_prob", self.miss_prob),
            ("stall_prob", self.stall_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.top1_hit + self.miss_prob > 1.0 + 1e-12 {
            return Err(format!(
                "top1_hit + miss_prob = {} exceeds 1",
                self.top1_hit + self.miss_prob
            ));
        }
        Ok(())
    }

    /// Probability that the true token appears among the top `k`.
    pub fn hit_at(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let tail = (1.0 - self.top1_hit - self.miss_prob).max(0.0);
        self.top1_hit + tail * (1.0 - self.rank_decay.powi(k as i32 - 1))
    }
}

/// Probability attached to rank `r` (1-based): `0.5^r`.
pub fn rank_prob(rank: usize) -> f64 {
    0.5f64.powi(rank as i32)
}

pub struct SyntheticDraft {
    cfg: SyntheticDraftConfig,
    vocab: u32,
    reference: Vec<TokenId>,
    rng: ChaCha8Rng,
}

impl SyntheticDraft {
    /// `reference` is the true sequence (prompt followed by the model's
    /// greedy continuation). Contexts that leave it get a pseudo-random
    /// "true" token.
    pub fn new(cfg: SyntheticDraftConfig, vocab: u32, reference: Vec<TokenId>) -> Self {
        Self {
            cfg,
            vocab,
            reference,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    pub fn config(&self) -> &SyntheticDraftConfig {
        &self.cfg
    }

    fn oracle_next(&mut self, verified: &[TokenId], path: &[TokenId]) -> TokenId {
        let n = verified.len() + path.len();
        let on_reference = n < self.reference.len()
            && self.reference[..verified.len()] == *verified
            && self.reference[verified.len()..n] == *path;
        if on_reference {
            self.reference[n]
        } else {
            TokenId(self.rng.gen_range(0..self.vocab))
        }
    }

    /// Rank (1-based) of the true token, or `None` if it is not listed.
    pub fn sample_rank(&mut self, k: usize) -> Option<usize> {
        let u: f64 = self.rng.gen();
        if u < self.cfg.top1_hit {
            return Some(1);
        }
        if u < self.cfg.top1_hit + self.cfg.miss_prob {
            return None;
        }
        let mut rank = 2;
        while rank <= k {
            if self.rng.gen::<f64>() >= self.cfg.rank_decay {
                return Some(rank);
            }
            rank += 1;
        }
        None
    }

    /// `k` candidates for a context whose true continuation is `truth`.
    pub fn candidates_for(&mut self, truth: TokenId, k: usize) -> Vec<Candidate> {
        assert!(
            (k as u64) < self.vocab as u64,
            "k = {k} leaves no room for fillers in a vocabulary of {}",
            self.vocab
        );
        let rank = self.sample_rank(k);
        let mut used = std::collections::HashSet::with_capacity(k + 1);
        used.insert(truth);
        (1..=k)
            .map(|r| {
                let token = if rank == Some(r) {
                    truth
                } else {
                    loop {
                        let t = TokenId(self.rng.gen_range(0..self.vocab));
                        if used.insert(t) {
                            break t;
                        }
                    }
                };
                Candidate {
                    token,
                    prob: rank_prob(r),
                }
            })
            .collect()
    }
}

impl DraftProvider for SyntheticDraft {
    fn draft(&mut self, req: &DraftRequest<'_>) -> Result<Vec<Candidate>, SourceError> {
        if self.cfg.stall_prob > 0.0 && self.rng.gen::<f64>() < self.cfg.stall_prob {
            return Err(SourceError::Stalled);
        }
        if req.k as u64 >= self.vocab as u64 {
            return Err(SourceError::InvalidCandidates(format!(
                "k = {} needs a vocabulary larger than {}",
                req.k, self.vocab
            )));
        }
        let truth = self.oracle_next(req.verified, req.path);
        Ok(self.candidates_for(truth, req.k))
    }
}
