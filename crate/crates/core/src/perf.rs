//! Step-cost model, expected time-between-tokens, and width selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerfError {
    #[error("width must be at least 1")]
    ZeroWidth,
    #[error("no stage costs given")]
    NoStages,
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("no candidate widths")]
    NoCandidates,
    #[error("width {0} not covered by the accuracy curve")]
    Uncovered(usize),
    #[error("no accuracy samples")]
    NoSamples,
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
    #[error("invalid accuracy curve: {0}")]
    InvalidCurve(String),
}

/// Simulated costs, all in milliseconds.
///
/// Computing `w` tokens in one stage costs `base_ms` plus `slope_ms_per_quantum`
/// for every full `quantum` beyond the first, so cost is flat inside a bucket
/// and jumps at multiples of `quantum`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub base_ms: f64,
    pub slope_ms_per_quantum: f64,
    pub quantum: usize,
    pub prune_ms: f64,
    pub transmit_base_ms: f64,
    pub transmit_per_node_ms: f64,
    pub draft_ms: f64,
    pub batch_overhead_ms: f64,
}

impl Default for CostModel {
    /// Loosely sized so an 8-stage vanilla pipeline lands near 300 ms per token.
    fn default() -> Self {
        Self {
            base_ms: 36.0,
            slope_ms_per_quantum: 2.5,
            quantum: 64,
            prune_ms: 0.4,
            transmit_base_ms: 1.2,
            transmit_per_node_ms: 0.005,
            draft_ms: 17.0,
            batch_overhead_ms: 0.0,
        }
    }
}

impl CostModel {
    /// Pure compute cost: no pruning, transmission or draft overheads.
    pub fn compute_only(base_ms: f64, slope_ms_per_quantum: f64, quantum: usize) -> Self {
        Self {
            base_ms,
            slope_ms_per_quantum,
            quantum,
            prune_ms: 0.0,
            transmit_base_ms: 0.0,
            transmit_per_node_ms: 0.0,
            draft_ms: 0.0,
            batch_overhead_ms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        if self.quantum < 1 {
            return Err(PerfError::InvalidCost("quantum must be at least 1".into()));
        }
        for (name, v) in [
            ("base_ms", self.base_ms),
            ("slope_ms_per_quantum", self.slope_ms_per_quantum),
            ("prune_ms", self.prune_ms),
            ("transmit_base_ms", self.transmit_base_ms),
            ("transmit_per_node_ms", self.transmit_per_node_ms),
            ("draft_ms", self.draft_ms),
            ("batch_overhead_ms", self.batch_overhead_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PerfError::InvalidCost(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn step_cost(&self, w: usize) -> Result<f64, PerfError> {
        if w == 0 {
            return Err(PerfError::ZeroWidth);
        }
        let leaps = w.div_ceil(self.quantum) - 1;
        Ok(self.base_ms + self.slope_ms_per_quantum * leaps as f64)
    }

    /// Compute time for a stage that processes `rows` tokens (zero when idle).
    pub fn compute_ms(&self, rows: usize) -> f64 {
        self.step_cost(rows).unwrap_or(0.0)
    }

    pub fn transmit_ms(&self, nodes: usize) -> f64 {
        if nodes == 0 {
            0.0
        } else {
            self.transmit_base_ms + self.transmit_per_node_ms * nodes as f64
        }
    }

    /// Every cost multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base_ms: self.base_ms * factor,
            slope_ms_per_quantum: self.slope_ms_per_quantum * factor,
            quantum: self.quantum,
            prune_ms: self.prune_ms * factor,
            transmit_base_ms: self.transmit_base_ms * factor,
            transmit_per_node_ms: self.transmit_per_node_ms * factor,
            draft_ms: self.draft_ms * factor,
            batch_overhead_ms: self.batch_overhead_ms * factor,
        }
    }
}

fn check_prob(p: f64) -> Result<(), PerfError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(PerfError::Probability(p))
    }
}

/// Expected time between tokens for per-stage times `t`:
/// `max_i t_i + (1 - p) * sum_i t_i`.
pub fn expected_tbt_general(t: &[f64], p: f64) -> Result<f64, PerfError> {
    if t.is_empty() {
        return Err(PerfError::NoStages);
    }
    check_prob(p)?;
    let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = t.iter().sum();
    Ok(max + (1.0 - p) * sum)
}

/// Expected time between tokens with `m` identical stages: `t + (1 - p) * m * t`.
pub fn expected_tbt_uniform(t: f64, p: f64, m: usize) -> f64 {
    t + (1.0 - p) * m as f64 * t
}

/// Per-width hit probability, non-decreasing in width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveFile", into = "CurveFile")]
pub struct AccuracyCurve {
    points: BTreeMap<usize, f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveFile {
    points: Vec<CurvePoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurvePoint {
    width: usize,
    accuracy: f64,
}

impl TryFrom<CurveFile> for AccuracyCurve {
    type Error = PerfError;

    fn try_from(file: CurveFile) -> Result<Self, PerfError> {
        AccuracyCurve::new(file.points.into_iter().map(|p| (p.width, p.accuracy)))
    }
}

impl From<AccuracyCurve> for CurveFile {
    fn from(curve: AccuracyCurve) -> Self {
        CurveFile {
            points: curve
                .points
                .into_iter()
                .map(|(width, accuracy)| CurvePoint { width, accuracy })
                .collect(),
        }
    }
}

impl AccuracyCurve {
    pub fn new(points: impl IntoIterator<Item = (usize, f64)>) -> Result<Self, PerfError> {
        let mut map = BTreeMap::new();
        for (w, p) in points {
            if w == 0 {
                return Err(PerfError::InvalidCurve("width 0".into()));
            }
            check_prob(p)?;
            if map.insert(w, p).is_some() {
                return Err(PerfError::InvalidCurve(format!("width {w} listed twice")));
            }
        }
        if map.is_empty() {
            return Err(PerfError::InvalidCurve("no points".into()));
        }
        let values: Vec<f64> = map.values().copied().collect();
        if values.windows(2).any(|v| v[1] < v[0]) {
            return Err(PerfError::InvalidCurve(
                "accuracy must be non-decreasing in width".into(),
            ));
        }
        Ok(Self { points: map })
    }

    pub fn at(&self, w: usize) -> Option<f64> {
        self.points.get(&w).copied()
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.points.iter().map(|(&w, &p)| (w, p))
    }
}

/// Width minimising the uniform expected time between tokens; ties go to the
/// smaller width.
pub fn select_width(
    cost: &CostModel,
    acc: &AccuracyCurve,
    m: usize,
    candidates: &[usize],
) -> Result<usize, PerfError> {
    if candidates.is_empty() {
        return Err(PerfError::NoCandidates);
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(usize, f64)> = None;
    for w in sorted {
        let p = acc.at(w).ok_or(PerfError::Uncovered(w))?;
        let tbt = expected_tbt_uniform(cost.step_cost(w)?, p, m);
        // Relative tolerance so that rescaling all costs cannot flip a tie.
        let better = match best {
            None => true,
            Some((_, b)) => tbt < b && (b - tbt) > 1e-12 * b.abs(),
        };
        if better {
            best = Some((w, tbt));
        }
    }
    Ok(best.unwrap().0)
}

/// Hits observed over a number of verifications at one width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySample {
    pub width: usize,
    pub hits: u64,
    pub trials: u64,
}

/// Per-width hit rates, made non-decreasing by weighted isotonic regression
/// (pool-adjacent-violators, weights = trials).
pub fn fit_accuracy_curve(samples: &[AccuracySample]) -> Result<AccuracyCurve, PerfError> {
    let mut per_width: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for s in samples {
        let e = per_width.entry(s.width).or_default();
        e.0 += s.hits;
        e.1 += s.trials;
    }
    per_width.retain(|_, (_, trials)| *trials > 0);
    if per_width.is_empty() {
        return Err(PerfError::NoSamples);
    }

    // Blocks of (value, weight, count).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    for &(hits, trials) in per_width.values() {
        blocks.push((hits as f64 / trials as f64, trials as f64, 1));
        while blocks.len() > 1 {
            let (v2, w2, c2) = blocks[blocks.len() - 1];
            let (v1, w1, c1) = blocks[blocks.len() - 2];
            if v1 <= v2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2, c1 + c2));
        }
    }
    let fitted = blocks
        .iter()
        .flat_map(|&(v, _, c)| std::iter::repeat_n(v.clamp(0.0, 1.0), c));
    AccuracyCurve::new(per_width.keys().copied().zip(fitted))
}
