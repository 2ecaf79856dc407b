use std::io::Write;

use serde::{Deserialize, Serialize};

/// Nearest-rank percentile (`q` in `(0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Aggregate decode statistics.
///
/// Gap-based figures (`tbt_*`, `steps_per_token`) describe the steady state:
/// the gap between the first and second token, which includes the initial
/// pipeline fill, is left out whenever later gaps exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tokens: usize,
    pub steps: u64,
    pub tbt_mean_ms: Option<f64>,
    pub tbt_p50: Option<f64>,
    pub tbt_p99: Option<f64>,
    pub steps_per_token: Option<f64>,
    pub hit_rate: Option<f64>,
    pub flush_count: u64,
    pub throughput_tps: f64,
    pub verifications: u64,
    pub hits: u64,
    pub stalls: u64,
    pub bubbles: u64,
    pub prefill_ms: f64,
    pub first_token_ms: Option<f64>,
    pub total_ms: f64,
}

/// Per-emission record used to build [`RunMetrics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emission {
    pub step: u64,
    pub time_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub steps: u64,
    pub verifications: u64,
    pub hits: u64,
    pub flushes: u64,
    pub stalls: u64,
    pub bubbles: u64,
}

fn steady<T: Copy>(gaps: &[T]) -> &[T] {
    if gaps.len() > 1 {
        &gaps[1..]
    } else {
        gaps
    }
}

impl RunMetrics {
    /// `start_ms` is when decoding began (end of prefill); `total_ms` is
    /// the whole run including prefill.
    pub fn from_emissions(
        emissions: &[Emission],
        counters: Counters,
        prefill_ms: f64,
        start_ms: f64,
        total_ms: f64,
    ) -> Self {
        let time_gaps: Vec<f64> = emissions
            .windows(2)
            .map(|w| w[1].time_ms - w[0].time_ms)
            .collect();
        let step_gaps: Vec<f64> = emissions
            .windows(2)
            .map(|w| (w[1].step - w[0].step) as f64)
            .collect();
        let tbt = steady(&time_gaps);
        let tokens = emissions.len();
        Self {
            tokens,
            steps: counters.steps,
            tbt_mean_ms: mean(tbt),
            tbt_p50: percentile(tbt, 0.5),
            tbt_p99: percentile(tbt, 0.99),
            steps_per_token: mean(steady(&step_gaps)),
            hit_rate: (counters.verifications > 0)
                .then(|| counters.hits as f64 / counters.verifications as f64),
            flush_count: counters.flushes,
            throughput_tps: if total_ms > 0.0 {
                tokens as f64 / (total_ms / 1000.0)
            } else {
                0.0
            },
            verifications: counters.verifications,
            hits: counters.hits,
            stalls: counters.stalls,
            bubbles: counters.bubbles,
            prefill_ms,
            first_token_ms: emissions.first().map(|e| e.time_ms - start_ms),
            total_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Compute,
    Prune,
    Transmit,
    Idle,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Compute => "compute",
            Phase::Prune => "prune",
            Phase::Transmit => "transmit",
            Phase::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub stage: usize,
    pub phase: Phase,
    pub start_ms: f64,
    pub end_ms: f64,
    pub resident_nodes: usize,
    pub hit: Option<bool>,
    pub flush: bool,
}

/// Per-stage timeline, one row per phase a stage spent time in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "step,stage,phase,start_ms,end_ms,resident_nodes,hit,flush";

impl StepTrace {
    /// CSV with a leading `# config=<json>` comment when `config` is given.
    /// `hit` is `1`, `0`, or empty for steps without a verification.
    pub fn write_csv(&self, config: Option<&str>, mut out: impl Write) -> std::io::Result<()> {
        if let Some(c) = config {
            writeln!(out, "# config={c}")?;
        }
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.rows {
            let hit = match r.hit {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{},{}",
                r.step,
                r.stage,
                r.phase.as_str(),
                r.start_ms,
                r.end_ms,
                r.resident_nodes,
                hit,
                u8::from(r.flush)
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self, config: Option<&str>) -> String {
        let mut buf = Vec::new();
        self.write_csv(config, &mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is ascii")
    }
}
