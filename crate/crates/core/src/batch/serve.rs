use std::collections::BTreeMap;
use std::io::BufRead;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::ToyModel;
use crate::pipeline::{percentile, Counters, Emission, LocalBank, RunMetrics, Session};
use crate::source::{SyntheticDraft, SyntheticDraftConfig};
use crate::tree::TokenId;

use super::{batched_step, split_width, BatchError, BatchMember, Scheduler};

/// A prompt given either verbatim or as a length to fill with seeded tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptSpec {
    Tokens(Vec<u32>),
    Length(usize),
}

/// One line of a workload file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub arrival_step: u64,
    pub prompt_tokens: PromptSpec,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: u64,
    pub arrival_step: u64,
    pub prompt: Vec<TokenId>,
    pub max_new_tokens: usize,
}

impl WorkloadEntry {
    pub fn resolve(&self, id: u64, vocab: u32, seed: u64) -> Result<Request, BatchError> {
        let prompt: Vec<TokenId> = match &self.prompt_tokens {
            PromptSpec::Tokens(t) => t.iter().map(|&x| TokenId(x)).collect(),
            PromptSpec::Length(n) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_add(1));
                (0..*n).map(|_| TokenId(rng.gen_range(0..vocab))).collect()
            }
        };
        if prompt.is_empty() {
            return Err(BatchError::Config(format!(
                "request {id} has an empty prompt"
            )));
        }
        if let Some(t) = prompt.iter().find(|t| t.0 >= vocab) {
            return Err(BatchError::Config(format!(
                "request {id}: token {} outside vocabulary {vocab}",
                t.0
            )));
        }
        Ok(Request {
            id,
            arrival_step: self.arrival_step,
            prompt,
            max_new_tokens: self.max_new_tokens,
        })
    }
}

/// Reads JSON Lines, skipping blank lines.
pub fn parse_workload(reader: impl BufRead) -> Result<Vec<WorkloadEntry>, BatchError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| BatchError::Workload {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| BatchError::Workload {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub batch_size: usize,
    /// Tree nodes drafted per step, shared among running requests.
    pub w_total: usize,
    #[serde(default)]
    pub max_nodes: Option<usize>,
    /// Request `i` drafts with seed `draft.seed ^ i`.
    pub draft: SyntheticDraftConfig,
    pub pipeline: crate::pipeline::PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestReport {
    pub id: u64,
    pub arrival_step: u64,
    pub admitted_step: u64,
    pub tokens: Vec<u32>,
    /// Output equals the sequential greedy decode of the prompt.
    pub lossless: bool,
    pub metrics: RunMetrics,
    /// Gaps between consecutive tokens, without the first one (pipeline fill).
    pub steady_gaps_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServeReport {
    pub batch_size: usize,
    pub requests: usize,
    pub tokens: usize,
    pub steps: u64,
    pub total_ms: f64,
    pub throughput_tps: f64,
    pub tbt_mean_ms: Option<f64>,
    pub tbt_p50: Option<f64>,
    pub tbt_p99: Option<f64>,
    /// Mean steady-state TBT of each request.
    pub per_request_tbt: Vec<Option<f64>>,
    pub max_packed_nodes: usize,
    pub lossless: bool,
    pub per_request: Vec<RequestReport>,
}

struct Live {
    session: Session<LocalBank>,
    draft: SyntheticDraft,
    expected: Vec<TokenId>,
    admitted_step: u64,
    admitted_ms: f64,
    prefill_ms: f64,
    emissions: Vec<Emission>,
    counters: Counters,
    exhausted: bool,
}

/// Runs a workload through one shared pipeline and reports per-request and
/// pooled latency. Time only advances while some request is running.
pub fn serve(
    model: Arc<ToyModel>,
    cfg: &ServeConfig,
    requests: &[Request],
) -> Result<ServeReport, BatchError> {
    if cfg.w_total == 0 {
        return Err(BatchError::Config("w_total must be at least 1".into()));
    }
    cfg.draft.validate().map_err(BatchError::Config)?;
    cfg.pipeline.validate(model.config().layers)?;
    if let Some(max) = cfg.max_nodes {
        if max == 0 {
            return Err(BatchError::Config("max_nodes must be at least 1".into()));
        }
    }
    let mut sched = Scheduler::new(cfg.batch_size)?;
    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by_key(|&i| (requests[i].arrival_step, i));
    let mut arrivals = order.into_iter().peekable();

    let mut live: BTreeMap<usize, Live> = BTreeMap::new();
    let mut done: Vec<Option<RequestReport>> = vec![None; requests.len()];
    let mut step: u64 = 0;
    let mut clock = 0.0;
    let mut max_packed = 0;
    let mut steps_run = 0;

    loop {
        retire(&mut live, &mut sched, &mut done, requests, clock)?;
        while let Some(i) = arrivals.next_if(|&i| requests[i].arrival_step <= step) {
            sched.arrive(i);
        }
        // New requests prefill before this step's decode work.
        let used: usize = live.values().map(|l| l.session.tree().len()).sum();
        let mut room = cfg.max_nodes.map(|max| max.saturating_sub(used));
        let admitted = sched.admit(|_| match &mut room {
            Some(r) if *r == 0 => false,
            Some(r) => {
                *r -= 1;
                true
            }
            None => true,
        });
        for i in admitted {
            let req = &requests[i];
            let generated = model.sequential_decode(&req.prompt, req.max_new_tokens)?;
            let mut draft_cfg = cfg.draft;
            draft_cfg.seed ^= i as u64;
            let reference = [req.prompt.clone(), generated.clone()].concat();
            let bank = LocalBank::new(Arc::clone(&model), &cfg.pipeline)?;
            let (session, prefill) =
                Session::new(Arc::clone(&model), cfg.pipeline.clone(), bank, &req.prompt)?;
            let admitted_ms = clock;
            clock += prefill.duration_ms;
            live.insert(
                i,
                Live {
                    session,
                    draft: SyntheticDraft::new(draft_cfg, model.config().vocab, reference),
                    expected: generated,
                    admitted_step: step,
                    admitted_ms,
                    prefill_ms: prefill.duration_ms,
                    emissions: Vec::new(),
                    counters: Counters::default(),
                    exhausted: false,
                },
            );
        }

        // Zero-token requests finish right after their prefill.
        retire(&mut live, &mut sched, &mut done, requests, clock)?;
        sched.check()?;

        if sched.running().is_empty() {
            if sched.queued() > 0 {
                return Err(BatchError::Invariant(
                    "queued request cannot be admitted into an empty batch".into(),
                ));
            }
            match arrivals.peek() {
                Some(&i) => {
                    step = step.max(requests[i].arrival_step);
                    continue;
                }
                None => break,
            }
        }

        let running = sched.running().to_vec();
        let widths = split_width(cfg.w_total, running.len());
        let mut members: Vec<BatchMember<'_>> = Vec::with_capacity(running.len());
        // `running` is ordered by admission and BTreeMap iterates by index,
        // so collect mutable borrows first and then arrange them.
        let mut by_index: BTreeMap<usize, &mut Live> =
            live.iter_mut().map(|(&i, l)| (i, l)).collect();
        for (&i, &w) in running.iter().zip(&widths) {
            let l = by_index.remove(&i).expect("running request is live");
            members.push(BatchMember {
                request_id: i as u64,
                session: &mut l.session,
                draft: &mut l.draft,
                width: w,
            });
        }
        let out = batched_step(
            &model,
            &cfg.pipeline.cost,
            cfg.pipeline.overlap,
            &mut members,
            cfg.max_nodes,
        )?;
        drop(members);
        max_packed = max_packed.max(out.packed_nodes);
        let end = clock + out.timing.duration_ms;
        for (&i, core) in running.iter().zip(&out.outcomes) {
            let l = live.get_mut(&i).expect("running request is live");
            let Some(core) = core else {
                l.exhausted = true;
                continue;
            };
            l.counters.steps += 1;
            l.counters.stalls += u64::from(core.stalled);
            l.counters.bubbles += u64::from(core.bubble);
            if let Some(hit) = core.hit {
                l.counters.verifications += 1;
                l.counters.hits += u64::from(hit);
                l.counters.flushes += u64::from(!hit);
            }
            if core.verified.is_some() {
                l.emissions.push(Emission {
                    step: core.step,
                    time_ms: end,
                });
            }
        }
        clock = end;
        step += 1;
        steps_run += 1;
    }

    let per_request: Vec<RequestReport> = done
        .into_iter()
        .map(|r| r.ok_or_else(|| BatchError::Invariant("request never completed".into())))
        .collect::<Result<_, _>>()?;
    Ok(summarize(
        cfg.batch_size,
        per_request,
        steps_run,
        clock,
        max_packed,
    ))
}

fn retire(
    live: &mut BTreeMap<usize, Live>,
    sched: &mut Scheduler,
    done: &mut [Option<RequestReport>],
    requests: &[Request],
    now: f64,
) -> Result<(), BatchError> {
    let finished: Vec<usize> = live
        .iter()
        .filter(|(&i, l)| l.exhausted || l.emissions.len() >= requests[i].max_new_tokens)
        .map(|(&i, _)| i)
        .collect();
    for i in finished {
        let l = live.remove(&i).expect("listed above");
        sched.complete(i)?;
        done[i] = Some(report_for(&requests[i], l, now));
    }
    Ok(())
}

fn report_for(req: &Request, l: Live, now: f64) -> RequestReport {
    let tokens = l.session.emitted();
    let lossless =
        l.expected.starts_with(tokens) && (l.exhausted || tokens.len() == l.expected.len());
    let metrics = RunMetrics::from_emissions(
        &l.emissions,
        l.counters,
        l.prefill_ms,
        l.admitted_ms + l.prefill_ms,
        now - l.admitted_ms,
    );
    let gaps: Vec<f64> = l
        .emissions
        .windows(2)
        .map(|w| w[1].time_ms - w[0].time_ms)
        .collect();
    RequestReport {
        steady_gaps_ms: if gaps.len() > 1 {
            gaps[1..].to_vec()
        } else {
            gaps
        },
        id: req.id,
        arrival_step: req.arrival_step,
        admitted_step: l.admitted_step,
        tokens: tokens.iter().map(|t| t.0).collect(),
        lossless,
        metrics,
    }
}

fn summarize(
    batch_size: usize,
    per_request: Vec<RequestReport>,
    steps: u64,
    total_ms: f64,
    max_packed_nodes: usize,
) -> ServeReport {
    let tokens: usize = per_request.iter().map(|r| r.tokens.len()).sum();
    let gaps: Vec<f64> = per_request
        .iter()
        .flat_map(|r| r.steady_gaps_ms.iter().copied())
        .collect();
    let mean = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
    ServeReport {
        batch_size,
        requests: per_request.len(),
        tokens,
        steps,
        total_ms,
        throughput_tps: if total_ms > 0.0 {
            tokens as f64 / (total_ms / 1000.0)
        } else {
            0.0
        },
        tbt_mean_ms: mean,
        tbt_p50: percentile(&gaps, 0.5),
        tbt_p99: percentile(&gaps, 0.99),
        per_request_tbt: per_request.iter().map(|r| r.metrics.tbt_mean_ms).collect(),
        max_packed_nodes,
        lossless: per_request.iter().all(|r| r.lossless),
        per_request,
    }
}
