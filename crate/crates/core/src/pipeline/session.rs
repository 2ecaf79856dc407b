//! The coordinator: owns the tree and the verified sequence, drives a stage
//! bank through one step at a time and checks consistency after each step.

use std::collections::HashSet;
use std::sync::Arc;

use serde::Serialize;

use crate::model::ToyModel;
use crate::perf::CostModel;
use crate::source::{expand_fixed_width, BeamConfig, DraftProvider, SourceError};
use crate::tree::{NodeId, SpecTree, TokenId};

use super::bank::{ComputeResult, LocalBank, StageBank};
use super::metrics::{Counters, Emission, Phase, RunMetrics, StepTrace, TraceRow};
use super::stage::{PruneDirective, PruneReport, StageAudit, StageMessage};
use super::worker::WorkerBank;
use super::{Mode, PipelineConfig, PipelineError};

/// Counts of tree levels entering and leaving the pipeline. Every level that
/// was injected is either still resident, was consumed by a verification,
/// or was discarded by a prune or flush.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LevelLedger {
    pub injected: u64,
    pub consumed: u64,
    pub discarded: u64,
}

impl LevelLedger {
    pub fn balances(&self, resident: u64) -> bool {
        self.injected == self.consumed + self.discarded + resident
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageActivity {
    /// Rows pushed through the stage's layers this step.
    pub rows: usize,
    pub pruned: bool,
    /// Nodes sent to the next stage.
    pub sent_nodes: usize,
    /// Nodes waiting at the stage after the step.
    pub resident_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTiming {
    pub compute_ms: Vec<f64>,
    pub prune_ms: Vec<f64>,
    pub transmit_ms: Vec<f64>,
    /// Stage work, before any wait on the draft source.
    pub busy_ms: f64,
    /// Draft time not hidden behind stage work.
    pub draft_wait_ms: f64,
    pub duration_ms: f64,
}

impl StepTiming {
    /// Without overlap a stage prunes after computing and all stages then
    /// transmit together; with overlap each stage transmits while pruning.
    pub fn from_activity(
        cost: &CostModel,
        overlap: bool,
        stages: &[StageActivity],
        drafted: bool,
        extra_compute_ms: f64,
    ) -> Self {
        let compute_ms: Vec<f64> = stages
            .iter()
            .map(|s| {
                if s.rows > 0 {
                    cost.compute_ms(s.rows) + extra_compute_ms
                } else {
                    0.0
                }
            })
            .collect();
        let prune_ms: Vec<f64> = stages
            .iter()
            .map(|s| if s.pruned { cost.prune_ms } else { 0.0 })
            .collect();
        let transmit_ms: Vec<f64> = stages
            .iter()
            .map(|s| cost.transmit_ms(s.sent_nodes))
            .collect();
        let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, f64::max);
        let busy_ms = if overlap {
            max(&mut (0..stages.len()).map(|i| compute_ms[i] + prune_ms[i].max(transmit_ms[i])))
        } else {
            max(&mut (0..stages.len()).map(|i| compute_ms[i] + prune_ms[i]))
                + max(&mut transmit_ms.iter().copied())
        };
        let draft_wait_ms = if drafted {
            (cost.draft_ms - busy_ms).max(0.0)
        } else {
            0.0
        };
        Self {
            compute_ms,
            prune_ms,
            transmit_ms,
            busy_ms,
            draft_wait_ms,
            duration_ms: busy_ms + draft_wait_ms,
        }
    }

    /// Timeline rows for a step that starts at `start`.
    pub fn trace_rows(
        &self,
        step: u64,
        start: f64,
        overlap: bool,
        stages: &[StageActivity],
        hit: Option<bool>,
        flush: bool,
    ) -> Vec<TraceRow> {
        let barrier = (0..stages.len())
            .map(|i| self.compute_ms[i] + self.prune_ms[i])
            .fold(0.0, f64::max);
        let mut rows = Vec::new();
        for (i, s) in stages.iter().enumerate() {
            let (c, p, t) = (self.compute_ms[i], self.prune_ms[i], self.transmit_ms[i]);
            let mut push = |phase, from: f64, len: f64| {
                rows.push(TraceRow {
                    step,
                    stage: i,
                    phase,
                    start_ms: start + from,
                    end_ms: start + from + len,
                    resident_nodes: s.resident_nodes,
                    hit,
                    flush,
                })
            };
            if c == 0.0 && p == 0.0 && t == 0.0 {
                push(Phase::Idle, 0.0, self.duration_ms);
                continue;
            }
            if c > 0.0 {
                push(Phase::Compute, 0.0, c);
            }
            if p > 0.0 {
                push(Phase::Prune, c, p);
            }
            if t > 0.0 {
                push(Phase::Transmit, if overlap { c } else { barrier }, t);
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepOutcome {
    pub step: u64,
    /// Token produced by the model at the last stage, if the root was ready.
    pub verified: Option<TokenId>,
    /// Whether the token matched a drafted child; `None` without verification.
    pub hit: Option<bool>,
    /// Stages whose in-flight level was invalidated (all of them on a miss).
    pub flush_depth: usize,
    pub emitted: bool,
    pub drafted: bool,
    pub stalled: bool,
    /// A hit left nothing to feed into the first stage.
    pub bubble: bool,
    pub injected_nodes: usize,
    pub stages: Vec<StageActivity>,
    pub timing: StepTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefillRecord {
    pub prompt_len: usize,
    pub compute_ms: Vec<f64>,
    pub transmit_ms: Vec<f64>,
    pub duration_ms: f64,
}

impl PrefillRecord {
    fn new(cost: &CostModel, stages: usize, prompt_len: usize) -> Self {
        let compute_ms = vec![cost.compute_ms(prompt_len); stages];
        let transmit_ms: Vec<f64> = (0..stages)
            .map(|i| {
                if i + 1 < stages {
                    cost.transmit_ms(prompt_len)
                } else {
                    0.0
                }
            })
            .collect();
        let duration_ms = compute_ms.iter().sum::<f64>() + transmit_ms.iter().sum::<f64>();
        Self {
            prompt_len,
            compute_ms,
            transmit_ms,
            duration_ms,
        }
    }

    /// Stages run one after another, each handing the prompt down.
    pub fn trace_rows(&self) -> Vec<TraceRow> {
        let mut rows = Vec::new();
        let mut t = 0.0;
        for i in 0..self.compute_ms.len() {
            for (phase, len) in [
                (Phase::Compute, self.compute_ms[i]),
                (Phase::Transmit, self.transmit_ms[i]),
            ] {
                if len > 0.0 {
                    rows.push(TraceRow {
                        step: 0,
                        stage: i,
                        phase,
                        start_ms: t,
                        end_ms: t + len,
                        resident_nodes: 0,
                        hit: None,
                        flush: false,
                    });
                    t += len;
                }
            }
        }
        rows
    }
}

/// Result of the drafting phase of a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingStep {
    pub step: u64,
    pub drafted: bool,
    pub stalled: bool,
}

/// Step outcome before timing is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCore {
    pub step: u64,
    pub verified: Option<TokenId>,
    pub hit: Option<bool>,
    pub flush_depth: usize,
    pub drafted: bool,
    pub stalled: bool,
    pub bubble: bool,
    pub injected_nodes: usize,
    pub stages: Vec<StageActivity>,
}

impl StepCore {
    pub fn with_timing(self, timing: StepTiming) -> StepOutcome {
        StepOutcome {
            step: self.step,
            verified: self.verified,
            hit: self.hit,
            flush_depth: self.flush_depth,
            emitted: self.verified.is_some(),
            drafted: self.drafted,
            stalled: self.stalled,
            bubble: self.bubble,
            injected_nodes: self.injected_nodes,
            stages: self.stages,
            timing,
        }
    }
}

pub struct Session<B: StageBank> {
    model: Arc<ToyModel>,
    cfg: PipelineConfig,
    bank: B,
    tree: SpecTree,
    verified: Vec<TokenId>,
    prompt_len: usize,
    step: u64,
    ledger: LevelLedger,
}

impl<B: StageBank> Session<B> {
    /// Prefills every stage with `prompt`; its last token becomes the root.
    pub fn new(
        model: Arc<ToyModel>,
        cfg: PipelineConfig,
        mut bank: B,
        prompt: &[TokenId],
    ) -> Result<(Self, PrefillRecord), PipelineError> {
        cfg.validate(model.config().layers)?;
        let Some(&last) = prompt.last() else {
            return Err(PipelineError::Config("empty prompt".into()));
        };
        if bank.stage_count() != cfg.stages {
            return Err(PipelineError::Config(format!(
                "bank has {} stages, config {}",
                bank.stage_count(),
                cfg.stages
            )));
        }
        let tree = SpecTree::new_root(last, model.config().vocab)?;
        if let Some(bad) = prompt.iter().find(|t| t.0 >= model.config().vocab) {
            return Err(PipelineError::Config(format!(
                "prompt token {} outside vocabulary {}",
                bad.0,
                model.config().vocab
            )));
        }
        bank.prefill(prompt, &tree.level_snapshot(0)?)?;
        let record = PrefillRecord::new(&cfg.cost, cfg.stages, prompt.len());
        let session = Self {
            model,
            bank,
            tree,
            verified: prompt.to_vec(),
            prompt_len: prompt.len(),
            step: 0,
            ledger: LevelLedger {
                injected: 1,
                ..LevelLedger::default()
            },
            cfg,
        };
        Ok((session, record))
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Arc<ToyModel> {
        &self.model
    }

    pub fn tree(&self) -> &SpecTree {
        &self.tree
    }

    /// Prompt followed by every verified token.
    pub fn verified(&self) -> &[TokenId] {
        &self.verified
    }

    pub fn emitted(&self) -> &[TokenId] {
        &self.verified[self.prompt_len..]
    }

    pub fn ledger(&self) -> LevelLedger {
        self.ledger
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn bank(&self) -> &B {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut B {
        &mut self.bank
    }

    /// Drafting phase: appends a new bottom level of at most `width` nodes.
    /// `None` means the source is exhausted and the run should stop.
    pub fn draft_level(
        &mut self,
        draft: &mut dyn DraftProvider,
        width: usize,
    ) -> Result<Option<PendingStep>, PipelineError> {
        let step = self.step + 1;
        let mut pending = PendingStep {
            step,
            drafted: false,
            stalled: false,
        };
        if self.cfg.mode == Mode::SpecPipe {
            let beam = BeamConfig {
                w: width,
                k: self.cfg.beam.k,
            };
            match expand_fixed_width(&self.tree, &beam, draft, &self.verified, step) {
                Ok(children) => {
                    self.tree = self.tree.layer_append(&children)?;
                    pending.drafted = true;
                }
                Err(SourceError::Stalled) => pending.stalled = true,
                Err(SourceError::Exhausted) => return Ok(None),
                Err(e) => return Err(PipelineError::Source(e)),
            }
        }
        self.step = step;
        Ok(Some(pending))
    }

    /// Starts a step without drafting, e.g. when the batch is out of room.
    pub fn hold(&mut self) -> PendingStep {
        self.step += 1;
        PendingStep {
            step: self.step,
            drafted: false,
            stalled: false,
        }
    }

    fn bottom_message(&self) -> Result<StageMessage, PipelineError> {
        let level = self.tree.levels() - 1;
        Ok(StageMessage {
            snapshot: self.tree.level_snapshot(level)?,
            position: self.verified.len() - 1 + level,
            hidden: None,
        })
    }

    /// Verification, pruning, transmission and consistency checks.
    pub fn complete_step(
        &mut self,
        pending: PendingStep,
        compute: ComputeResult,
    ) -> Result<StepCore, PipelineError> {
        let m = self.cfg.stages;
        if compute.rows.len() != m {
            return Err(PipelineError::Invariant(format!(
                "{} compute reports for {m} stages",
                compute.rows.len()
            )));
        }
        let drafted_ids: HashSet<NodeId> = if pending.drafted {
            self.tree.ids()[self.tree.bottom_level()]
                .iter()
                .copied()
                .collect()
        } else {
            HashSet::new()
        };
        let mut core = StepCore {
            step: pending.step,
            verified: None,
            hit: None,
            flush_depth: 0,
            drafted: pending.drafted,
            stalled: pending.stalled,
            bubble: false,
            injected_nodes: 0,
            stages: compute
                .rows
                .iter()
                .map(|&rows| StageActivity {
                    rows,
                    ..StageActivity::default()
                })
                .collect(),
        };
        let mut flushed_ids: Option<Vec<NodeId>> = None;

        let inject = match compute.head {
            Some((node, token)) => {
                let old_root = self.tree.ids()[0];
                if node != old_root {
                    return Err(PipelineError::Invariant(format!(
                        "last stage finished node {} but the root is {}",
                        node.0, old_root.0
                    )));
                }
                self.verified.push(token);
                core.verified = Some(token);
                self.ledger.consumed += 1;
                let child = match self.cfg.mode {
                    Mode::SpecPipe => self.tree.find_child(0, token),
                    Mode::VanillaPp => None,
                };
                match child {
                    Some(c) => {
                        core.hit = Some(true);
                        let reports = self.bank.prune(&PruneDirective::Hit {
                            old_root,
                            new_root: self.tree.ids()[c],
                        })?;
                        let emptied = self.settle_prune(&reports)?;
                        core.flush_depth = emptied;
                        let (pruned, _) = self.tree.to_subtree_prune(c)?;
                        self.tree = pruned;
                        let bottom = &self.tree.ids()[self.tree.bottom_level()];
                        if pending.drafted && drafted_ids.contains(&bottom[0]) {
                            Some(self.bottom_message()?)
                        } else {
                            core.bubble = true;
                            None
                        }
                    }
                    None => {
                        core.hit = Some(false);
                        let reports = self.bank.prune(&PruneDirective::Flush { old_root })?;
                        self.settle_prune(&reports)?;
                        core.flush_depth = m;
                        flushed_ids = Some(self.tree.ids().to_vec());
                        self.tree = SpecTree::rooted_at(
                            token,
                            self.model.config().vocab,
                            self.tree.next_id(),
                        )?;
                        Some(self.bottom_message()?)
                    }
                }
            }
            None if pending.drafted => Some(self.bottom_message()?),
            None => None,
        };
        for s in &mut core.stages {
            s.pruned = core.verified.is_some();
        }
        if let Some(msg) = &inject {
            core.injected_nodes = msg.len();
            self.ledger.injected += 1;
        }

        let sent = self.bank.transmit(inject)?;
        for (s, n) in core.stages.iter_mut().zip(sent) {
            s.sent_nodes = n;
        }
        let audits = self.bank.audit()?;
        for (s, a) in core.stages.iter_mut().zip(&audits) {
            s.resident_nodes = a.inbox.len() + a.outbox.len();
        }
        self.check(&audits, flushed_ids.as_deref())?;
        Ok(core)
    }

    /// Updates the ledger after a prune; returns how many stages (other than
    /// the last, whose packet was the verified root) lost their packet.
    fn settle_prune(&mut self, reports: &[PruneReport]) -> Result<usize, PipelineError> {
        let (last, rest) = reports.split_last().expect("at least two stages");
        if last.packets_emptied != 1 {
            return Err(PipelineError::Invariant(
                "verified root packet was not retired at the last stage".into(),
            ));
        }
        let emptied: usize = rest.iter().map(|r| r.packets_emptied).sum();
        self.ledger.discarded += emptied as u64;
        Ok(emptied)
    }

    fn check(
        &self,
        audits: &[StageAudit],
        flushed: Option<&[NodeId]>,
    ) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::Invariant(msg));
        #[cfg(debug_assertions)]
        self.tree.validate()?;
        let resident: u64 = audits.iter().map(|a| a.packets() as u64).sum();
        if !self.ledger.balances(resident) {
            return fail(format!(
                "level ledger out of balance: {:?} with {resident} resident",
                self.ledger
            ));
        }
        let tree_ids: HashSet<NodeId> = self.tree.ids().iter().copied().collect();
        let flushed: HashSet<NodeId> = flushed.unwrap_or(&[]).iter().copied().collect();
        for a in audits {
            if a.mask_ids != a.kv_speculative {
                return fail(format!(
                    "stage {}: local mask {:?} does not match cached nodes {:?}",
                    a.stage, a.mask_ids, a.kv_speculative
                ));
            }
            if a.verified_len + 1 != self.verified.len() {
                return fail(format!(
                    "stage {}: {} verified cache rows for {} verified tokens",
                    a.stage,
                    a.verified_len,
                    self.verified.len()
                ));
            }
            for id in a.resident_ids() {
                if flushed.contains(&id) {
                    return fail(format!(
                        "stage {} still holds node {} after a flush",
                        a.stage, id.0
                    ));
                }
                if !tree_ids.contains(&id) {
                    return fail(format!(
                        "stage {} holds node {} which is not in the tree",
                        a.stage, id.0
                    ));
                }
            }
        }
        Ok(())
    }

    /// One full step with this session's own width and timing.
    pub fn step(
        &mut self,
        draft: &mut dyn DraftProvider,
    ) -> Result<Option<StepOutcome>, PipelineError> {
        let Some(pending) = self.draft_level(draft, self.cfg.beam.w)? else {
            return Ok(None);
        };
        let compute = self.bank.compute()?;
        let core = self.complete_step(pending, compute)?;
        let timing = StepTiming::from_activity(
            &self.cfg.cost,
            self.cfg.overlap,
            &core.stages,
            core.drafted,
            0.0,
        );
        Ok(Some(core.with_timing(timing)))
    }

    /// Steps until the next verification, e.g. to refill after a flush.
    pub fn refill(
        &mut self,
        draft: &mut dyn DraftProvider,
    ) -> Result<Vec<StepOutcome>, PipelineError> {
        let mut out = Vec::new();
        let cap = 4 * self.cfg.stages + 4;
        while out.len() < cap {
            let Some(o) = self.step(draft)? else {
                break;
            };
            let done = o.verified.is_some();
            out.push(o);
            if done {
                return Ok(out);
            }
        }
        Ok(out)
    }

    /// Stages currently holding a level waiting to be computed.
    pub fn occupied_stages(&mut self) -> Result<usize, PipelineError> {
        Ok(self
            .bank
            .audit()?
            .iter()
            .filter(|a| !a.inbox.is_empty())
            .count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    SourceExhausted,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub tokens: Vec<TokenId>,
    pub metrics: RunMetrics,
    pub trace: StepTrace,
    pub outcomes: Vec<StepOutcome>,
    pub prefill: PrefillRecord,
    pub stop: StopReason,
}

/// Prefills, then steps until `max_tokens` tokens are out or the draft
/// source runs dry.
pub fn run(
    model: Arc<ToyModel>,
    cfg: &PipelineConfig,
    draft: &mut dyn DraftProvider,
    prompt: &[TokenId],
    max_tokens: usize,
) -> Result<RunOutput, PipelineError> {
    if cfg.workers {
        let bank = WorkerBank::new(Arc::clone(&model), cfg)?;
        run_with_bank(model, cfg, bank, draft, prompt, max_tokens)
    } else {
        let bank = LocalBank::new(Arc::clone(&model), cfg)?;
        run_with_bank(model, cfg, bank, draft, prompt, max_tokens)
    }
}

pub fn run_with_bank<B: StageBank>(
    model: Arc<ToyModel>,
    cfg: &PipelineConfig,
    bank: B,
    draft: &mut dyn DraftProvider,
    prompt: &[TokenId],
    max_tokens: usize,
) -> Result<RunOutput, PipelineError> {
    let (mut session, prefill) = Session::new(model, cfg.clone(), bank, prompt)?;
    let mut trace = StepTrace {
        rows: prefill.trace_rows(),
    };
    let mut clock = prefill.duration_ms;
    let mut outcomes = Vec::new();
    let mut emissions = Vec::new();
    let mut counters = Counters::default();
    let mut stop = StopReason::Completed;
    // Every verification emits a token and one happens at least every
    // `m + 1` steps, so this only trips on a broken state machine.
    let step_cap = (max_tokens as u64 + 2) * (cfg.stages as u64 + 2);

    while emissions.len() < max_tokens {
        if counters.steps >= step_cap {
            return Err(PipelineError::Invariant(format!(
                "no progress after {} steps",
                counters.steps
            )));
        }
        let Some(outcome) = session.step(draft)? else {
            stop = StopReason::SourceExhausted;
            break;
        };
        let start = clock;
        clock += outcome.timing.duration_ms;
        trace.rows.extend(outcome.timing.trace_rows(
            outcome.step,
            start,
            cfg.overlap,
            &outcome.stages,
            outcome.hit,
            outcome.hit == Some(false),
        ));
        counters.steps += 1;
        counters.stalls += u64::from(outcome.stalled);
        counters.bubbles += u64::from(outcome.bubble);
        if let Some(hit) = outcome.hit {
            counters.verifications += 1;
            counters.hits += u64::from(hit);
            counters.flushes += u64::from(!hit);
        }
        if outcome.emitted {
            emissions.push(Emission {
                step: outcome.step,
                time_ms: clock,
            });
        }
        outcomes.push(outcome);
    }

    let metrics = RunMetrics::from_emissions(
        &emissions,
        counters,
        prefill.duration_ms,
        prefill.duration_ms,
        clock,
    );
    Ok(RunOutput {
        tokens: session.emitted().to_vec(),
        metrics,
        trace,
        outcomes,
        prefill,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyModelConfig;
    use crate::source::{SyntheticDraft, SyntheticDraftConfig};

    fn model() -> Arc<ToyModel> {
        Arc::new(
            ToyModel::init(ToyModelConfig {
                vocab: 32,
                hidden: 16,
                layers: 4,
                seed: 7,
            })
            .unwrap(),
        )
    }

    fn prompt() -> Vec<TokenId> {
        [3, 1, 4, 1, 5].map(TokenId).to_vec()
    }

    fn decode(
        cfg: &PipelineConfig,
        draft_cfg: SyntheticDraftConfig,
        n: usize,
    ) -> (RunOutput, Vec<TokenId>) {
        let model = model();
        let generated = model.sequential_decode(&prompt(), n + 8).unwrap();
        let reference = [prompt(), generated.clone()].concat();
        let mut draft = SyntheticDraft::new(draft_cfg, 32, reference.clone());
        let out = run(model, cfg, &mut draft, &prompt(), n).unwrap();
        (out, generated[..n].to_vec())
    }

    #[test]
    fn perfect_draft_reaches_one_token_per_step() {
        let cfg = PipelineConfig::new(4, BeamConfig { w: 4, k: 3 });
        let (out, expected) = decode(&cfg, SyntheticDraftConfig::perfect(1), 20);
        assert_eq!(out.tokens, expected);
        let steps: Vec<u64> = out
            .outcomes
            .iter()
            .filter(|o| o.emitted)
            .map(|o| o.step)
            .collect();
        assert_eq!(steps[0], 1);
        assert_eq!(steps[1], 5);
        assert!(
            steps.windows(2).skip(1).all(|w| w[1] == w[0] + 1),
            "{steps:?}"
        );
        assert_eq!(out.metrics.steps_per_token, Some(1.0));
        assert_eq!(out.metrics.flush_count, 0);
    }

    #[test]
    fn vanilla_takes_a_full_pass_per_token() {
        let mut cfg = PipelineConfig::new(4, BeamConfig { w: 4, k: 3 });
        cfg.mode = Mode::VanillaPp;
        let (out, expected) = decode(&cfg, SyntheticDraftConfig::perfect(1), 10);
        assert_eq!(out.tokens, expected);
        assert_eq!(out.metrics.steps_per_token, Some(4.0));
        assert_eq!(out.metrics.hit_rate, Some(0.0));
    }

    #[test]
    fn noisy_draft_stays_lossless_and_workers_agree() {
        let mut cfg = PipelineConfig::new(3, BeamConfig { w: 6, k: 3 });
        let noisy = SyntheticDraftConfig {
            top1_hit: 0.5,
            rank_decay: 0.5,
            miss_prob: 0.2,
            stall_prob: 0.1,
            seed: 11,
        };
        let (local, expected) = decode(&cfg, noisy, 30);
        assert_eq!(local.tokens, expected);
        assert!(local.metrics.stalls > 0);
        cfg.workers = true;
        let (threaded, _) = decode(&cfg, noisy, 30);
        assert_eq!(threaded.tokens, local.tokens);
        assert_eq!(threaded.outcomes, local.outcomes);
    }

    #[test]
    fn zero_tokens_is_prefill_only() {
        let cfg = PipelineConfig::new(2, BeamConfig { w: 2, k: 2 });
        let (out, _) = decode(&cfg, SyntheticDraftConfig::perfect(0), 0);
        assert!(out.tokens.is_empty());
        assert!(out.trace.rows.iter().all(|r| r.step == 0));
    }

    #[test]
    fn overlap_never_slows_a_step() {
        let cost = CostModel::default();
        let stages = [
            StageActivity {
                rows: 8,
                pruned: true,
                sent_nodes: 8,
                resident_nodes: 8,
            },
            StageActivity {
                rows: 4,
                pruned: true,
                sent_nodes: 0,
                resident_nodes: 0,
            },
        ];
        let off = StepTiming::from_activity(&cost, false, &stages, true, 0.0);
        let on = StepTiming::from_activity(&cost, true, &stages, true, 0.0);
        assert!(on.duration_ms <= off.duration_ms);
        let expected_off = cost.compute_ms(8) + cost.prune_ms + cost.transmit_ms(8);
        assert!((off.busy_ms - expected_off).abs() < 1e-12);
    }
}
