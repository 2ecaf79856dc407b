use crate::model::{ForwardJob, ToyModel};
use crate::perf::CostModel;
use crate::pipeline::{
    ComputeResult, LocalBank, PendingStep, Session, StageActivity, StepCore, StepTiming,
};
use crate::source::DraftProvider;

use super::{BatchError, RaggedBatch};

pub struct BatchMember<'a> {
    pub request_id: u64,
    pub session: &'a mut Session<LocalBank>,
    pub draft: &'a mut dyn DraftProvider,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStep {
    /// Per member; `None` when its draft source ran dry and it sat out.
    pub outcomes: Vec<Option<StepCore>>,
    /// Per-stage work summed over members.
    pub stages: Vec<StageActivity>,
    pub timing: StepTiming,
    /// Tree nodes in the packed batch after drafting.
    pub packed_nodes: usize,
}

/// One pipeline step for every member at once.
///
/// Each member drafts, verifies and prunes exactly as it would alone; only
/// the per-stage forward is shared, and packed rows never see another
/// member's cache. With `max_nodes`, drafting widths shrink (older members
/// first served) so the packed trees stay within the limit.
pub fn batched_step(
    model: &ToyModel,
    cost: &CostModel,
    overlap: bool,
    members: &mut [BatchMember<'_>],
    max_nodes: Option<usize>,
) -> Result<BatchStep, BatchError> {
    if members.is_empty() {
        return Err(BatchError::Empty);
    }
    let m = members[0].session.config().stages;
    if members.iter().any(|b| b.session.config().stages != m) {
        return Err(BatchError::Config("members disagree on stage count".into()));
    }

    let mut budget = match max_nodes {
        Some(max) => {
            let used: usize = members.iter().map(|b| b.session.tree().len()).sum();
            Some(
                max.checked_sub(used)
                    .ok_or(BatchError::Overflow { nodes: used, max })?,
            )
        }
        None => None,
    };
    let mut pending: Vec<Option<PendingStep>> = Vec::with_capacity(members.len());
    for b in members.iter_mut() {
        let width = budget.map_or(b.width, |left| b.width.min(left));
        let p = if width == 0 {
            Some(b.session.hold())
        } else {
            let before = b.session.tree().len();
            let p = b.session.draft_level(&mut *b.draft, width)?;
            if let Some(left) = &mut budget {
                *left -= b.session.tree().len() - before;
            }
            p
        };
        pending.push(p);
    }

    let slots: Vec<(u64, &crate::tree::SpecTree)> = members
        .iter()
        .zip(&pending)
        .filter(|(_, p)| p.is_some())
        .map(|(b, _)| (b.request_id, b.session.tree()))
        .collect();
    let packed_nodes = if slots.is_empty() {
        0
    } else {
        let batch = RaggedBatch::pack(&slots, max_nodes)?;
        batch.validate()?;
        batch.len()
    };

    let mut rows = vec![vec![0usize; m]; members.len()];
    #[allow(clippy::needless_range_loop)]
    for s in 0..m {
        let mut prepared = Vec::new();
        for (i, b) in members.iter_mut().enumerate() {
            if pending[i].is_none() {
                continue;
            }
            if let Some(p) = b.session.bank_mut().stages_mut()[s].prepare_compute(model)? {
                prepared.push((i, p));
            }
        }
        if prepared.is_empty() {
            continue;
        }
        let layers = members[prepared[0].0].session.bank().stages()[s].layers();
        let outputs = {
            let mut jobs = Vec::with_capacity(prepared.len());
            let mut next = prepared.iter().peekable();
            for (i, b) in members.iter_mut().enumerate() {
                if let Some((_, p)) = next.next_if(|(j, _)| *j == i) {
                    jobs.push(ForwardJob {
                        input: &p.input,
                        ancestors: &p.ancestors,
                        kv: b.session.bank_mut().stages_mut()[s].kv_mut(),
                    });
                }
            }
            model.forward_packed(layers, &mut jobs)?
        };
        for ((i, p), out) in prepared.into_iter().zip(outputs) {
            rows[i][s] = members[i].session.bank_mut().stages_mut()[s].finish_compute(p, out)?;
        }
    }

    let mut outcomes = Vec::with_capacity(members.len());
    for ((b, p), rows) in members.iter_mut().zip(pending).zip(rows) {
        let Some(p) = p else {
            outcomes.push(None);
            continue;
        };
        let head = b.session.bank().head()?;
        let core = b.session.complete_step(p, ComputeResult { rows, head })?;
        outcomes.push(Some(core));
    }

    let mut stages = vec![StageActivity::default(); m];
    let mut participants = 0;
    let mut drafted = false;
    for core in outcomes.iter().flatten() {
        participants += 1;
        drafted |= core.drafted;
        for (sum, a) in stages.iter_mut().zip(&core.stages) {
            sum.rows += a.rows;
            sum.pruned |= a.pruned;
            sum.sent_nodes += a.sent_nodes;
            sum.resident_nodes += a.resident_nodes;
        }
    }
    let overhead = if participants > 1 {
        cost.batch_overhead_ms
    } else {
        0.0
    };
    let timing = StepTiming::from_activity(cost, overlap, &stages, drafted, overhead);
    Ok(BatchStep {
        outcomes,
        stages,
        timing,
        packed_nodes,
    })
}
