use std::sync::Arc;

use crate::model::ToyModel;
use crate::tree::{LevelSnapshot, NodeId, TokenId};

use super::stage::{PruneDirective, PruneReport, StageAudit, StageMessage, StageState};
use super::{PipelineConfig, PipelineError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputeResult {
    /// Rows each stage pushed through its layers.
    pub rows: Vec<usize>,
    /// Root ready for verification at the last stage, with the model's choice.
    pub head: Option<(NodeId, TokenId)>,
}

/// The set of stages a session drives. Implementations differ only in where
/// the stage code runs; results must be identical.
pub trait StageBank {
    fn stage_count(&self) -> usize;

    /// Rows computed per stage.
    fn prefill(
        &mut self,
        prompt: &[TokenId],
        root: &LevelSnapshot,
    ) -> Result<Vec<usize>, PipelineError>;

    fn compute(&mut self) -> Result<ComputeResult, PipelineError>;

    fn prune(&mut self, directive: &PruneDirective) -> Result<Vec<PruneReport>, PipelineError>;

    /// Shifts every packet one stage down and feeds `inject` to the first
    /// stage. Returns the node count each stage sent downstream.
    fn transmit(&mut self, inject: Option<StageMessage>) -> Result<Vec<usize>, PipelineError>;

    fn audit(&mut self) -> Result<Vec<StageAudit>, PipelineError>;
}

/// All stages in the calling thread.
#[derive(Debug, Clone)]
pub struct LocalBank {
    model: Arc<ToyModel>,
    stages: Vec<StageState>,
}

impl LocalBank {
    pub fn new(model: Arc<ToyModel>, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let ranges = cfg.layer_ranges(model.config().layers)?;
        let m = ranges.len();
        let dim = model.dim();
        let stages = ranges
            .into_iter()
            .enumerate()
            .map(|(i, r)| StageState::new(i, m, r, dim))
            .collect();
        Ok(Self { model, stages })
    }

    pub fn model(&self) -> &Arc<ToyModel> {
        &self.model
    }

    pub fn stages(&self) -> &[StageState] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [StageState] {
        &mut self.stages
    }

    pub fn head(&self) -> Result<Option<(NodeId, TokenId)>, PipelineError> {
        self.stages.last().unwrap().head(&self.model)
    }
}

impl StageBank for LocalBank {
    fn stage_count(&self) -> usize {
        self.stages.len()
    }

    fn prefill(
        &mut self,
        prompt: &[TokenId],
        root: &LevelSnapshot,
    ) -> Result<Vec<usize>, PipelineError> {
        let mut hidden = None;
        for stage in &mut self.stages {
            hidden = Some(stage.prefill(&self.model, prompt, hidden, root)?);
        }
        Ok(vec![prompt.len(); self.stages.len()])
    }

    fn compute(&mut self) -> Result<ComputeResult, PipelineError> {
        let rows = self
            .stages
            .iter_mut()
            .map(|s| s.compute(&self.model))
            .collect::<Result<_, _>>()?;
        Ok(ComputeResult {
            rows,
            head: self.head()?,
        })
    }

    fn prune(&mut self, directive: &PruneDirective) -> Result<Vec<PruneReport>, PipelineError> {
        self.stages.iter_mut().map(|s| s.prune(directive)).collect()
    }

    fn transmit(&mut self, inject: Option<StageMessage>) -> Result<Vec<usize>, PipelineError> {
        let outgoing: Vec<Option<StageMessage>> = self
            .stages
            .iter_mut()
            .map(StageState::take_outgoing)
            .collect::<Result<_, _>>()?;
        let sent = outgoing
            .iter()
            .map(|m| m.as_ref().map_or(0, StageMessage::len))
            .collect();
        let mut incoming = std::iter::once(inject).chain(outgoing);
        for stage in &mut self.stages {
            stage.receive(incoming.next().unwrap())?;
        }
        Ok(sent)
    }

    fn audit(&mut self) -> Result<Vec<StageAudit>, PipelineError> {
        Ok(self.stages.iter().map(StageState::audit).collect())
    }
}
