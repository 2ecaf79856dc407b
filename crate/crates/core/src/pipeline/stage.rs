//! One pipeline device: its layer shard, KV cache, local tree mask and the
//! level packets entering and leaving it.

use std::collections::HashSet;
use std::ops::Range;

use serde::Serialize;

use crate::bits::BitRow;
use crate::model::{Embeddings, KvCache, Slot, ToyModel};
use crate::tree::{LevelSnapshot, NodeId, TokenId};

use super::PipelineError;

/// A tree level in flight: the level's mask snapshot, the absolute sequence
/// position of its nodes and, past the first stage, their hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMessage {
    pub snapshot: LevelSnapshot,
    pub position: usize,
    pub hidden: Option<Embeddings>,
}

impl StageMessage {
    pub fn len(&self) -> usize {
        self.snapshot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot.is_empty()
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.snapshot.ids
    }

    /// Keeps `root` and its descendants, judged from the packet's own mask
    /// rows since an unprocessed packet is not in the stage's local mask yet.
    fn retain_subtree(&mut self, root: NodeId) {
        let keep: HashSet<NodeId> = (0..self.len())
            .filter(|&r| {
                self.snapshot.ids[r] == root || self.snapshot.ancestors(r).any(|a| a == root)
            })
            .map(|r| self.snapshot.ids[r])
            .collect();
        self.retain(|id| keep.contains(&id));
    }

    fn retain(&mut self, keep: impl Fn(NodeId) -> bool) {
        self.snapshot.retain(&keep);
        if let Some(h) = &mut self.hidden {
            h.retain(|s| s.node().is_some_and(&keep));
        }
    }
}

/// What every stage does with its state after a verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneDirective {
    /// The verified token matched `new_root`, a child of `old_root`.
    Hit { old_root: NodeId, new_root: NodeId },
    /// The verified token matched nothing: keep only the verified prefix.
    Flush { old_root: NodeId },
}

impl PruneDirective {
    pub fn old_root(&self) -> NodeId {
        match *self {
            PruneDirective::Hit { old_root, .. } | PruneDirective::Flush { old_root } => old_root,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PruneReport {
    /// KV rows removed (the promoted old root is not counted).
    pub dropped_rows: usize,
    /// In-flight packets that held nodes before the prune and none after.
    pub packets_emptied: usize,
}

/// Resident state of one stage, for consistency checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageAudit {
    pub stage: usize,
    pub kv_len: usize,
    pub verified_len: usize,
    pub kv_speculative: Vec<NodeId>,
    pub mask_ids: Vec<NodeId>,
    pub inbox: Vec<NodeId>,
    pub outbox: Vec<NodeId>,
}

impl StageAudit {
    pub fn resident_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.kv_speculative
            .iter()
            .chain(&self.mask_ids)
            .chain(&self.inbox)
            .chain(&self.outbox)
            .copied()
    }

    pub fn packets(&self) -> usize {
        usize::from(!self.inbox.is_empty()) + usize::from(!self.outbox.is_empty())
    }
}

/// Ancestor mask over the speculative nodes a stage has computed. Row `r`
/// has bit `c` set iff node `c` is node `r` or one of its ancestors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalMask {
    ids: Vec<NodeId>,
    rows: Vec<BitRow>,
}

impl LocalMask {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn rows(&self) -> &[BitRow] {
        &self.rows
    }

    fn position(&self, id: NodeId) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    fn clear(&mut self) {
        self.ids.clear();
        self.rows.clear();
    }

    /// Adds the rows of a freshly computed level. Ancestors not tracked here
    /// must already be verified in `kv`.
    fn extend(&mut self, snap: &LevelSnapshot, kv: &KvCache) -> Result<(), PipelineError> {
        let n = self.ids.len() + snap.len();
        for row in &mut self.rows {
            row.resize(n);
        }
        for r in 0..snap.len() {
            let mut row = BitRow::zeros(n);
            for a in snap.ancestors(r) {
                match self.position(a) {
                    Some(c) => row.set(c, true),
                    None if kv.slot_of(a).is_some_and(|s| s.is_verified()) => {}
                    None => {
                        return Err(PipelineError::Invariant(format!(
                            "node {} has ancestor {} that is neither resident nor verified",
                            snap.ids[r].0, a.0
                        )))
                    }
                }
            }
            row.set(self.ids.len(), true);
            self.ids.push(snap.ids[r]);
            self.rows.push(row);
        }
        Ok(())
    }

    /// `id` and its resident descendants (column of `id`).
    pub fn column(&self, id: NodeId) -> HashSet<NodeId> {
        match self.position(id) {
            Some(c) => self
                .rows
                .iter()
                .zip(&self.ids)
                .filter(|(row, _)| row.get(c))
                .map(|(_, &i)| i)
                .collect(),
            None => HashSet::new(),
        }
    }

    /// `id` and its resident ancestors (row of `id`).
    pub fn row(&self, id: NodeId) -> HashSet<NodeId> {
        match self.position(id) {
            Some(r) => self.rows[r].iter_ones().map(|c| self.ids[c]).collect(),
            None => HashSet::new(),
        }
    }

    fn retain(&mut self, keep: &HashSet<NodeId>) {
        let selector = BitRow::from_indices(
            self.ids.len(),
            self.ids
                .iter()
                .enumerate()
                .filter(|(_, id)| keep.contains(id))
                .map(|(i, _)| i),
        );
        let flags: Vec<bool> = self.ids.iter().map(|id| keep.contains(id)).collect();
        let mut it = flags.iter();
        self.ids.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.rows.retain(|_| *it.next().unwrap());
        for row in &mut self.rows {
            *row = row.select(&selector);
        }
    }
}

/// Inputs of one stage's forward pass, split out so several requests can
/// share a packed forward.
#[derive(Debug)]
pub struct PreparedCompute {
    pub message: StageMessage,
    pub input: Embeddings,
    pub ancestors: Vec<Vec<NodeId>>,
}

#[derive(Debug, Clone)]
pub struct StageState {
    index: usize,
    stages: usize,
    layers: Range<usize>,
    kv: KvCache,
    mask: LocalMask,
    inbox: Option<StageMessage>,
    outbox: Option<StageMessage>,
}

fn speculative_slots(msg: &StageMessage) -> Vec<Slot> {
    msg.snapshot
        .ids
        .iter()
        .map(|&node| Slot::Speculative {
            position: msg.position,
            node,
        })
        .collect()
}

impl StageState {
    pub fn new(index: usize, stages: usize, layers: Range<usize>, dim: usize) -> Self {
        Self {
            index,
            stages,
            kv: KvCache::new(layers.clone(), dim),
            layers,
            mask: LocalMask::default(),
            inbox: None,
            outbox: None,
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn layers(&self) -> Range<usize> {
        self.layers.clone()
    }

    pub fn is_first(&self) -> bool {
        self.index == 0
    }

    pub fn is_last(&self) -> bool {
        self.index + 1 == self.stages
    }

    pub fn kv(&self) -> &KvCache {
        &self.kv
    }

    pub fn mask(&self) -> &LocalMask {
        &self.mask
    }

    pub fn inbox(&self) -> Option<&StageMessage> {
        self.inbox.as_ref()
    }

    pub fn outbox(&self) -> Option<&StageMessage> {
        self.outbox.as_ref()
    }

    /// Nodes currently waiting in or leaving this stage.
    pub fn resident_nodes(&self) -> usize {
        self.inbox.as_ref().map_or(0, StageMessage::len)
            + self.outbox.as_ref().map_or(0, StageMessage::len)
    }

    fn invariant(&self, msg: impl std::fmt::Display) -> PipelineError {
        PipelineError::Invariant(format!("stage {}: {msg}", self.index))
    }

    /// Runs the prompt through this stage's layers with a causal mask. The
    /// first stage embeds `prompt`; later stages take the previous output.
    /// The last prompt token becomes the speculative tree root.
    pub fn prefill(
        &mut self,
        model: &ToyModel,
        prompt: &[TokenId],
        hidden: Option<Embeddings>,
        root: &LevelSnapshot,
    ) -> Result<Embeddings, PipelineError> {
        if !self.kv.is_empty() || self.inbox.is_some() || self.outbox.is_some() {
            return Err(self.invariant("prefill on a non-empty stage"));
        }
        if root.len() != 1 || prompt.is_empty() {
            return Err(self.invariant("prefill needs a prompt and a single-node root"));
        }
        let input = match hidden {
            Some(h) => h,
            None if self.is_first() => {
                let n = prompt.len();
                let slots = (0..n)
                    .map(|position| {
                        if position + 1 == n {
                            Slot::Speculative {
                                position,
                                node: root.ids[0],
                            }
                        } else {
                            Slot::Verified {
                                position,
                                node: None,
                            }
                        }
                    })
                    .collect();
                model.embed(prompt, slots)?
            }
            None => return Err(self.invariant("prefill input missing")),
        };
        let no_ancestors = vec![Vec::new(); input.rows()];
        let out = model.forward_layers(self.layers(), &input, &no_ancestors, &mut self.kv)?;
        self.mask.extend(root, &self.kv)?;
        if self.is_last() {
            let mut root_row = out.clone();
            let root_hidden = root_row.split_off(root_row.rows() - 1);
            self.outbox = Some(StageMessage {
                snapshot: root.clone(),
                position: prompt.len() - 1,
                hidden: Some(root_hidden),
            });
        }
        Ok(out)
    }

    /// Takes the inbox and builds the forward inputs for it.
    pub fn prepare_compute(
        &mut self,
        model: &ToyModel,
    ) -> Result<Option<PreparedCompute>, PipelineError> {
        let Some(mut message) = self.inbox.take() else {
            return Ok(None);
        };
        if self.outbox.is_some() {
            return Err(self.invariant("outbox not drained before compute"));
        }
        let input = match message.hidden.take() {
            Some(h) => h,
            None if self.is_first() => {
                model.embed(&message.snapshot.tokens, speculative_slots(&message))?
            }
            None => return Err(self.invariant("packet without hidden states")),
        };
        let ancestors = (0..message.len())
            .map(|r| message.snapshot.ancestors(r).collect())
            .collect();
        Ok(Some(PreparedCompute {
            message,
            input,
            ancestors,
        }))
    }

    /// Stores the forward result as the outgoing packet.
    pub fn finish_compute(
        &mut self,
        prepared: PreparedCompute,
        output: Embeddings,
    ) -> Result<usize, PipelineError> {
        let PreparedCompute { mut message, .. } = prepared;
        self.mask.extend(&message.snapshot, &self.kv)?;
        let rows = output.rows();
        message.hidden = Some(output);
        self.outbox = Some(message);
        Ok(rows)
    }

    /// Node-wise computation of whatever arrived last step.
    pub fn compute(&mut self, model: &ToyModel) -> Result<usize, PipelineError> {
        let Some(prepared) = self.prepare_compute(model)? else {
            return Ok(0);
        };
        let output = model.forward_layers(
            self.layers(),
            &prepared.input,
            &prepared.ancestors,
            &mut self.kv,
        )?;
        self.finish_compute(prepared, output)
    }

    /// Mutable cache access for packed forwards.
    pub fn kv_mut(&mut self) -> &mut KvCache {
        &mut self.kv
    }

    /// On the last stage: the node whose final hidden state is ready, with
    /// the model's greedy choice for the position after it.
    pub fn head(&self, model: &ToyModel) -> Result<Option<(NodeId, TokenId)>, PipelineError> {
        if !self.is_last() {
            return Ok(None);
        }
        let Some(msg) = &self.outbox else {
            return Ok(None);
        };
        let hidden = msg
            .hidden
            .as_ref()
            .ok_or_else(|| self.invariant("final packet without hidden states"))?;
        if msg.len() != 1 || hidden.rows() != 1 {
            return Err(self.invariant(format!(
                "final packet holds {} nodes, expected the root alone",
                msg.len()
            )));
        }
        Ok(Some((msg.ids()[0], model.verify_next(hidden.row(0)))))
    }

    pub fn prune(&mut self, directive: &PruneDirective) -> Result<PruneReport, PipelineError> {
        let old_root = directive.old_root();
        let before = self.kv.len();
        let had = [self.inbox.is_some(), self.outbox.is_some()];
        let survivors = match *directive {
            PruneDirective::Hit { new_root, .. } => {
                let column = self.mask.column(new_root);
                let mut keep: HashSet<NodeId> = self.mask.row(new_root);
                keep.extend(column.iter().copied());
                keep.insert(old_root);
                self.kv
                    .prune(|s| s.is_verified() || s.node().is_some_and(|n| keep.contains(&n)))?;
                self.mask.retain(&column);
                for packet in [&mut self.inbox, &mut self.outbox] {
                    if let Some(msg) = packet {
                        msg.retain_subtree(new_root);
                        if msg.is_empty() {
                            *packet = None;
                        }
                    }
                }
                column
            }
            PruneDirective::Flush { .. } => {
                self.kv
                    .prune(|s| s.is_verified() || s.node() == Some(old_root))?;
                self.mask.clear();
                self.inbox = None;
                self.outbox = None;
                HashSet::new()
            }
        };
        self.kv.promote(old_root).map_err(|e| self.invariant(e))?;
        debug_assert!(self.kv.speculative_ids().all(|id| survivors.contains(&id)));
        let now = [self.inbox.is_some(), self.outbox.is_some()];
        Ok(PruneReport {
            dropped_rows: before - self.kv.len(),
            packets_emptied: had.iter().zip(&now).filter(|(h, n)| **h && !**n).count(),
        })
    }

    /// Hands over the outgoing packet. The last stage never sends anything.
    pub fn take_outgoing(&mut self) -> Result<Option<StageMessage>, PipelineError> {
        if self.is_last() {
            if self.outbox.is_some() {
                return Err(self.invariant("final packet left unverified"));
            }
            return Ok(None);
        }
        Ok(self.outbox.take())
    }

    pub fn receive(&mut self, message: Option<StageMessage>) -> Result<(), PipelineError> {
        if self.inbox.is_some() {
            return Err(self.invariant("inbox still occupied"));
        }
        if let Some(msg) = &message {
            if msg.hidden.is_none() != self.is_first() {
                return Err(self.invariant("packet hidden states do not match stage position"));
            }
        }
        self.inbox = message.filter(|m| !m.is_empty());
        Ok(())
    }

    pub fn audit(&self) -> StageAudit {
        StageAudit {
            stage: self.index,
            kv_len: self.kv.len(),
            verified_len: self.kv.verified_len(),
            kv_speculative: self.kv.speculative_ids().collect(),
            mask_ids: self.mask.ids().to_vec(),
            inbox: self.inbox.as_ref().map_or(Vec::new(), |m| m.ids().to_vec()),
            outbox: self
                .outbox
                .as_ref()
                .map_or(Vec::new(), |m| m.ids().to_vec()),
        }
    }
}
