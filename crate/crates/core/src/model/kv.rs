use std::collections::HashMap;
use std::ops::Range;

use crate::tree::NodeId;

use super::ModelError;

/// What a cache row (or an embedding row) stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    /// A committed token. `node` remembers the tree node it was promoted from.
    Verified {
        position: usize,
        node: Option<NodeId>,
    },
    /// A speculative tree node.
    Speculative { position: usize, node: NodeId },
}

impl Slot {
    pub fn position(&self) -> usize {
        match *self {
            Slot::Verified { position, .. } | Slot::Speculative { position, .. } => position,
        }
    }

    pub fn node(&self) -> Option<NodeId> {
        match *self {
            Slot::Verified { node, .. } => node,
            Slot::Speculative { node, .. } => Some(node),
        }
    }

    pub fn is_verified(&self) -> bool {
        matches!(self, Slot::Verified { .. })
    }
}

/// Keys and values for a contiguous range of layers.
///
/// Verified rows always form a prefix; speculative rows follow in the order
/// their nodes were computed. `index` maps node ids (speculative or promoted)
/// to row numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    layers: Range<usize>,
    dim: usize,
    slots: Vec<Slot>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    index: HashMap<NodeId, usize>,
    verified: usize,
}

impl KvCache {
    pub fn new(layers: Range<usize>, dim: usize) -> Self {
        let n = layers.len();
        Self {
            layers,
            dim,
            slots: Vec::new(),
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            index: HashMap::new(),
            verified: 0,
        }
    }

    pub fn layers(&self) -> Range<usize> {
        self.layers.clone()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn verified_len(&self) -> usize {
        self.verified
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn speculative_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.slots[self.verified..].iter().filter_map(Slot::node)
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn slot_of(&self, id: NodeId) -> Option<Slot> {
        self.index_of(id).map(|i| self.slots[i])
    }

    /// Key row `row` for absolute layer `layer`.
    pub fn key(&self, layer: usize, row: usize) -> &[f64] {
        let l = layer - self.layers.start;
        &self.keys[l][row * self.dim..(row + 1) * self.dim]
    }

    pub fn value(&self, layer: usize, row: usize) -> &[f64] {
        let l = layer - self.layers.start;
        &self.values[l][row * self.dim..(row + 1) * self.dim]
    }

    pub(super) fn append_slots(&mut self, slots: &[Slot]) {
        for slot in slots {
            let row = self.slots.len();
            if let Some(id) = slot.node() {
                self.index.insert(id, row);
            }
            if slot.is_verified() {
                self.verified += 1;
            }
            self.slots.push(*slot);
        }
        let rows = self.slots.len() * self.dim;
        for l in 0..self.layers.len() {
            self.keys[l].resize(rows, 0.0);
            self.values[l].resize(rows, 0.0);
        }
    }

    pub(super) fn write(&mut self, local_layer: usize, row: usize, key: &[f64], value: &[f64]) {
        let span = row * self.dim..(row + 1) * self.dim;
        self.keys[local_layer][span.clone()].copy_from_slice(key);
        self.values[local_layer][span].copy_from_slice(value);
    }

    pub(super) fn keys_of(&self, local_layer: usize) -> &[f64] {
        &self.keys[local_layer]
    }

    pub(super) fn values_of(&self, local_layer: usize) -> &[f64] {
        &self.values[local_layer]
    }

    /// Removes rows whose slot fails `keep`. Dropping a verified row is a
    /// contract violation and leaves the cache untouched.
    pub fn prune(&mut self, keep: impl Fn(&Slot) -> bool) -> Result<(), ModelError> {
        let flags: Vec<bool> = self.slots.iter().map(&keep).collect();
        if let Some(row) = (0..self.verified).find(|&r| !flags[r]) {
            return Err(ModelError::ContractViolation(format!(
                "prune would drop verified row {row} (position {})",
                self.slots[row].position()
            )));
        }
        if flags.iter().all(|&f| f) {
            return Ok(());
        }
        let d = self.dim;
        for l in 0..self.layers.len() {
            self.keys[l] = retain_rows(&self.keys[l], &flags, d);
            self.values[l] = retain_rows(&self.values[l], &flags, d);
        }
        let mut it = flags.iter();
        self.slots.retain(|_| *it.next().unwrap());
        self.reindex();
        Ok(())
    }

    /// Drops every speculative row.
    pub fn clear_speculative(&mut self) {
        self.prune(Slot::is_verified)
            .expect("keeping all verified rows cannot violate the prefix contract");
    }

    /// Turns the first speculative row, which must belong to `id`, into a
    /// verified one.
    pub fn promote(&mut self, id: NodeId) -> Result<(), ModelError> {
        match self.slots.get(self.verified) {
            Some(&Slot::Speculative { position, node }) if node == id => {
                self.slots[self.verified] = Slot::Verified {
                    position,
                    node: Some(id),
                };
                self.verified += 1;
                Ok(())
            }
            _ => Err(ModelError::ContractViolation(format!(
                "node {} is not the first speculative row",
                id.0
            ))),
        }
    }

    fn reindex(&mut self) {
        self.index.clear();
        self.verified = 0;
        for (row, slot) in self.slots.iter().enumerate() {
            if let Some(id) = slot.node() {
                self.index.insert(id, row);
            }
            if slot.is_verified() {
                self.verified += 1;
            }
        }
    }
}

fn retain_rows(data: &[f64], keep: &[bool], dim: usize) -> Vec<f64> {
    data.chunks(dim)
        .zip(keep)
        .filter(|(_, &k)| k)
        .flat_map(|(row, _)| row.iter().copied())
        .collect()
}
