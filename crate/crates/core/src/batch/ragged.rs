use crate::bits::BitRow;
use crate::tree::{NodeId, SpecTree, TokenId};

use super::BatchError;

/// Several requests' trees laid end to end, with each request's start index.
#[derive(Debug, Clone, PartialEq)]
pub struct RaggedBatch {
    pub request_ids: Vec<u64>,
    pub offsets: Vec<usize>,
    pub tokens: Vec<TokenId>,
    pub node_ids: Vec<NodeId>,
    pub probs: Vec<f64>,
    /// Each request's mask rows in its own index space.
    masks: Vec<Vec<BitRow>>,
}

/// One request's slice of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub request_id: u64,
    pub tokens: Vec<TokenId>,
    pub node_ids: Vec<NodeId>,
    pub probs: Vec<f64>,
}

impl Segment {
    pub fn of_tree(request_id: u64, tree: &SpecTree) -> Self {
        Self {
            request_id,
            tokens: tree.tokens().to_vec(),
            node_ids: tree.ids().to_vec(),
            probs: tree.probs().to_vec(),
        }
    }
}

impl RaggedBatch {
    /// Packs trees in the given order. Fails when the total node count
    /// exceeds `max_nodes`.
    pub fn pack(slots: &[(u64, &SpecTree)], max_nodes: Option<usize>) -> Result<Self, BatchError> {
        if slots.is_empty() {
            return Err(BatchError::Empty);
        }
        let total: usize = slots.iter().map(|(_, t)| t.len()).sum();
        if let Some(max) = max_nodes {
            if total > max {
                return Err(BatchError::Overflow { nodes: total, max });
            }
        }
        let mut batch = Self {
            request_ids: Vec::with_capacity(slots.len()),
            offsets: Vec::with_capacity(slots.len()),
            tokens: Vec::with_capacity(total),
            node_ids: Vec::with_capacity(total),
            probs: Vec::with_capacity(total),
            masks: Vec::with_capacity(slots.len()),
        };
        for (id, tree) in slots {
            batch.request_ids.push(*id);
            batch.offsets.push(batch.tokens.len());
            batch.tokens.extend_from_slice(tree.tokens());
            batch.node_ids.extend_from_slice(tree.ids());
            batch.probs.extend_from_slice(tree.probs());
            batch.masks.push(tree.mask_rows().to_vec());
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn segment_range(&self, i: usize) -> std::ops::Range<usize> {
        let end = self.offsets.get(i + 1).copied().unwrap_or(self.len());
        self.offsets[i]..end
    }

    pub fn unpack(&self) -> Vec<Segment> {
        (0..self.request_ids.len())
            .map(|i| {
                let r = self.segment_range(i);
                Segment {
                    request_id: self.request_ids[i],
                    tokens: self.tokens[r.clone()].to_vec(),
                    node_ids: self.node_ids[r.clone()].to_vec(),
                    probs: self.probs[r].to_vec(),
                }
            })
            .collect()
    }

    /// Mask over the whole batch: each request's rows shifted to its offset.
    pub fn combined_mask(&self) -> Vec<BitRow> {
        let n = self.len();
        let mut rows = Vec::with_capacity(n);
        for (i, mask) in self.masks.iter().enumerate() {
            let off = self.offsets[i];
            for row in mask {
                rows.push(BitRow::from_indices(n, row.iter_ones().map(|c| c + off)));
            }
        }
        rows
    }

    /// Offsets must rise strictly and the combined mask must have no bit
    /// linking two requests.
    pub fn validate(&self) -> Result<(), BatchError> {
        let fail = |msg: String| Err(BatchError::Invariant(msg));
        if self.offsets.first() != Some(&0) {
            return fail("first offset is not 0".into());
        }
        if self.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "offsets {:?} not strictly increasing",
                self.offsets
            ));
        }
        let sizes: usize = self.masks.iter().map(Vec::len).sum();
        if sizes != self.len()
            || self.node_ids.len() != self.len()
            || self.probs.len() != self.len()
        {
            return fail("segment lengths do not add up to the payload".into());
        }
        for (i, row) in self.combined_mask().iter().enumerate() {
            let seg = self.segment_of(i);
            let r = self.segment_range(seg);
            if let Some(j) = row.iter_ones().find(|j| !r.contains(j)) {
                return fail(format!("mask bit ({i}, {j}) crosses a request boundary"));
            }
        }
        Ok(())
    }

    fn segment_of(&self, index: usize) -> usize {
        self.offsets.partition_point(|&o| o <= index) - 1
    }
}
