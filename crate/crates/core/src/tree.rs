//! Dynamic speculative token tree.
//!
//! A tree of `n` nodes is stored in BFS order as three parallel arrays: the
//! token at each node, the conditional probability it was drafted with, and an
//! `n x n` lower-triangular bit mask where `M[i][j] = 1` iff node `j` is on the
//! root path of node `i` (or `j == i`). Index 0 is always the root, i.e. the
//! last verified token.
//!
//! Two updates change the shape: [`SpecTree::layer_append`] adds a new bottom
//! level and [`SpecTree::to_subtree_prune`] reroots the tree at a verified
//! node. Both return a fresh tree; existing values never change, so snapshots
//! handed to pipeline stages stay valid.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::BitRow;

/// Index into the vocabulary.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

/// Identity of a tree node that survives re-indexing by pruning.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("token {token} outside vocabulary of {vocab}")]
    InvalidToken { token: u32, vocab: u32 },
    #[error("node index {index} out of range for tree of {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("parent {parent} is not in the bottom level")]
    ParentNotInBottom { parent: usize },
    #[error("cannot append an empty layer")]
    EmptyLayer,
    #[error("children not ordered by (parent asc, prob desc, token asc) at position {position}")]
    Unordered { position: usize },
    #[error("probability {prob} outside [0, 1]")]
    InvalidProbability { prob: f64 },
    #[error("level {level} does not exist (tree has {levels})")]
    MissingLevel { level: usize, levels: usize },
    #[error("malformed tree encoding: {0}")]
    Decode(String),
    #[error("tree invariant violated: {0}")]
    Invariant(String),
}

/// One node of a layer to append.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Child {
    pub parent: usize,
    pub token: TokenId,
    pub prob: f64,
}

impl Child {
    /// Total order required by [`SpecTree::layer_append`].
    pub fn layer_order(a: &Child, b: &Child) -> std::cmp::Ordering {
        a.parent
            .cmp(&b.parent)
            .then(b.prob.total_cmp(&a.prob))
            .then(a.token.cmp(&b.token))
    }
}

/// Bit vector over a tree's nodes, e.g. a mask column or row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurvivorMask(pub BitRow);

impl SurvivorMask {
    pub fn contains(&self, i: usize) -> bool {
        self.0.get(i)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter_ones().collect()
    }

    pub fn count(&self) -> usize {
        self.0.count_ones()
    }

    pub fn or(&self, other: &SurvivorMask) -> SurvivorMask {
        SurvivorMask(self.0.or(&other.0))
    }

    pub fn and(&self, other: &SurvivorMask) -> SurvivorMask {
        SurvivorMask(self.0.and(&other.0))
    }
}

/// The portion of a tree needed by a stage that receives one level: the
/// level's nodes and their mask rows restricted to columns up to the level end.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSnapshot {
    pub level: usize,
    pub ids: Vec<NodeId>,
    pub tokens: Vec<TokenId>,
    pub probs: Vec<f64>,
    pub rows: Vec<BitRow>,
    /// Node ids of columns `0..level_end` at snapshot time.
    pub column_ids: Vec<NodeId>,
}

impl LevelSnapshot {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ancestor ids (excluding the node itself) of row `r`.
    pub fn ancestors(&self, r: usize) -> impl Iterator<Item = NodeId> + '_ {
        let own = self.ids[r];
        self.rows[r]
            .iter_ones()
            .map(|c| self.column_ids[c])
            .filter(move |&id| id != own)
    }

    /// Drops rows whose node fails `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(NodeId) -> bool) {
        let flags: Vec<bool> = self.ids.iter().map(|&id| keep(id)).collect();
        let mut it = flags.iter();
        self.ids.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.tokens.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.probs.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.rows.retain(|_| *it.next().unwrap());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecTree {
    vocab: u32,
    ids: Vec<NodeId>,
    tokens: Vec<TokenId>,
    probs: Vec<f64>,
    parents: Vec<Option<usize>>,
    level_offsets: Vec<usize>,
    mask: Vec<BitRow>,
    next_id: u64,
}

fn check_prob(prob: f64) -> Result<(), TreeError> {
    if prob.is_finite() && (0.0..=1.0).contains(&prob) {
        Ok(())
    } else {
        Err(TreeError::InvalidProbability { prob })
    }
}

impl SpecTree {
    /// Single-node tree rooted at a verified token.
    pub fn new_root(token: TokenId, vocab: u32) -> Result<Self, TreeError> {
        Self::rooted_at(token, vocab, 0)
    }

    /// Like [`SpecTree::new_root`] but node ids start at `first_id`, so a tree
    /// built after a flush never reuses ids of the discarded one.
    pub fn rooted_at(token: TokenId, vocab: u32, first_id: u64) -> Result<Self, TreeError> {
        if token.0 >= vocab {
            return Err(TreeError::InvalidToken {
                token: token.0,
                vocab,
            });
        }
        Ok(Self {
            vocab,
            ids: vec![NodeId(first_id)],
            tokens: vec![token],
            probs: vec![1.0],
            parents: vec![None],
            level_offsets: vec![0],
            mask: vec![BitRow::from_indices(1, [0])],
            next_id: first_id + 1,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn level_offsets(&self) -> &[usize] {
        &self.level_offsets
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn root_token(&self) -> TokenId {
        self.tokens[0]
    }

    pub fn levels(&self) -> usize {
        self.level_offsets.len()
    }

    pub fn mask_bit(&self, i: usize, j: usize) -> bool {
        self.mask[i].get(j)
    }

    pub fn mask_rows(&self) -> &[BitRow] {
        &self.mask
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents[i]
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        // Ids are increasing in BFS order.
        self.ids.binary_search(&id).ok()
    }

    fn check_index(&self, index: usize) -> Result<(), TreeError> {
        if index < self.len() {
            Ok(())
        } else {
            Err(TreeError::IndexOutOfRange {
                index,
                len: self.len(),
            })
        }
    }

    pub fn level_range(&self, level: usize) -> Result<Range<usize>, TreeError> {
        let start = *self
            .level_offsets
            .get(level)
            .ok_or(TreeError::MissingLevel {
                level,
                levels: self.levels(),
            })?;
        let end = self
            .level_offsets
            .get(level + 1)
            .copied()
            .unwrap_or(self.len());
        Ok(start..end)
    }

    pub fn depth(&self, i: usize) -> usize {
        self.level_offsets.partition_point(|&o| o <= i) - 1
    }

    /// Indices of the deepest level.
    pub fn bottom_level(&self) -> Range<usize> {
        *self.level_offsets.last().unwrap()..self.len()
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let next = self.level_range(self.depth(i) + 1).unwrap_or(0..0);
        next.filter(move |&j| self.parents[j] == Some(i))
    }

    pub fn find_child(&self, parent: usize, token: TokenId) -> Option<usize> {
        self.children(parent).find(|&j| self.tokens[j] == token)
    }

    /// Node indices from the root down to `i`, inclusive.
    pub fn root_path(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = i;
        while let Some(p) = self.parents[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Appends a new bottom level.
    ///
    /// `children` must be non-empty, reference parents in the current bottom
    /// level, and be strictly ordered by parent index, then descending
    /// probability, then ascending token id.
    pub fn layer_append(&self, children: &[Child]) -> Result<SpecTree, TreeError> {
        if children.is_empty() {
            return Err(TreeError::EmptyLayer);
        }
        let bottom = self.bottom_level();
        for (position, child) in children.iter().enumerate() {
            if !bottom.contains(&child.parent) {
                return Err(TreeError::ParentNotInBottom {
                    parent: child.parent,
                });
            }
            if child.token.0 >= self.vocab {
                return Err(TreeError::InvalidToken {
                    token: child.token.0,
                    vocab: self.vocab,
                });
            }
            check_prob(child.prob)?;
            if position > 0
                && Child::layer_order(&children[position - 1], child) != std::cmp::Ordering::Less
            {
                return Err(TreeError::Unordered { position });
            }
        }

        let n = self.len();
        let total = n + children.len();
        let mut out = self.clone();
        for row in &mut out.mask {
            row.resize(total);
        }
        for (offset, child) in children.iter().enumerate() {
            let mut row = out.mask[child.parent].clone();
            row.set(n + offset, true);
            out.mask.push(row);
            out.ids.push(NodeId(out.next_id));
            out.next_id += 1;
            out.tokens.push(child.token);
            out.probs.push(child.prob);
            out.parents.push(Some(child.parent));
        }
        out.level_offsets.push(n);
        Ok(out)
    }

    /// Column `i` of the mask: `i` and all of its descendants.
    pub fn mask_column(&self, i: usize) -> Result<SurvivorMask, TreeError> {
        self.check_index(i)?;
        Ok(SurvivorMask(BitRow::from_indices(
            self.len(),
            (i..self.len()).filter(|&j| self.mask[j].get(i)),
        )))
    }

    /// Row `i` of the mask: `i` and all of its ancestors.
    pub fn mask_row(&self, i: usize) -> Result<SurvivorMask, TreeError> {
        self.check_index(i)?;
        Ok(SurvivorMask(self.mask[i].clone()))
    }

    /// Reroots the tree at `new_root`, keeping exactly its subtree.
    ///
    /// Survivors keep their relative order and conditional probabilities; the
    /// new root's probability becomes 1.
    pub fn to_subtree_prune(&self, new_root: usize) -> Result<(SpecTree, SurvivorMask), TreeError> {
        let survivors = self.mask_column(new_root)?;
        let base_depth = self.depth(new_root);

        let kept: Vec<usize> = survivors.0.iter_ones().collect();
        let mut remap = vec![usize::MAX; self.len()];
        for (new, &old) in kept.iter().enumerate() {
            remap[old] = new;
        }

        let mut level_offsets = Vec::new();
        let mut current_depth = usize::MAX;
        for (new, &old) in kept.iter().enumerate() {
            let d = self.depth(old) - base_depth;
            if d != current_depth {
                level_offsets.push(new);
                current_depth = d;
            }
        }

        let mut probs: Vec<f64> = kept.iter().map(|&o| self.probs[o]).collect();
        probs[0] = 1.0;
        let tree = SpecTree {
            vocab: self.vocab,
            ids: kept.iter().map(|&o| self.ids[o]).collect(),
            tokens: kept.iter().map(|&o| self.tokens[o]).collect(),
            probs,
            parents: kept
                .iter()
                .enumerate()
                .map(|(new, &o)| {
                    if new == 0 {
                        None
                    } else {
                        self.parents[o].map(|p| remap[p])
                    }
                })
                .collect(),
            level_offsets,
            mask: kept
                .iter()
                .map(|&o| self.mask[o].select(&survivors.0))
                .collect(),
            next_id: self.next_id,
        };
        Ok((tree, survivors))
    }

    pub fn level_snapshot(&self, level: usize) -> Result<LevelSnapshot, TreeError> {
        let range = self.level_range(level)?;
        let end = range.end;
        Ok(LevelSnapshot {
            level,
            ids: self.ids[range.clone()].to_vec(),
            tokens: self.tokens[range.clone()].to_vec(),
            probs: self.probs[range.clone()].to_vec(),
            rows: range
                .map(|i| {
                    let mut row = self.mask[i].clone();
                    row.resize(end);
                    row
                })
                .collect(),
            column_ids: self.ids[..end].to_vec(),
        })
    }

    /// Product of conditional probabilities along the root path of `i`.
    pub fn cumulative_prob(&self, i: usize) -> Result<f64, TreeError> {
        self.check_index(i)?;
        Ok(self
            .root_path(i)
            .into_iter()
            .fold(1.0, |acc, j| acc * self.probs[j]))
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), TreeError> {
        let n = self.len();
        let bad = |msg: String| Err(TreeError::Invariant(msg));
        if n == 0 {
            return bad("empty tree".into());
        }
        if self.probs.len() != n
            || self.ids.len() != n
            || self.parents.len() != n
            || self.mask.len() != n
        {
            return bad("array lengths differ".into());
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.0 >= self.vocab {
                return bad(format!("token {} at node {i} outside vocabulary", t.0));
            }
        }
        for &p in &self.probs {
            check_prob(p)?;
        }
        if self.probs[0] != 1.0 {
            return bad("root probability is not 1".into());
        }
        if self.level_offsets.first() != Some(&0) {
            return bad("level offsets must start at 0".into());
        }
        if self.level_offsets.windows(2).any(|w| w[0] >= w[1])
            || *self.level_offsets.last().unwrap() >= n
        {
            return bad("level offsets not strictly increasing within the tree".into());
        }
        if self.ids.windows(2).any(|w| w[0] >= w[1]) || self.ids[n - 1].0 >= self.next_id {
            return bad("node ids not increasing".into());
        }
        if self.parents[0].is_some() {
            return bad("root has a parent".into());
        }
        for i in 1..n {
            match self.parents[i] {
                Some(p) if p < n && self.depth(p) + 1 == self.depth(i) => {}
                _ => return bad(format!("node {i} has no parent in the previous level")),
            }
        }
        for i in 0..n {
            if self.mask[i].len() != n {
                return bad(format!("mask row {i} has wrong width"));
            }
            let expected = BitRow::from_indices(n, self.root_path(i));
            if self.mask[i] != expected {
                return bad(format!("mask row {i} is not the ancestor closure"));
            }
        }
        Ok(())
    }

    /// Equality of tokens, probabilities, levels and mask, ignoring node ids.
    pub fn structurally_eq(&self, other: &SpecTree) -> bool {
        self.tokens == other.tokens
            && self.probs.len() == other.probs.len()
            && self
                .probs
                .iter()
                .zip(&other.probs)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.level_offsets == other.level_offsets
            && self.mask == other.mask
    }

    /// Little-endian wire image: `n: u32, levels: u32, tokens: u32[n],
    /// probs: f64[n], level_offsets: u32[levels]`, then `n` mask rows of
    /// `ceil(n/8)` bytes with bit `j` of row `i` equal to `M[i][j]`.
    pub fn encode(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(8 + n * 12 + self.levels() * 4 + n * n.div_ceil(8));
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(self.levels() as u32).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.0.to_le_bytes());
        }
        for p in &self.probs {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for &o in &self.level_offsets {
            out.extend_from_slice(&(o as u32).to_le_bytes());
        }
        for row in &self.mask {
            out.extend_from_slice(&row.to_bytes());
        }
        out
    }

    /// Parses [`SpecTree::encode`] output. Node ids are reassigned `0..n`.
    pub fn decode(bytes: &[u8], vocab: u32) -> Result<SpecTree, TreeError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let n = cur.u32()? as usize;
        let levels = cur.u32()? as usize;
        if n == 0 || levels == 0 || levels > n {
            return Err(TreeError::Decode(format!(
                "bad header n={n} levels={levels}"
            )));
        }
        let tokens = (0..n)
            .map(|_| cur.u32().map(TokenId))
            .collect::<Result<Vec<_>, _>>()?;
        let probs = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>, _>>()?;
        let level_offsets = (0..levels)
            .map(|_| cur.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let row_bytes = n.div_ceil(8);
        let mut mask = Vec::with_capacity(n);
        for i in 0..n {
            let raw = cur.take(row_bytes)?;
            mask.push(
                BitRow::from_bytes(n, raw)
                    .ok_or_else(|| TreeError::Decode(format!("stray bits in mask row {i}")))?,
            );
        }
        if cur.pos != bytes.len() {
            return Err(TreeError::Decode(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        if level_offsets.first() != Some(&0)
            || level_offsets.windows(2).any(|w| w[0] >= w[1])
            || *level_offsets.last().unwrap() >= n
        {
            return Err(TreeError::Decode("invalid level offsets".into()));
        }

        let mut tree = SpecTree {
            vocab,
            ids: (0..n as u64).map(NodeId).collect(),
            tokens,
            probs,
            parents: vec![None; n],
            level_offsets,
            mask,
            next_id: n as u64,
        };
        for level in 1..tree.levels() {
            let prev = tree.level_range(level - 1)?;
            for i in tree.level_range(level)? {
                let mut found = prev.clone().filter(|&j| tree.mask[i].get(j));
                match (found.next(), found.next()) {
                    (Some(p), None) => tree.parents[i] = Some(p),
                    _ => {
                        return Err(TreeError::Decode(format!(
                            "node {i} needs exactly one parent in level {}",
                            level - 1
                        )))
                    }
                }
            }
        }
        tree.validate()?;
        Ok(tree)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], TreeError> {
        let end = self.pos + len;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| TreeError::Decode(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, TreeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TreeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
