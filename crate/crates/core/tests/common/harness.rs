//! Drivers that run the crate's tree forward and cache pruning on random
//! inputs and measure the distance to the dense oracle.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use specpipe::model::{KvCache, Slot, ToyModel};
use specpipe::source::{
    expand_fixed_width, BeamConfig, Candidate, DraftProvider, DraftRequest, SourceError,
};
use specpipe::tree::{Child, NodeId, SpecTree, TokenId};

use super::{dense_hidden, path_tokens};

/// Appends one random level of at most `max_width` nodes.
pub fn random_level(rng: &mut ChaCha8Rng, tree: &SpecTree, max_width: usize) -> SpecTree {
    let bottom = tree.bottom_level();
    let want = rng.gen_range(1..=max_width);
    let mut children: Vec<Child> = Vec::new();
    for _ in 0..want {
        let parent = rng.gen_range(bottom.clone());
        let token = TokenId(rng.gen_range(0..tree.vocab()));
        if children
            .iter()
            .any(|c| c.parent == parent && c.token == token)
        {
            continue;
        }
        children.push(Child {
            parent,
            token,
            prob: rng.gen_range(0.01..1.0),
        });
    }
    children.sort_by(Child::layer_order);
    tree.layer_append(&children).unwrap()
}

/// Random tree of at most `max_nodes` nodes.
pub fn random_tree(rng: &mut ChaCha8Rng, vocab: u32, first_id: u64, max_nodes: usize) -> SpecTree {
    let root = TokenId(rng.gen_range(0..vocab));
    let mut tree = SpecTree::rooted_at(root, vocab, first_id).unwrap();
    let depth = rng.gen_range(0..=12);
    let width = rng.gen_range(1..=24);
    for _ in 0..depth {
        let next = random_level(rng, &tree, width);
        if next.len() > max_nodes {
            break;
        }
        tree = next;
    }
    tree
}

pub fn random_prompt(rng: &mut ChaCha8Rng, vocab: u32, max_len: usize) -> Vec<TokenId> {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| TokenId(rng.gen_range(0..vocab))).collect()
}

/// Cache holding `prompt` as verified rows over every layer.
pub fn prefilled(model: &ToyModel, prompt: &[TokenId]) -> KvCache {
    let layers = 0..model.config().layers;
    let mut kv = KvCache::new(layers.clone(), model.dim());
    let slots = (0..prompt.len())
        .map(|position| Slot::Verified {
            position,
            node: None,
        })
        .collect();
    let emb = model.embed(prompt, slots).unwrap();
    model
        .forward_layers(layers, &emb, &vec![Vec::new(); prompt.len()], &mut kv)
        .unwrap();
    kv
}

fn strict_ancestors(tree: &SpecTree, i: usize) -> Vec<NodeId> {
    let mut out = Vec::new();
    let mut cur = tree.parent(i);
    while let Some(p) = cur {
        out.push(tree.ids()[p]);
        cur = tree.parent(p);
    }
    out
}

/// Forwards tree nodes `rows` (BFS indices, parents first) through every
/// layer. Node `i` sits at position `base + depth(i)`.
pub fn forward_nodes(
    model: &ToyModel,
    kv: &mut KvCache,
    tree: &SpecTree,
    rows: std::ops::Range<usize>,
    base: usize,
) -> Vec<Vec<f64>> {
    let tokens: Vec<TokenId> = rows.clone().map(|i| tree.tokens()[i]).collect();
    let slots = rows
        .clone()
        .map(|i| Slot::Speculative {
            position: base + tree.depth(i),
            node: tree.ids()[i],
        })
        .collect();
    let ancestors: Vec<Vec<NodeId>> = rows.clone().map(|i| strict_ancestors(tree, i)).collect();
    let emb = model.embed(&tokens, slots).unwrap();
    let out = model
        .forward_layers(0..model.config().layers, &emb, &ancestors, kv)
        .unwrap();
    (0..out.rows()).map(|r| out.row(r).to_vec()).collect()
}

/// Largest deviation between the crate's hidden states for tree nodes and
/// the oracle's, where every node is recomputed along its own root path.
/// Only leaves are recomputed: a causal pass over a leaf's path yields all
/// of its ancestors too.
pub fn oracle_distance(
    model: &ToyModel,
    prefix: &[TokenId],
    tree: &SpecTree,
    rows: std::ops::Range<usize>,
    hidden: &[Vec<f64>],
) -> f64 {
    let layers = 0..model.config().layers;
    let mut worst: f64 = 0.0;
    let mut seen = vec![false; tree.len()];
    for i in rows.clone().rev() {
        if seen[i] {
            continue;
        }
        let mut seq = prefix.to_vec();
        seq.extend(path_tokens(tree, i));
        let dense = dense_hidden(model, &seq, layers.clone());
        let mut cur = Some(i);
        while let Some(c) = cur {
            if seen[c] {
                break;
            }
            seen[c] = true;
            if rows.contains(&c) {
                let got = &hidden[c - rows.start];
                let want = &dense[prefix.len() + tree.depth(c)];
                worst = worst.max(super::max_abs_diff(got, want));
            }
            cur = tree.parent(c);
        }
    }
    worst
}

/// One random tree forwarded in random BFS chunks after a random prompt.
/// Returns the worst deviation from the oracle.
pub fn tree_forward_case(model: &ToyModel, rng: &mut ChaCha8Rng, max_nodes: usize) -> f64 {
    let vocab = model.config().vocab;
    let prompt = random_prompt(rng, vocab, 6);
    let first_id = rng.gen_range(0..1000);
    let tree = random_tree(rng, vocab, first_id, max_nodes);
    let mut kv = prefilled(model, &prompt);
    let mut hidden = Vec::with_capacity(tree.len());
    let mut start = 0;
    while start < tree.len() {
        let end = rng.gen_range(start + 1..=tree.len());
        hidden.extend(forward_nodes(
            model,
            &mut kv,
            &tree,
            start..end,
            prompt.len(),
        ));
        start = end;
    }
    oracle_distance(model, &prompt, &tree, 0..tree.len(), &hidden)
}

/// Compares two caches row by row: verified rows by position, speculative
/// rows by node id. Both must hold the same set of rows.
pub fn cache_distance(a: &KvCache, b: &KvCache) -> f64 {
    assert_eq!(a.len(), b.len(), "caches hold different row counts");
    assert_eq!(a.verified_len(), b.verified_len());
    let mut worst: f64 = 0.0;
    for (ra, slot) in a.slots().iter().enumerate() {
        let rb = match slot {
            Slot::Verified { position, .. } => {
                assert_eq!(b.slots()[*position].position(), *position);
                *position
            }
            Slot::Speculative { node, .. } => {
                b.index_of(*node).expect("node missing from rebuilt cache")
            }
        };
        assert_eq!(a.slots()[ra].position(), b.slots()[rb].position());
        for l in a.layers() {
            worst = worst
                .max(super::max_abs_diff(a.key(l, ra), b.key(l, rb)))
                .max(super::max_abs_diff(a.value(l, ra), b.value(l, rb)));
        }
    }
    worst
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PruneCaseStats {
    pub worst: f64,
    pub hits: usize,
    pub flushes: usize,
    pub refused_prefix_drops: usize,
}

/// Random walk of grow / verify steps against a single full-depth cache.
/// A hit keeps the new root's ancestors and descendants plus the old root,
/// a flush keeps only the old root; either way the old root is promoted.
/// After each prune the cache is compared with one rebuilt from scratch,
/// and new levels are forwarded through the pruned cache and compared with
/// the oracle.
pub fn prune_case(model: &ToyModel, rng: &mut ChaCha8Rng, rounds: usize) -> PruneCaseStats {
    let vocab = model.config().vocab;
    let mut stats = PruneCaseStats::default();
    let mut verified = random_prompt(rng, vocab, 5);
    let mut kv = prefilled(model, &verified);
    let mut tree = SpecTree::new_root(TokenId(rng.gen_range(0..vocab)), vocab).unwrap();
    let h = forward_nodes(model, &mut kv, &tree, 0..1, verified.len());
    stats.worst = stats
        .worst
        .max(oracle_distance(model, &verified, &tree, 0..1, &h));

    for _ in 0..rounds {
        for _ in 0..rng.gen_range(0..3) {
            let before = tree.len();
            let grown = random_level(rng, &tree, 8);
            if grown.len() > 200 {
                break;
            }
            tree = grown;
            let h = forward_nodes(model, &mut kv, &tree, before..tree.len(), verified.len());
            stats.worst = stats.worst.max(oracle_distance(
                model,
                &verified,
                &tree,
                before..tree.len(),
                &h,
            ));
        }

        // Dropping a verified row must be refused and leave the cache intact.
        let snapshot = kv.clone();
        let victim = rng.gen_range(0..kv.verified_len());
        let pos = kv.slots()[victim].position();
        assert!(kv
            .prune(|s| s.position() != pos || !s.is_verified())
            .is_err());
        assert_eq!(kv, snapshot);
        stats.refused_prefix_drops += 1;

        let old_root = tree.ids()[0];
        let kids: Vec<usize> = tree.children(0).collect();
        if !kids.is_empty() && rng.gen_bool(0.7) {
            let c = kids[rng.gen_range(0..kids.len())];
            let column = tree.mask_column(c).unwrap();
            let row = tree.mask_row(c).unwrap();
            let keep: Vec<NodeId> = column
                .or(&row)
                .indices()
                .iter()
                .map(|&i| tree.ids()[i])
                .collect();
            kv.prune(|s| {
                s.is_verified() || s.node().is_some_and(|n| n == old_root || keep.contains(&n))
            })
            .unwrap();
            kv.promote(old_root).unwrap();
            verified.push(tree.tokens()[0]);
            tree = tree.to_subtree_prune(c).unwrap().0;
            stats.hits += 1;
        } else {
            kv.prune(|s| s.is_verified() || s.node() == Some(old_root))
                .unwrap();
            kv.promote(old_root).unwrap();
            verified.push(tree.tokens()[0]);
            tree = SpecTree::rooted_at(TokenId(rng.gen_range(0..vocab)), vocab, tree.next_id())
                .unwrap();
            let h = forward_nodes(model, &mut kv, &tree, 0..1, verified.len());
            stats.worst = stats
                .worst
                .max(oracle_distance(model, &verified, &tree, 0..1, &h));
            stats.flushes += 1;
        }
        assert_eq!(kv.verified_len(), verified.len(), "verified prefix lost");

        let mut fresh = prefilled(model, &verified);
        forward_nodes(model, &mut fresh, &tree, 0..tree.len(), verified.len());
        stats.worst = stats.worst.max(cache_distance(&kv, &fresh));
    }
    stats
}

/// Serves fixed candidate lists keyed by frontier node id.
pub struct TableDraft(pub std::collections::HashMap<NodeId, Vec<Candidate>>);

impl DraftProvider for TableDraft {
    fn draft(&mut self, req: &DraftRequest<'_>) -> Result<Vec<Candidate>, SourceError> {
        Ok(self.0[&req.frontier_node].clone())
    }
}

/// `k` distinct tokens with non-increasing probabilities. Dyadic values make
/// cumulative products exact and ties common.
pub fn random_candidates(
    rng: &mut ChaCha8Rng,
    vocab: u32,
    k: usize,
    dyadic: bool,
) -> Vec<Candidate> {
    let mut tokens: Vec<u32> = (0..vocab).collect();
    let (picked, _) = tokens.partial_shuffle(rng, k);
    let mut probs: Vec<f64> = (0..k)
        .map(|_| {
            if dyadic {
                rng.gen_range(1..=8) as f64 / 8.0
            } else {
                rng.gen_range(1e-3..1.0)
            }
        })
        .collect();
    probs.sort_by(|a, b| b.total_cmp(a));
    picked
        .iter()
        .zip(probs)
        .map(|(&t, prob)| Candidate {
            token: TokenId(t),
            prob,
        })
        .collect()
}

pub type Selection = Vec<(usize, TokenId)>;

/// One random fixed-width expansion checked against the exhaustive sort.
/// Returns the crate's and the oracle's choice as sorted (parent, token).
pub fn beam_case(rng: &mut ChaCha8Rng) -> (Selection, Selection) {
    let vocab = rng.gen_range(4..40);
    let dyadic = rng.gen_bool(0.5);
    let mut tree = SpecTree::new_root(TokenId(rng.gen_range(0..vocab)), vocab).unwrap();
    for _ in 0..rng.gen_range(0..4) {
        let bottom = tree.bottom_level();
        let mut children: Vec<Child> = Vec::new();
        for _ in 0..rng.gen_range(1..10) {
            let parent = rng.gen_range(bottom.clone());
            let token = TokenId(rng.gen_range(0..vocab));
            if children
                .iter()
                .any(|c| c.parent == parent && c.token == token)
            {
                continue;
            }
            let prob = if dyadic {
                rng.gen_range(1..=8) as f64 / 8.0
            } else {
                rng.gen_range(1e-3..1.0)
            };
            children.push(Child {
                parent,
                token,
                prob,
            });
        }
        children.sort_by(Child::layer_order);
        tree = tree.layer_append(&children).unwrap();
    }
    let k = rng.gen_range(2..=(vocab as usize).min(8));
    let w = rng.gen_range(1..=40);
    let mut table = std::collections::HashMap::new();
    let mut lists = Vec::new();
    for parent in tree.bottom_level() {
        let list = random_candidates(rng, vocab, k, dyadic);
        table.insert(tree.ids()[parent], list.clone());
        lists.push((parent, list));
    }
    let level = expand_fixed_width(
        &tree,
        &BeamConfig { w, k },
        &mut TableDraft(table),
        &[tree.tokens()[0]],
        1,
    )
    .unwrap();
    // The level must be appendable as returned.
    tree.layer_append(&level).unwrap();
    let mut got: Vec<(usize, TokenId)> = level.iter().map(|c| (c.parent, c.token)).collect();
    got.sort();
    (got, super::exhaustive_select(&tree, &lists, w))
}
