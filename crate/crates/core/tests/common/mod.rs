//! Reference implementations the crate is checked against. They share no
//! code with the crate beyond reading model weights and tree accessors.
//! [`harness`] holds the drivers that pit the two against each other.

#![allow(dead_code)]

pub mod harness;

use std::ops::Range;
use std::sync::Arc;

use specpipe::model::{ToyModel, ToyModelConfig, POSITION_SCALE};
use specpipe::source::Candidate;
use specpipe::tree::{Child, SpecTree, TokenId};

pub fn toy(vocab: u32, hidden: usize, layers: usize, seed: u64) -> Arc<ToyModel> {
    Arc::new(
        ToyModel::init(ToyModelConfig {
            vocab,
            hidden,
            layers,
            seed,
        })
        .unwrap(),
    )
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / sd * gain[i] + bias[i])
        .collect()
}

fn times(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|j| {
            x.iter()
                .enumerate()
                .map(|(i, xi)| xi * w[i * cols + j])
                .sum()
        })
        .collect()
}

fn position(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            POSITION_SCALE * if i % 2 == 0 { a.sin() } else { a.cos() }
        })
        .collect()
}

/// Embeddings of `tokens` at the given absolute positions.
pub fn dense_embed(model: &ToyModel, tokens: &[TokenId], positions: &[usize]) -> Vec<Vec<f64>> {
    let d = model.dim();
    tokens
        .iter()
        .zip(positions)
        .map(|(t, &p)| {
            let e = &model.embedding()[t.0 as usize * d..(t.0 as usize + 1) * d];
            e.iter().zip(position(p, d)).map(|(a, b)| a + b).collect()
        })
        .collect()
}

/// Causal recompute of a whole sequence through `layers`, starting from the
/// given per-position inputs. No cache, every attention recomputed.
pub fn dense_layers(model: &ToyModel, input: Vec<Vec<f64>>, layers: Range<usize>) -> Vec<Vec<f64>> {
    let d = model.dim();
    let f = model.config().ffn_dim();
    let mut x = input;
    for l in layers {
        let w = model.layer(l);
        let normed: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &w.attn_norm.gain, &w.attn_norm.bias))
            .collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|r| times(r, &w.wq, d)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| times(r, &w.wk, d)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| times(r, &w.wv, d)).collect();
        for i in 0..x.len() {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let mut mix = vec![0.0; d];
            for (j, e) in exp.iter().enumerate() {
                for c in 0..d {
                    mix[c] += e / z * v[j][c];
                }
            }
            let out = times(&mix, &w.wo, d);
            for c in 0..d {
                x[i][c] += out[c];
            }
        }
        for row in x.iter_mut() {
            let n = layer_norm(row, &w.ffn_norm.gain, &w.ffn_norm.bias);
            let h: Vec<f64> = times(&n, &w.w1, f)
                .into_iter()
                .zip(&w.b1)
                .map(|(a, b)| (a + b).max(0.0))
                .collect();
            let o = times(&h, &w.w2, d);
            for c in 0..d {
                row[c] += o[c] + w.b2[c];
            }
        }
    }
    x
}

/// Hidden state after `layers` for every position of `tokens`.
pub fn dense_hidden(model: &ToyModel, tokens: &[TokenId], layers: Range<usize>) -> Vec<Vec<f64>> {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    dense_layers(model, dense_embed(model, tokens, &positions), layers)
}

/// Greedy next token after `tokens`, recomputed from scratch.
pub fn dense_next(model: &ToyModel, tokens: &[TokenId]) -> TokenId {
    let h = dense_hidden(model, tokens, 0..model.config().layers);
    let fin = model.final_norm();
    let n = layer_norm(h.last().unwrap(), &fin.gain, &fin.bias);
    let d = model.dim();
    let mut best = (0usize, f64::NEG_INFINITY);
    for t in 0..model.config().vocab as usize {
        let s: f64 = model.embedding()[t * d..(t + 1) * d]
            .iter()
            .zip(&n)
            .map(|(a, b)| a * b)
            .sum();
        if s > best.1 {
            best = (t, s);
        }
    }
    TokenId(best.0 as u32)
}

/// Greedy continuation by repeated full recompute.
pub fn dense_decode(model: &ToyModel, prompt: &[TokenId], n: usize) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let t = dense_next(model, &seq);
        seq.push(t);
    }
    seq[prompt.len()..].to_vec()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Ancestor-or-self matrix rebuilt by walking the tree depth first from the
/// root, carrying the current root path.
pub fn dfs_mask(tree: &SpecTree) -> Vec<Vec<bool>> {
    let n = tree.len();
    let mut children = vec![Vec::new(); n];
    for i in 1..n {
        children[tree.parent(i).unwrap()].push(i);
    }
    let mut mask = vec![vec![false; n]; n];
    let mut stack = vec![(0usize, vec![0usize])];
    while let Some((node, path)) = stack.pop() {
        for &a in &path {
            mask[node][a] = true;
        }
        for &c in &children[node] {
            let mut p = path.clone();
            p.push(c);
            stack.push((c, p));
        }
    }
    mask
}

pub fn tree_mask(tree: &SpecTree) -> Vec<Vec<bool>> {
    let n = tree.len();
    (0..n)
        .map(|i| (0..n).map(|j| tree.mask_bit(i, j)).collect())
        .collect()
}

/// Path of tokens from the root (inclusive) to node `i`, by parent pointers.
pub fn path_tokens(tree: &SpecTree, i: usize) -> Vec<TokenId> {
    let mut out = vec![tree.tokens()[i]];
    let mut cur = i;
    while let Some(p) = tree.parent(cur) {
        out.push(tree.tokens()[p]);
        cur = p;
    }
    out.reverse();
    out
}

/// Cumulative probability by multiplying up the parent chain.
pub fn chain_prob(tree: &SpecTree, i: usize) -> f64 {
    let mut p = 1.0;
    let mut cur = Some(i);
    while let Some(c) = cur {
        if c != 0 {
            p *= tree.probs()[c];
        }
        cur = tree.parent(c);
    }
    p
}

/// Best `w` of every (frontier node, candidate) pair by sorting all of them:
/// cumulative probability descending, then parent index, then token id.
pub fn exhaustive_select(
    tree: &SpecTree,
    lists: &[(usize, Vec<Candidate>)],
    w: usize,
) -> Vec<(usize, TokenId)> {
    let mut all: Vec<(f64, usize, TokenId)> = Vec::new();
    for (parent, list) in lists {
        for c in list {
            all.push((chain_prob(tree, *parent) * c.prob, *parent, c.token));
        }
    }
    all.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut chosen: Vec<(usize, TokenId)> =
        all.into_iter().take(w).map(|(_, p, t)| (p, t)).collect();
    chosen.sort();
    chosen
}

/// Grows a tree level by level from a flat list of choices.
pub fn grow(tree: &SpecTree, picks: &[(usize, u32, f64)]) -> SpecTree {
    let bottom = tree.bottom_level();
    let mut children: Vec<Child> = Vec::new();
    for &(p, tok, prob) in picks {
        let parent = bottom.start + p % bottom.len();
        let token = TokenId(tok % tree.vocab());
        if children
            .iter()
            .any(|c| c.parent == parent && c.token == token)
        {
            continue;
        }
        children.push(Child {
            parent,
            token,
            prob,
        });
    }
    children.sort_by(Child::layer_order);
    tree.layer_append(&children).unwrap()
}
