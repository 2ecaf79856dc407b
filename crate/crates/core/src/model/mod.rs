//! Deterministic toy decoder used both as the sharded inference model and as
//! the sequential oracle.
//!
//! Architecture (all `f64`): token embedding plus a scaled sinusoidal position
//! signal, then `L` pre-norm blocks of single-head self-attention and a
//! two-layer ReLU feed-forward of width `2d`, each with a residual connection,
//! then a final layer norm and an output head tied to the embedding matrix.
//!
//! Weights come from one 64-bit linear congruential stream
//! (`x <- x * 6364136223846793005 + 1442695040888963407`, seeded with the
//! config seed) whose top 53 bits are mapped to `uniform(-0.1, 0.1)`. Tensors
//! are drawn in the order listed by [`ToyModelConfig::tensor_lengths`]; layer
//! norm gains are stored as `1 + u` and biases as `u`.

mod checkpoint;
mod kv;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{NodeId, TokenId};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use kv::{KvCache, Slot};

pub const INIT_RANGE: f64 = 0.1;
pub const POSITION_SCALE: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("node {node:?} attends to {ancestor:?}, which is not cached")]
    MissingAncestor { node: NodeId, ancestor: NodeId },
    #[error("cache contract violated: {0}")]
    ContractViolation(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab: u32,
    pub hidden: usize,
    pub layers: usize,
    pub seed: u64,
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab < 16 {
            return Err(ModelError::InvalidConfig(format!(
                "vocab {} < 16",
                self.vocab
            )));
        }
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig(format!(
                "hidden dim {} must be even and >= 2",
                self.hidden
            )));
        }
        if self.layers < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "{} layers, need at least 2",
                self.layers
            )));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Element counts of every tensor in draw/checkpoint order.
    pub fn tensor_lengths(&self) -> Vec<usize> {
        let d = self.hidden;
        let f = self.ffn_dim();
        let mut out = vec![self.vocab as usize * d];
        for _ in 0..self.layers {
            // attn norm gain/bias, wq, wk, wv, wo, ffn norm gain/bias, w1, b1, w2, b2
            out.extend([d, d, d * d, d * d, d * d, d * d, d, d, d * f, f, f * d, d]);
        }
        out.extend([d, d]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_lengths().iter().sum()
    }
}

/// The weight generator.
#[derive(Debug, Clone)]
pub struct Lcg {
    state: u64,
}

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self
            .state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.state
    }

    /// Uniform in `[-0.1, 0.1)`.
    pub fn next_weight(&mut self) -> f64 {
        let unit = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        (2.0 * unit - 1.0) * INIT_RANGE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Norm {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for i in 0..x.len() {
            out[i] = (x[i] - mean) * inv * self.gain[i] + self.bias[i];
        }
    }
}

/// Row-major weights, applied as `y = x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Norm,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ffn_norm: Norm,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    embedding: Vec<f64>,
    layers: Vec<LayerWeights>,
    final_norm: Norm,
}

/// Hidden states for a set of rows, each tagged with what it represents.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    dim: usize,
    slots: Vec<Slot>,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn new(dim: usize, slots: Vec<Slot>, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != slots.len() * dim {
            return Err(ModelError::Shape(format!(
                "{} values for {} rows of width {dim}",
                data.len(),
                slots.len()
            )));
        }
        Ok(Self { dim, slots, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            slots: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&Slot) -> bool) {
        let flags: Vec<bool> = self.slots.iter().map(&mut keep).collect();
        let dim = self.dim;
        self.data = self
            .data
            .chunks(dim)
            .zip(&flags)
            .filter(|(_, &k)| k)
            .flat_map(|(r, _)| r.iter().copied())
            .collect();
        let mut it = flags.iter();
        self.slots.retain(|_| *it.next().unwrap());
    }

    /// Appends all rows of `other`.
    pub fn extend(&mut self, other: &Embeddings) {
        assert_eq!(self.dim, other.dim);
        self.slots.extend_from_slice(&other.slots);
        self.data.extend_from_slice(&other.data);
    }

    /// Splits off rows `at..`.
    pub fn split_off(&mut self, at: usize) -> Embeddings {
        Embeddings {
            dim: self.dim,
            slots: self.slots.split_off(at),
            data: self.data.split_off(at * self.dim),
        }
    }
}

/// One independent forward computation: its rows, their tree-mask ancestors
/// and the cache they read from and extend.
pub struct ForwardJob<'a> {
    pub input: &'a Embeddings,
    pub ancestors: &'a [Vec<NodeId>],
    pub kv: &'a mut KvCache,
}

fn matvec(x: &[f64], w: &[f64], out_dim: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax_lowest(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Sinusoidal position signal scaled by [`POSITION_SCALE`].
pub fn position_signal(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = position as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            POSITION_SCALE * if i % 2 == 0 { angle.sin() } else { angle.cos() }
        })
        .collect()
}

impl ToyModel {
    pub fn init(cfg: ToyModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut lcg = Lcg::new(cfg.seed);
        let tensors = cfg
            .tensor_lengths()
            .into_iter()
            .map(|len| (0..len).map(|_| lcg.next_weight()).collect())
            .collect();
        Ok(Self::assemble(cfg, tensors, true))
    }

    /// Builds a model from tensors in canonical order. With `offset_gains`,
    /// layer-norm gains are drawn values shifted by 1.
    fn assemble(cfg: ToyModelConfig, tensors: Vec<Vec<f64>>, offset_gains: bool) -> Self {
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor count matches tensor_lengths");
        let gain = |v: Vec<f64>| {
            if offset_gains {
                v.into_iter().map(|g| 1.0 + g).collect()
            } else {
                v
            }
        };
        let embedding = next();
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let attn_norm = Norm {
                gain: gain(next()),
                bias: next(),
            };
            let (wq, wk, wv, wo) = (next(), next(), next(), next());
            let ffn_norm = Norm {
                gain: gain(next()),
                bias: next(),
            };
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            layers.push(LayerWeights {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_norm = Norm {
            gain: gain(next()),
            bias: next(),
        };
        Self {
            cfg,
            embedding,
            layers,
            final_norm,
        }
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.hidden
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn layer(&self, i: usize) -> &LayerWeights {
        &self.layers[i]
    }

    pub fn final_norm(&self) -> &Norm {
        &self.final_norm
    }

    /// All tensors in canonical order, as stored.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embedding];
        for l in &self.layers {
            out.extend([
                &l.attn_norm.gain[..],
                &l.attn_norm.bias,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm.gain,
                &l.ffn_norm.bias,
                &l.w1,
                &l.b1,
                &l.w2,
                &l.b2,
            ]);
        }
        out.extend([&self.final_norm.gain[..], &self.final_norm.bias]);
        out
    }

    /// Token embedding plus position signal for each slot.
    pub fn embed(&self, tokens: &[TokenId], slots: Vec<Slot>) -> Result<Embeddings, ModelError> {
        if tokens.len() != slots.len() {
            return Err(ModelError::Shape(format!(
                "{} tokens for {} slots",
                tokens.len(),
                slots.len()
            )));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (token, slot) in tokens.iter().zip(&slots) {
            if token.0 >= self.cfg.vocab {
                return Err(ModelError::Shape(format!(
                    "token {} outside vocabulary {}",
                    token.0, self.cfg.vocab
                )));
            }
            let t = token.0 as usize;
            let pos = position_signal(slot.position(), d);
            data.extend(
                self.embedding[t * d..(t + 1) * d]
                    .iter()
                    .zip(&pos)
                    .map(|(e, p)| e + p),
            );
        }
        Embeddings::new(d, slots, data)
    }

    /// Runs `layers` over `input`, attending through `kv`.
    ///
    /// Each row attends to the verified prefix (causally, for verified rows),
    /// to the cached nodes listed in its `ancestors` entry, and to itself. The
    /// rows' keys and values are appended to `kv`.
    pub fn forward_layers(
        &self,
        layers: Range<usize>,
        input: &Embeddings,
        ancestors: &[Vec<NodeId>],
        kv: &mut KvCache,
    ) -> Result<Embeddings, ModelError> {
        let mut out = self.forward_packed(
            layers,
            &mut [ForwardJob {
                input,
                ancestors,
                kv,
            }],
        )?;
        Ok(out.pop().unwrap())
    }

    /// Forward over several independent jobs packed row-wise. Every row sees
    /// only its own job's cache, so each output equals the solo computation.
    pub fn forward_packed(
        &self,
        layers: Range<usize>,
        jobs: &mut [ForwardJob<'_>],
    ) -> Result<Vec<Embeddings>, ModelError> {
        if layers.end > self.cfg.layers || layers.is_empty() {
            return Err(ModelError::Shape(format!(
                "layer range {layers:?} outside model of {} layers",
                self.cfg.layers
            )));
        }
        let d = self.dim();
        let mut plans = Vec::with_capacity(jobs.len());
        for job in jobs.iter() {
            plans.push(self.plan(&layers, job)?);
        }
        for (job, plan) in jobs.iter_mut().zip(&plans) {
            job.kv.append_slots(job.input.slots());
            debug_assert_eq!(job.kv.len(), plan.base + job.input.rows());
        }

        let mut states: Vec<Vec<f64>> = jobs.iter().map(|j| j.input.data.clone()).collect();
        let f = self.cfg.ffn_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut normed = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut attn = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut hidden = vec![0.0; f];

        for (local, layer) in layers.clone().enumerate() {
            let w = &self.layers[layer];
            for ((job, plan), x) in jobs.iter_mut().zip(&plans).zip(states.iter_mut()) {
                let rows = job.input.rows();
                let mut queries = vec![0.0; rows * d];
                for r in 0..rows {
                    w.attn_norm.apply(&x[r * d..(r + 1) * d], &mut normed);
                    matvec(&normed, &w.wq, d, &mut q);
                    matvec(&normed, &w.wk, d, &mut k);
                    matvec(&normed, &w.wv, d, &mut v);
                    queries[r * d..(r + 1) * d].copy_from_slice(&q);
                    job.kv.write(local, plan.base + r, &k, &v);
                }
                let keys = job.kv.keys_of(local);
                let values = job.kv.values_of(local);
                for r in 0..rows {
                    let qr = &queries[r * d..(r + 1) * d];
                    let allowed = &plan.allowed[r];
                    let mut scores: Vec<f64> = allowed
                        .iter()
                        .map(|&j| {
                            qr.iter()
                                .zip(&keys[j * d..(j + 1) * d])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    attn.iter_mut().for_each(|a| *a = 0.0);
                    for (&j, &s) in allowed.iter().zip(&scores) {
                        let p = s / total;
                        for (a, &vj) in attn.iter_mut().zip(&values[j * d..(j + 1) * d]) {
                            *a += p * vj;
                        }
                    }
                    matvec(&attn, &w.wo, d, &mut proj);
                    for (xi, pi) in x[r * d..(r + 1) * d].iter_mut().zip(&proj) {
                        *xi += pi;
                    }
                }
                for r in 0..rows {
                    let xr = &mut x[r * d..(r + 1) * d];
                    w.ffn_norm.apply(xr, &mut normed);
                    matvec(&normed, &w.w1, f, &mut hidden);
                    for (h, b) in hidden.iter_mut().zip(&w.b1) {
                        *h = (*h + b).max(0.0);
                    }
                    matvec(&hidden, &w.w2, d, &mut proj);
                    for ((xi, pi), b) in xr.iter_mut().zip(&proj).zip(&w.b2) {
                        *xi += pi + b;
                    }
                }
            }
        }

        Ok(jobs
            .iter()
            .zip(states)
            .map(|(job, data)| Embeddings {
                dim: d,
                slots: job.input.slots.clone(),
                data,
            })
            .collect())
    }

    /// Validates a job and resolves each row's attention set to cache rows.
    fn plan(&self, layers: &Range<usize>, job: &ForwardJob<'_>) -> Result<Plan, ModelError> {
        let d = self.dim();
        let kv = &job.kv;
        let input = job.input;
        if kv.layers() != *layers {
            return Err(ModelError::Shape(format!(
                "cache covers layers {:?}, forward asked for {layers:?}",
                kv.layers()
            )));
        }
        if input.dim != d || kv.dim() != d {
            return Err(ModelError::Shape(format!(
                "width {} / cache width {} vs model width {d}",
                input.dim,
                kv.dim()
            )));
        }
        if job.ancestors.len() != input.rows() {
            return Err(ModelError::Shape(format!(
                "{} mask rows for {} embedding rows",
                job.ancestors.len(),
                input.rows()
            )));
        }

        let base = kv.len();
        let first_spec_row = input
            .slots
            .iter()
            .position(|s| !s.is_verified())
            .unwrap_or(input.rows());
        if input.slots[first_spec_row..].iter().any(Slot::is_verified) {
            return Err(ModelError::ContractViolation(
                "verified rows must precede speculative rows".into(),
            ));
        }
        if first_spec_row > 0 && kv.verified_len() != kv.len() {
            return Err(ModelError::ContractViolation(
                "cannot extend the verified prefix while speculative rows are cached".into(),
            ));
        }
        let prefix_end = base.min(kv.verified_len()) + first_spec_row;

        let mut new_rows = std::collections::HashMap::new();
        for (r, slot) in input.slots.iter().enumerate() {
            if let Some(id) = slot.node() {
                if kv.index_of(id).is_some() || new_rows.insert(id, base + r).is_some() {
                    return Err(ModelError::ContractViolation(format!(
                        "node {} is already cached",
                        id.0
                    )));
                }
            }
        }

        let mut allowed = Vec::with_capacity(input.rows());
        for (r, slot) in input.slots.iter().enumerate() {
            let own = base + r;
            let mut set: Vec<usize> = if slot.is_verified() {
                (0..own).collect()
            } else {
                (0..prefix_end).collect()
            };
            let mut extra = Vec::with_capacity(job.ancestors[r].len());
            for &a in &job.ancestors[r] {
                let row = match kv.index_of(a) {
                    Some(row) => row,
                    None => match new_rows.get(&a) {
                        Some(&row) if row < own => row,
                        _ => {
                            return Err(ModelError::MissingAncestor {
                                node: slot.node().unwrap_or(NodeId(u64::MAX)),
                                ancestor: a,
                            })
                        }
                    },
                };
                if row >= prefix_end {
                    extra.push(row);
                }
            }
            extra.sort_unstable();
            extra.dedup();
            set.extend(extra);
            set.push(own);
            allowed.push(set);
        }
        Ok(Plan { base, allowed })
    }

    /// Output-head logits for a final hidden state.
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut normed = vec![0.0; d];
        self.final_norm.apply(hidden, &mut normed);
        self.embedding
            .chunks(d)
            .map(|e| e.iter().zip(&normed).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Greedy choice of the next token from a final hidden state.
    pub fn verify_next(&self, hidden: &[f64]) -> TokenId {
        TokenId(argmax_lowest(&self.logits(hidden)) as u32)
    }

    /// Plain autoregressive greedy continuation of `prompt`.
    pub fn sequential_decode(
        &self,
        prompt: &[TokenId],
        steps: usize,
    ) -> Result<Vec<TokenId>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::Shape("empty prompt".into()));
        }
        let mut out = Vec::with_capacity(steps);
        if steps == 0 {
            return Ok(out);
        }
        let all = 0..self.cfg.layers;
        let mut kv = KvCache::new(all.clone(), self.dim());
        let slots = (0..prompt.len())
            .map(|position| Slot::Verified {
                position,
                node: None,
            })
            .collect();
        let emb = self.embed(prompt, slots)?;
        let no_ancestors = vec![Vec::new(); prompt.len()];
        let hidden = self.forward_layers(all.clone(), &emb, &no_ancestors, &mut kv)?;
        let mut next = self.verify_next(hidden.row(prompt.len() - 1));
        out.push(next);
        while out.len() < steps {
            let position = prompt.len() + out.len() - 1;
            let emb = self.embed(
                &[next],
                vec![Slot::Verified {
                    position,
                    node: None,
                }],
            )?;
            let hidden = self.forward_layers(all.clone(), &emb, &[Vec::new()], &mut kv)?;
            next = self.verify_next(hidden.row(0));
            out.push(next);
        }
        Ok(out)
    }
}

struct Plan {
    base: usize,
    allowed: Vec<Vec<usize>>,
}
