//! Two-tower bi-encoder. Each tower mean-pools token embeddings and applies an
//! affine projection; pairs are scored by the raw dot product of the two
//! pooled vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Link,
    Chat,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Link => "link",
            Role::Chat => "chat",
        })
    }
}

/// Embedding table (`vocab × dim`), projection (`dim × dim`, row = output) and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub embeddings: Vec<f64>,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Tower {
    fn zeros(vocab: usize, dim: usize) -> Self {
        Tower { embeddings: vec![0.0; vocab * dim], projection: vec![0.0; dim * dim], bias: vec![0.0; dim] }
    }

    fn pool(&self, ids: &[u32], dim: usize) -> Vec<f64> {
        let mut h = vec![0.0; dim];
        if ids.is_empty() {
            return h;
        }
        for &id in ids {
            let row = &self.embeddings[id as usize * dim..(id as usize + 1) * dim];
            for (acc, v) in h.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let n = ids.len() as f64;
        h.iter_mut().for_each(|x| *x /= n);
        h
    }

    fn project(&self, h: &[f64], dim: usize) -> Vec<f64> {
        (0..dim).map(|i| dot(&self.projection[i * dim..(i + 1) * dim], h) + self.bias[i]).collect()
    }

    fn encode(&self, ids: &[u32], dim: usize) -> Vec<f64> {
        if ids.is_empty() {
            return vec![0.0; dim];
        }
        self.project(&self.pool(ids, dim), dim)
    }

    fn is_finite(&self) -> bool {
        self.embeddings.iter().chain(&self.projection).chain(&self.bias).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TowerKind {
    Context,
    Candidate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoderParams {
    pub role: Role,
    pub dim: usize,
    pub vocab: Arc<Vocab>,
    pub context: Tower,
    pub candidate: Tower,
}

impl BiEncoderParams {
    pub fn zeros(role: Role, vocab: Arc<Vocab>, dim: usize) -> Self {
        let v = vocab.len();
        BiEncoderParams { role, dim, vocab, context: Tower::zeros(v, dim), candidate: Tower::zeros(v, dim) }
    }

    /// Seeded initialization: uniform embeddings with unit expected norm,
    /// identity projections, zero bias. Both towers start from the same
    /// embedding draw and are trained independently afterwards.
    pub fn init(role: Role, vocab: Arc<Vocab>, dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        let mut p = BiEncoderParams::zeros(role, vocab, dim);
        let mut rng = util::rng(seed, 0xe1);
        let a = (3.0 / dim as f64).sqrt();
        for (i, x) in p.context.embeddings.iter_mut().enumerate() {
            *x = if i < dim { 0.0 } else { rng.gen_range(-a..a) };
        }
        p.candidate.embeddings = p.context.embeddings.clone();
        for i in 0..dim {
            p.context.projection[i * dim + i] = 1.0;
            p.candidate.projection[i * dim + i] = 1.0;
        }
        Ok(p)
    }

    pub fn tower(&self, kind: TowerKind) -> &Tower {
        match kind {
            TowerKind::Context => &self.context,
            TowerKind::Candidate => &self.candidate,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let v = self.vocab.len() as u32;
        match ids.iter().find(|&&i| i >= v) {
            Some(bad) => Err(Error::Shape(format!("token id {bad} outside vocabulary of size {v}"))),
            None => Ok(()),
        }
    }

    pub fn encode(&self, kind: TowerKind, ids: &[u32]) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            log::debug!("encoding empty token sequence as the zero vector");
        }
        Ok(self.tower(kind).encode(ids, self.dim))
    }

    pub fn encode_batch(&self, kind: TowerKind, batch: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        batch.iter().map(|ids| self.encode(kind, ids)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.context.is_finite() && self.candidate.is_finite()
    }

    /// Parameter buffers in checkpoint order.
    pub fn buffers(&self) -> [&Vec<f64>; 6] {
        [
            &self.context.embeddings,
            &self.context.projection,
            &self.context.bias,
            &self.candidate.embeddings,
            &self.candidate.projection,
            &self.candidate.bias,
        ]
    }

    pub fn buffers_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.context.embeddings,
            &mut self.context.projection,
            &mut self.context.bias,
            &mut self.candidate.embeddings,
            &mut self.candidate.projection,
            &mut self.candidate.bias,
        ]
    }

    /// SHA-256 over the checkpoint encoding.
    pub fn digest(&self) -> String {
        util::sha256_hex(&super::checkpoint::encode(self))
    }
}

/// `S[i][j] = encode_context(contexts[i]) · encode_candidate(candidates[j])`.
pub fn score_matrix(params: &BiEncoderParams, contexts: &[Vec<u32>], candidates: &[Vec<u32>]) -> Result<Matrix> {
    let yc = params.encode_batch(TowerKind::Context, contexts)?;
    let yr = params.encode_batch(TowerKind::Candidate, candidates)?;
    Ok(scores_from_vectors(&yc, &yr))
}

pub fn scores_from_vectors(yc: &[Vec<f64>], yr: &[Vec<f64>]) -> Matrix {
    let mut s = Matrix::zeros(yc.len(), yr.len());
    for (i, c) in yc.iter().enumerate() {
        for (j, r) in yr.iter().enumerate() {
            s.set(i, j, dot(c, r));
        }
    }
    s
}

/// Gradients in the same layout as [`BiEncoderParams::buffers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub buffers: [Vec<f64>; 6],
}

impl Grads {
    pub fn zeros_like(p: &BiEncoderParams) -> Self {
        Grads { buffers: p.buffers().map(|b| vec![0.0; b.len()]) }
    }

    pub fn global_norm(&self) -> f64 {
        self.buffers.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.buffers.iter_mut().flatten().for_each(|x| *x *= k);
    }

    pub fn is_zero(&self) -> bool {
        self.buffers.iter().flatten().all(|&x| x == 0.0)
    }
}

fn backprop_tower(tower: &Tower, grads: &mut [Vec<f64>], ids: &[u32], upstream: &[f64], dim: usize) {
    if ids.is_empty() {
        return;
    }
    let h = tower.pool(ids, dim);
    let (emb, rest) = grads.split_at_mut(1);
    let (proj, bias) = rest.split_at_mut(1);
    let (emb, proj, bias) = (&mut emb[0], &mut proj[0], &mut bias[0]);
    for i in 0..dim {
        bias[i] += upstream[i];
        for j in 0..dim {
            proj[i * dim + j] += upstream[i] * h[j];
        }
    }
    // dL/dh = W^T g, spread evenly over the pooled tokens.
    let mut dh = vec![0.0; dim];
    for i in 0..dim {
        let g = upstream[i];
        if g == 0.0 {
            continue;
        }
        for (j, d) in dh.iter_mut().enumerate() {
            *d += tower.projection[i * dim + j] * g;
        }
    }
    let inv = 1.0 / ids.len() as f64;
    for &id in ids {
        let row = &mut emb[id as usize * dim..(id as usize + 1) * dim];
        for (r, d) in row.iter_mut().zip(&dh) {
            *r += d * inv;
        }
    }
}

/// Exact gradient of `Σ_ij upstream[i][j] · S[i][j]` with respect to every
/// parameter of both towers.
pub fn grad_score(
    params: &BiEncoderParams,
    contexts: &[Vec<u32>],
    candidates: &[Vec<u32>],
    upstream: &Matrix,
) -> Result<Grads> {
    if upstream.rows != contexts.len() || upstream.cols != candidates.len() {
        return Err(Error::Shape(format!(
            "upstream is {}x{} but batch is {}x{}",
            upstream.rows,
            upstream.cols,
            contexts.len(),
            candidates.len()
        )));
    }
    let dim = params.dim;
    let yc = params.encode_batch(TowerKind::Context, contexts)?;
    let yr = params.encode_batch(TowerKind::Candidate, candidates)?;
    let mut grads = Grads::zeros_like(params);
    let (ctx_grads, cand_grads) = grads.buffers.split_at_mut(3);

    for (i, ids) in contexts.iter().enumerate() {
        let mut g = vec![0.0; dim];
        for (j, r) in yr.iter().enumerate() {
            let u = upstream.get(i, j);
            if u != 0.0 {
                g.iter_mut().zip(r).for_each(|(a, b)| *a += u * b);
            }
        }
        backprop_tower(&params.context, ctx_grads, ids, &g, dim);
    }
    for (j, ids) in candidates.iter().enumerate() {
        let mut g = vec![0.0; dim];
        for (i, c) in yc.iter().enumerate() {
            let u = upstream.get(i, j);
            if u != 0.0 {
                g.iter_mut().zip(c).for_each(|(a, b)| *a += u * b);
            }
        }
        backprop_tower(&params.candidate, cand_grads, ids, &g, dim);
    }
    Ok(grads)
}
