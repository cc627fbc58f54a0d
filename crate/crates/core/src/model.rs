//! Toy dual-encoder student and cross-encoder teacher.
//!
//! The student encodes text as the mean of its token embeddings followed by
//! an affine projection, and scores a pair by inner product. The teacher
//! sees both texts at once: mean embeddings `u`, `v`, their elementwise
//! product and the lexical overlap feed a one-hidden-layer tanh network.
//!
//! Each scorer exists twice: a plain `f64` forward used for inference and a
//! graph forward used for training. Tests check that they agree.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::tape::{axpy, dot, log_softmax};
use crate::optim::{AdamWState, Gradients, Grads, Graph, Params, Var};
use crate::seed;
use crate::text::{TokenId, TokenSeq, PAD};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_HIDDEN: usize = 64;
pub const INIT_BOUND: f64 = 0.05;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut seed::Rng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }
}

fn content_ids(seq: &TokenSeq, vocab_rows: usize, what: &str) -> Result<Vec<u32>> {
    let ids: Vec<u32> = seq.content().collect();
    if ids.is_empty() {
        return Err(Error::Encode(format!("{what} has no non-padding tokens")));
    }
    if let Some(bad) = ids.iter().find(|&&t| t as usize >= vocab_rows) {
        return Err(Error::Shape(format!(
            "token id {bad} outside embedding table of {vocab_rows} rows"
        )));
    }
    Ok(ids)
}

fn mean_rows(table: &Matrix, ids: &[u32]) -> Vec<f64> {
    let mut out = vec![0.0; table.cols];
    for &id in ids {
        axpy(&mut out, 1.0, table.row(id as usize));
    }
    let inv = 1.0 / ids.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Student parameters: embeddings `V x h`, projection `h x h`, bias `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderParams {
    pub embedding: Matrix,
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
}

/// Graph leaves for a [`DualEncoderParams`].
#[derive(Debug, Clone, Copy)]
pub struct DualEncoderVars {
    pub embedding: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl DualEncoderParams {
    /// Weights uniform in `[-0.05, 0.05]`, bias zero.
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let embedding = Matrix::uniform(vocab_size, dim, INIT_BOUND, &mut rng);
        let proj_w = Matrix::uniform(dim, dim, INIT_BOUND, &mut rng);
        Self {
            embedding,
            proj_w,
            proj_b: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.proj_b.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows
    }

    /// `W · mean(E[seq]) + b` over the non-padding tokens.
    pub fn encode(&self, seq: &TokenSeq) -> Result<Vec<f64>> {
        let ids = content_ids(seq, self.vocab_size(), "sequence")?;
        let mean = mean_rows(&self.embedding, &ids);
        let h = self.dim();
        Ok((0..h)
            .map(|i| dot(self.proj_w.row(i), &mean) + self.proj_b[i])
            .collect())
    }

    pub fn leaves<'a>(&'a self, g: &mut Graph<'a>) -> DualEncoderVars {
        DualEncoderVars {
            embedding: g.matrix(&self.embedding.data, self.embedding.rows, self.embedding.cols),
            proj_w: g.matrix(&self.proj_w.data, self.proj_w.rows, self.proj_w.cols),
            proj_b: g.vector(&self.proj_b),
        }
    }

    pub fn encode_var(&self, g: &mut Graph<'_>, vars: &DualEncoderVars, seq: &TokenSeq) -> Result<Var> {
        let ids = content_ids(seq, self.vocab_size(), "sequence")?;
        let mean = g.mean_rows(vars.embedding, &ids);
        let proj = g.mat_vec(vars.proj_w, mean);
        Ok(g.add(proj, vars.proj_b))
    }

    pub fn gradients(grads: &mut Grads, vars: &DualEncoderVars) -> Gradients {
        Gradients(vec![
            grads.take(vars.embedding),
            grads.take(vars.proj_w),
            grads.take(vars.proj_b),
        ])
    }
}

impl Params for DualEncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.embedding.data, &self.proj_w.data, &self.proj_b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.embedding.data, &mut self.proj_w.data, &mut self.proj_b]
    }
}

/// Free-function form of [`DualEncoderParams::encode`].
pub fn de_encode(params: &DualEncoderParams, seq: &TokenSeq) -> Result<Vec<f64>> {
    params.encode(seq)
}

/// Inner product of two encodings.
pub fn de_score(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::Shape(format!(
            "cannot score vectors of dimension {} and {}",
            q.len(),
            p.len()
        )));
    }
    Ok(dot(q, p))
}

/// Teacher parameters: embeddings `V x h`, `w1` of `(3h+1) x d`, `b1` of `d`,
/// `w2` of `d`, scalar `b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEncoderParams {
    pub embedding: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossEncoderVars {
    pub embedding: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `|multiset(q) ∩ multiset(p)| / |q|` over non-padding tokens.
pub fn token_overlap(q: &TokenSeq, p: &TokenSeq) -> f64 {
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for t in p.content() {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut hits = 0usize;
    let mut q_len = 0usize;
    for t in q.iter().copied().filter(|&t| t != PAD) {
        q_len += 1;
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    if q_len == 0 {
        0.0
    } else {
        hits as f64 / q_len as f64
    }
}

impl CrossEncoderParams {
    pub fn init(vocab_size: usize, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let embedding = Matrix::uniform(vocab_size, dim, INIT_BOUND, &mut rng);
        let w1 = Matrix::uniform(3 * dim + 1, hidden, INIT_BOUND, &mut rng);
        let w2 = (0..hidden).map(|_| rng.gen_range(-INIT_BOUND..=INIT_BOUND)).collect();
        Self {
            embedding,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: 0.0,
        }
    }

    /// All-zero network of the given shape.
    pub fn zeros(vocab_size: usize, dim: usize, hidden: usize) -> Self {
        Self {
            embedding: Matrix::zeros(vocab_size, dim),
            w1: Matrix::zeros(3 * dim + 1, hidden),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows
    }

    fn features(&self, q_ids: &[u32], p_ids: &[u32], overlap: f64) -> Vec<f64> {
        let u = mean_rows(&self.embedding, q_ids);
        let v = mean_rows(&self.embedding, p_ids);
        let uv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a * b).collect();
        let mut f = Vec::with_capacity(3 * u.len() + 1);
        f.extend_from_slice(&u);
        f.extend_from_slice(&v);
        f.extend_from_slice(&uv);
        f.push(overlap);
        f
    }

    pub fn score(&self, q: &TokenSeq, p: &TokenSeq) -> Result<f64> {
        let q_ids = content_ids(q, self.vocab_size(), "query")?;
        let p_ids = content_ids(p, self.vocab_size(), "passage")?;
        let f = self.features(&q_ids, &p_ids, token_overlap(q, p));
        let mut hidden = self.b1.clone();
        for (i, &fi) in f.iter().enumerate() {
            axpy(&mut hidden, fi, self.w1.row(i));
        }
        Ok(hidden.iter().zip(&self.w2).map(|(h, w)| h.tanh() * w).sum::<f64>() + self.b2)
    }

    pub fn leaves<'a>(&'a self, g: &mut Graph<'a>) -> CrossEncoderVars {
        CrossEncoderVars {
            embedding: g.matrix(&self.embedding.data, self.embedding.rows, self.embedding.cols),
            w1: g.matrix(&self.w1.data, self.w1.rows, self.w1.cols),
            b1: g.vector(&self.b1),
            w2: g.vector(&self.w2),
            b2: g.vector(std::slice::from_ref(&self.b2)),
        }
    }

    pub fn score_var(&self, g: &mut Graph<'_>, vars: &CrossEncoderVars, q: &TokenSeq, p: &TokenSeq) -> Result<Var> {
        let q_ids = content_ids(q, self.vocab_size(), "query")?;
        let p_ids = content_ids(p, self.vocab_size(), "passage")?;
        let u = g.mean_rows(vars.embedding, &q_ids);
        let v = g.mean_rows(vars.embedding, &p_ids);
        let uv = g.mul(u, v);
        let overlap = g.scalar(token_overlap(q, p));
        let f = g.concat(&[u, v, uv, overlap]);
        let pre = g.mat_t_vec(vars.w1, f);
        let pre = g.add(pre, vars.b1);
        let hidden = g.tanh(pre);
        let out = g.dot(hidden, vars.w2);
        Ok(g.add(out, vars.b2))
    }

    pub fn gradients(grads: &mut Grads, vars: &CrossEncoderVars) -> Gradients {
        Gradients(vec![
            grads.take(vars.embedding),
            grads.take(vars.w1),
            grads.take(vars.b1),
            grads.take(vars.w2),
            grads.take(vars.b2),
        ])
    }
}

impl Params for CrossEncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            &self.embedding.data,
            &self.w1.data,
            &self.b1,
            &self.w2,
            std::slice::from_ref(&self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.embedding.data,
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2,
            std::slice::from_mut(&mut self.b2),
        ]
    }
}

/// Free-function form of [`CrossEncoderParams::score`].
pub fn ce_score(params: &CrossEncoderParams, q: &TokenSeq, p: &TokenSeq) -> Result<f64> {
    params.score(q, p)
}

/// Probabilities over an ordered candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution(pub Vec<f64>);

impl Distribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Max-shifted softmax.
pub fn softmax_over_candidates(scores: &[f64]) -> Result<Distribution> {
    if scores.is_empty() {
        return Err(Error::Numeric("softmax over an empty candidate list".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {bad}")));
    }
    Ok(Distribution(log_softmax(scores).into_iter().map(f64::exp).collect()))
}

/// `KL(target ‖ model)`. Terms with zero target mass contribute nothing.
pub fn kl_divergence(target: &Distribution, model: &Distribution) -> Result<f64> {
    if target.len() != model.len() {
        return Err(Error::Shape(format!(
            "distributions over {} and {} candidates",
            target.len(),
            model.len()
        )));
    }
    Ok(target
        .0
        .iter()
        .zip(&model.0)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, m)| t * (t / m).ln())
        .sum())
}

/// Which network a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DualEncoder,
    CrossEncoder,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned JSON container: shapes, row-major values, the producing config
/// and optionally the optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub tensors: Vec<TensorRecord>,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamWState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor {name}")))?;
        if t.shape != shape || t.values.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "tensor {name}: expected shape {shape:?}, found {:?} with {} values",
                t.shape,
                t.values.len()
            )));
        }
        Ok(t.values.clone())
    }

    fn shape_of(&self, name: &str) -> Result<&[usize]> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.shape.as_slice())
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor {name}")))
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Validation(format!(
                "checkpoint holds {:?}, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn record(name: &str, shape: Vec<usize>, values: &[f64]) -> TensorRecord {
    TensorRecord {
        name: name.to_string(),
        shape,
        values: values.to_vec(),
    }
}

fn expect_vocab(found: usize, expected: Option<usize>) -> Result<()> {
    match expected {
        Some(v) if v != found => Err(Error::Shape(format!(
            "checkpoint embedding has {found} rows, vocabulary has {v}"
        ))),
        _ => Ok(()),
    }
}

impl DualEncoderParams {
    pub fn to_checkpoint(&self, config: serde_json::Value, optimizer: Option<AdamWState>) -> Checkpoint {
        let (v, h) = (self.vocab_size(), self.dim());
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: ModelKind::DualEncoder,
            tensors: vec![
                record("embedding", vec![v, h], &self.embedding.data),
                record("proj_w", vec![h, h], &self.proj_w.data),
                record("proj_b", vec![h], &self.proj_b),
            ],
            config,
            optimizer,
        }
    }

    /// Rebuilds parameters, rejecting inconsistent shapes or a vocabulary
    /// size other than `vocab_size` when given.
    pub fn from_checkpoint(ckpt: &Checkpoint, vocab_size: Option<usize>) -> Result<Self> {
        ckpt.expect_kind(ModelKind::DualEncoder)?;
        let emb_shape = ckpt.shape_of("embedding")?;
        if emb_shape.len() != 2 {
            return Err(Error::Shape("embedding must be 2-dimensional".into()));
        }
        let (v, h) = (emb_shape[0], emb_shape[1]);
        expect_vocab(v, vocab_size)?;
        Ok(Self {
            embedding: Matrix {
                rows: v,
                cols: h,
                data: ckpt.take("embedding", &[v, h])?,
            },
            proj_w: Matrix {
                rows: h,
                cols: h,
                data: ckpt.take("proj_w", &[h, h])?,
            },
            proj_b: ckpt.take("proj_b", &[h])?,
        })
    }
}

impl CrossEncoderParams {
    pub fn to_checkpoint(&self, config: serde_json::Value, optimizer: Option<AdamWState>) -> Checkpoint {
        let (v, h, d) = (self.vocab_size(), self.dim(), self.hidden());
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: ModelKind::CrossEncoder,
            tensors: vec![
                record("embedding", vec![v, h], &self.embedding.data),
                record("w1", vec![3 * h + 1, d], &self.w1.data),
                record("b1", vec![d], &self.b1),
                record("w2", vec![d], &self.w2),
                record("b2", vec![1], std::slice::from_ref(&self.b2)),
            ],
            config,
            optimizer,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, vocab_size: Option<usize>) -> Result<Self> {
        ckpt.expect_kind(ModelKind::CrossEncoder)?;
        let emb_shape = ckpt.shape_of("embedding")?;
        let b1_shape = ckpt.shape_of("b1")?;
        if emb_shape.len() != 2 || b1_shape.len() != 1 {
            return Err(Error::Shape("malformed cross-encoder tensor ranks".into()));
        }
        let (v, h, d) = (emb_shape[0], emb_shape[1], b1_shape[0]);
        expect_vocab(v, vocab_size)?;
        Ok(Self {
            embedding: Matrix {
                rows: v,
                cols: h,
                data: ckpt.take("embedding", &[v, h])?,
            },
            w1: Matrix {
                rows: 3 * h + 1,
                cols: d,
                data: ckpt.take("w1", &[3 * h + 1, d])?,
            },
            b1: ckpt.take("b1", &[d])?,
            w2: ckpt.take("w2", &[d])?,
            b2: ckpt.take("b2", &[1])?[0],
        })
    }
}
