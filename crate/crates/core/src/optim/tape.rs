//! A small tensor-level reverse-mode tape.
//!
//! Nodes hold flat `f64` buffers with a `(rows, cols)` shape; vectors are
//! `(n, 1)` and scalars `(1, 1)`. Leaves borrow their data where possible so
//! large embedding tables are not copied onto every graph.

use std::borrow::Cow;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * x + b` elementwise.
    Affine(Var, f64),
    /// `M x` with `M` of shape `(r, c)` and `x` of length `c`.
    MatVec(Var, Var),
    /// `Mᵀ x` with `M` of shape `(r, c)` and `x` of length `r`.
    MatTVec(Var, Var),
    Dot(Var, Var),
    Tanh(Var),
    Concat(Vec<Var>),
    /// Mean of the selected rows of a `(r, c)` table.
    MeanRows(Var, Vec<u32>),
    /// Scalars collected into a vector.
    Stack(Vec<Var>),
    LogSoftmax(Var),
    Index(Var, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf matrix borrowing `data` (row-major).
    pub fn matrix(&mut self, data: &'a [f64], rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf shape does not match data");
        self.push(Cow::Borrowed(data), rows, cols, Op::Leaf)
    }

    pub fn vector(&mut self, data: &'a [f64]) -> Var {
        self.push(Cow::Borrowed(data), data.len(), 1, Op::Leaf)
    }

    pub fn owned_vector(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(Cow::Owned(data), n, 1, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(Cow::Owned(vec![x]), 1, 1, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn vec_node(&mut self, value: Vec<f64>, op: Op) -> Var {
        let n = value.len();
        self.push(Cow::Owned(value), n, 1, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.len_of(a), self.len_of(b), "elementwise length mismatch");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let (rows, cols) = self.shape(a);
        self.push(Cow::Owned(value), rows, cols, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).iter().map(|v| scale * v + shift).collect();
        let (rows, cols) = self.shape(x);
        self.push(Cow::Owned(value), rows, cols, Op::Affine(x, scale))
    }

    pub fn mat_vec(&mut self, m: Var, x: Var) -> Var {
        let (r, c) = self.shape(m);
        assert_eq!(self.len_of(x), c, "mat_vec: inner dimension mismatch");
        let (mv, xv) = (self.value(m), self.value(x));
        let value = (0..r)
            .map(|i| dot(&mv[i * c..(i + 1) * c], xv))
            .collect();
        self.vec_node(value, Op::MatVec(m, x))
    }

    pub fn mat_t_vec(&mut self, m: Var, x: Var) -> Var {
        let (r, c) = self.shape(m);
        assert_eq!(self.len_of(x), r, "mat_t_vec: inner dimension mismatch");
        let (mv, xv) = (self.value(m), self.value(x));
        let mut value = vec![0.0; c];
        for (i, &xi) in xv.iter().enumerate() {
            axpy(&mut value, xi, &mv[i * c..(i + 1) * c]);
        }
        self.vec_node(value, Op::MatTVec(m, x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.len_of(a), self.len_of(b), "dot length mismatch");
        let v = dot(self.value(a), self.value(b));
        self.push(Cow::Owned(vec![v]), 1, 1, Op::Dot(a, b))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        let (rows, cols) = self.shape(x);
        self.push(Cow::Owned(value), rows, cols, Op::Tanh(x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.vec_node(value, Op::Concat(parts.to_vec()))
    }

    /// Mean of rows `ids` of `table`. Panics on an empty selection.
    pub fn mean_rows(&mut self, table: Var, ids: &[u32]) -> Var {
        assert!(!ids.is_empty(), "mean_rows over no rows");
        let (r, c) = self.shape(table);
        let t = self.value(table);
        let mut value = vec![0.0; c];
        for &id in ids {
            let id = id as usize;
            assert!(id < r, "row {id} out of range for table with {r} rows");
            axpy(&mut value, 1.0, &t[id * c..(id + 1) * c]);
        }
        let inv = 1.0 / ids.len() as f64;
        value.iter_mut().for_each(|v| *v *= inv);
        self.vec_node(value, Op::MeanRows(table, ids.to_vec()))
    }

    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let value = scalars
            .iter()
            .map(|s| {
                assert_eq!(self.len_of(*s), 1, "stack expects scalars");
                self.value(*s)[0]
            })
            .collect();
        self.vec_node(value, Op::Stack(scalars.to_vec()))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = log_softmax(self.value(x));
        self.vec_node(value, Op::LogSoftmax(x))
    }

    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let v = self.value(x)[i];
        self.push(Cow::Owned(vec![v]), 1, 1, Op::Index(x, i))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().sum();
        self.push(Cow::Owned(vec![v]), 1, 1, Op::Sum(x))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.len_of(root) != 1 {
            let (r, c) = self.shape(root);
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape ({r}, {c})"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| axpy(d, 1.0, &g));
                    self.acc(&mut grads, *b, |d| axpy(d, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| axpy(d, 1.0, &g));
                    self.acc(&mut grads, *b, |d| axpy(d, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, |d| {
                        d.iter_mut().zip(&g).zip(bv).for_each(|((d, g), b)| *d += g * b)
                    });
                    self.acc(&mut grads, *b, |d| {
                        d.iter_mut().zip(&g).zip(av).for_each(|((d, g), a)| *d += g * a)
                    });
                }
                Op::Affine(x, scale) => {
                    self.acc(&mut grads, *x, |d| axpy(d, *scale, &g));
                }
                Op::MatVec(m, x) => {
                    let (r, c) = self.shape(*m);
                    let (mv, xv) = (self.value(*m), self.value(*x));
                    self.acc(&mut grads, *m, |d| {
                        for (row, &gi) in g.iter().enumerate() {
                            axpy(&mut d[row * c..(row + 1) * c], gi, xv);
                        }
                    });
                    self.acc(&mut grads, *x, |d| {
                        for (row, &gi) in g.iter().enumerate().take(r) {
                            axpy(d, gi, &mv[row * c..(row + 1) * c]);
                        }
                    });
                }
                Op::MatTVec(m, x) => {
                    let (_, c) = self.shape(*m);
                    let (mv, xv) = (self.value(*m), self.value(*x));
                    self.acc(&mut grads, *m, |d| {
                        for (row, &xi) in xv.iter().enumerate() {
                            axpy(&mut d[row * c..(row + 1) * c], xi, &g);
                        }
                    });
                    self.acc(&mut grads, *x, |d| {
                        for (row, di) in d.iter_mut().enumerate() {
                            *di += dot(&mv[row * c..(row + 1) * c], &g);
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, |d| axpy(d, g[0], bv));
                    self.acc(&mut grads, *b, |d| axpy(d, g[0], av));
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    self.acc(&mut grads, *x, |d| {
                        d.iter_mut()
                            .zip(&g)
                            .zip(y.iter())
                            .for_each(|((d, g), y)| *d += g * (1.0 - y * y))
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.len_of(*p);
                        self.acc(&mut grads, *p, |d| axpy(d, 1.0, &g[off..off + n]));
                        off += n;
                    }
                }
                Op::MeanRows(table, ids) => {
                    let (_, c) = self.shape(*table);
                    let inv = 1.0 / ids.len() as f64;
                    self.acc(&mut grads, *table, |d| {
                        for &id in ids {
                            let id = id as usize;
                            axpy(&mut d[id * c..(id + 1) * c], inv, &g);
                        }
                    });
                }
                Op::Stack(parts) => {
                    for (p, gi) in parts.iter().zip(&g) {
                        self.acc(&mut grads, *p, |d| d[0] += gi);
                    }
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let total: f64 = g.iter().sum();
                    self.acc(&mut grads, *x, |d| {
                        d.iter_mut()
                            .zip(&g)
                            .zip(y.iter())
                            .for_each(|((d, g), y)| *d += g - y.exp() * total)
                    });
                }
                Op::Index(x, idx) => {
                    self.acc(&mut grads, *x, |d| d[*idx] += g[0]);
                }
                Op::Sum(x) => {
                    self.acc(&mut grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads {
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
            grads,
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        let len = self.len_of(target);
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }
}

/// Gradients of the root with respect to every leaf of a graph.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Grads {
    /// Gradient for `v`; zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }

    /// Moves the gradient for `v` out, leaving `None`.
    pub fn take(&mut self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Max-shifted log-softmax.
pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}
