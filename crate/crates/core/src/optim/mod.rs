//! Gradients, the finite-difference oracle, AdamW and the learning-rate
//! schedule.

pub mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tape::{Grads, Graph, Var};

/// A fixed list of named, flat parameter tensors.
pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// One gradient buffer per parameter tensor, in [`Params::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like<P: Params + ?Sized>(params: &P) -> Self {
        Self(params.tensors().iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            tape::axpy(a, 1.0, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn matches<P: Params + ?Sized>(&self, params: &P) -> bool {
        let shapes = params.tensors();
        self.0.len() == shapes.len() && self.0.iter().zip(shapes).all(|(g, p)| g.len() == p.len())
    }

    /// Largest `|a - b| / max(|a|, |b|, floor)` over all coordinates.
    pub fn max_rel_error(&self, other: &Gradients, floor: f64) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Central differences `(f(θ+h) - f(θ-h)) / 2h`, one coordinate at a time.
pub fn finite_diff_grad<P, F>(loss: F, params: &P, step: f64) -> Gradients
where
    P: Params + Clone,
    F: Fn(&P) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut work = params.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (t, &n) in sizes.iter().enumerate() {
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.tensors()[t][i];
            work.tensors_mut()[t][i] = orig + step;
            let up = loss(&work);
            work.tensors_mut()[t][i] = orig - step;
            let down = loss(&work);
            work.tensors_mut()[t][i] = orig;
            *gi = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Gradients(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new<P: Params + ?Sized>(params: &P, config: AdamWConfig) -> Self {
        let zeros = Gradients::zeros_like(params).0;
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update. A non-finite or shape-mismatched gradient is
    /// rejected before any state changes.
    pub fn step<P: Params + ?Sized>(&mut self, params: &mut P, grads: &Gradients, lr: f64) -> Result<()> {
        if !grads.matches(params) || self.first_moment.len() != grads.0.len() {
            return Err(Error::Shape("gradient shapes do not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient; step rejected".into()));
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((theta, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..theta.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[i]);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_at(step: u64, warmup_steps: u64, peak_lr: f64, total_steps: u64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        peak_lr * (step as f64 / warmup_steps as f64)
    } else if total_steps == warmup_steps {
        peak_lr
    } else {
        peak_lr * ((total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
    }
}
