//! Supervised contrastive loss, KL distillation loss and their weighted sum.
//!
//! Every loss has a plain evaluation and a graph builder. The plain form is
//! what the finite-difference checks differentiate.

use crate::dataset::{Dataset, Resolved};
use crate::error::{Error, Result};
use crate::model::{kl_divergence, softmax_over_candidates, DualEncoderParams, DualEncoderVars, Distribution};
use crate::optim::tape::{dot, log_softmax};
use crate::optim::{Graph, Var};
use crate::corpus::TrainInstance;
use crate::text::TokenSeq;

/// `-log softmax(scores)[0]` where index 0 is the positive.
pub fn sup_loss_from_scores(positive: f64, negatives: &[f64]) -> f64 {
    let mut scores = Vec::with_capacity(1 + negatives.len());
    scores.push(positive);
    scores.extend_from_slice(negatives);
    -log_softmax(&scores)[0]
}

fn student_scores(de: &DualEncoderParams, q: &TokenSeq, cands: &[&TokenSeq]) -> Result<Vec<f64>> {
    let qv = de.encode(q)?;
    cands.iter().map(|c| Ok(dot(&qv, &de.encode(c)?))).collect()
}

/// Contrastive loss of the positive against the instance's negatives under
/// the student.
pub fn sup_loss(de: &DualEncoderParams, inst: &TrainInstance, data: &Dataset) -> Result<f64> {
    let r = data.resolve(inst)?;
    sup_loss_resolved(de, &r)
}

pub fn sup_loss_resolved(de: &DualEncoderParams, r: &Resolved<'_>) -> Result<f64> {
    let mut cands = Vec::with_capacity(1 + r.negatives.len());
    cands.push(r.positive);
    cands.extend(r.negatives.iter().copied());
    let s = student_scores(de, r.query, &cands)?;
    Ok(sup_loss_from_scores(s[0], &s[1..]))
}

/// `KL(teacher ‖ student)` over one ordered candidate list.
pub fn kd_loss(
    de: &DualEncoderParams,
    teacher: &Distribution,
    candidates: &[&TokenSeq],
    query: &TokenSeq,
) -> Result<f64> {
    if teacher.len() != candidates.len() {
        return Err(Error::Shape(format!(
            "teacher distribution over {} candidates, {} given",
            teacher.len(),
            candidates.len()
        )));
    }
    let s = student_scores(de, query, candidates)?;
    kl_divergence(teacher, &softmax_over_candidates(&s)?)
}

/// What one instance contributes to a batch.
#[derive(Debug, Clone)]
pub struct InstanceTerms<'a> {
    pub query: &'a TokenSeq,
    pub positive: &'a TokenSeq,
    pub negatives: Vec<&'a TokenSeq>,
    /// Present when the instance is distilled this epoch.
    pub kd: Option<KdTarget>,
}

/// Distillation candidates with the teacher's distribution over them.
#[derive(Debug, Clone, PartialEq)]
pub struct KdTarget {
    pub candidates: Vec<TokenSeq>,
    pub teacher: Distribution,
}

impl<'a> InstanceTerms<'a> {
    pub fn new(r: Resolved<'a>, kd: Option<KdTarget>) -> Self {
        Self {
            query: r.query,
            positive: r.positive,
            negatives: r.negatives,
            kd,
        }
    }
}

/// `λ · Σ sup + Σ kd` over a batch; only instances carrying a [`KdTarget`]
/// add a distillation term.
pub fn joint_loss(de: &DualEncoderParams, batch: &[InstanceTerms<'_>], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for item in batch {
        if lambda != 0.0 {
            let r = Resolved {
                query: item.query,
                positive: item.positive,
                negatives: item.negatives.clone(),
            };
            total += lambda * sup_loss_resolved(de, &r)?;
        }
        if let Some(kd) = &item.kd {
            let cands: Vec<&TokenSeq> = kd.candidates.iter().collect();
            total += kd_loss(de, &kd.teacher, &cands, item.query)?;
        }
    }
    Ok(total)
}

/// Scalar loss nodes for one instance.
#[derive(Debug, Clone, Copy)]
pub struct TermVars {
    pub total: Var,
    pub sup: Option<Var>,
    pub kd: Option<Var>,
}

fn score_vars(
    g: &mut Graph<'_>,
    de: &DualEncoderParams,
    vars: &DualEncoderVars,
    q: Var,
    cands: &[&TokenSeq],
) -> Result<Var> {
    let scores = cands
        .iter()
        .map(|c| {
            let p = de.encode_var(g, vars, c)?;
            Ok(g.dot(q, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.stack(&scores))
}

/// Builds `λ · sup + kd` for one instance on `g`. Returns `None` when the
/// instance contributes nothing (λ = 0 and no distillation target).
pub fn instance_loss_var(
    g: &mut Graph<'_>,
    de: &DualEncoderParams,
    vars: &DualEncoderVars,
    item: &InstanceTerms<'_>,
    lambda: f64,
) -> Result<Option<TermVars>> {
    if lambda == 0.0 && item.kd.is_none() {
        return Ok(None);
    }
    let q = de.encode_var(g, vars, item.query)?;
    let sup = if lambda != 0.0 {
        let mut cands = Vec::with_capacity(1 + item.negatives.len());
        cands.push(item.positive);
        cands.extend(item.negatives.iter().copied());
        let scores = score_vars(g, de, vars, q, &cands)?;
        let lsm = g.log_softmax(scores);
        let first = g.index(lsm, 0);
        Some(g.affine(first, -1.0, 0.0))
    } else {
        None
    };
    let kd = match &item.kd {
        Some(target) => {
            let cands: Vec<&TokenSeq> = target.candidates.iter().collect();
            Some(kd_loss_var(g, de, vars, q, &cands, &target.teacher)?)
        }
        None => None,
    };
    let total = match (sup, kd) {
        (Some(s), Some(k)) => {
            let ws = g.affine(s, lambda, 0.0);
            g.add(ws, k)
        }
        (Some(s), None) => g.affine(s, lambda, 0.0),
        (None, Some(k)) => k,
        (None, None) => unreachable!(),
    };
    Ok(Some(TermVars { total, sup, kd }))
}

/// `Σ t ln t - Σ t · log_softmax(student)` as a graph node.
pub fn kd_loss_var(
    g: &mut Graph<'_>,
    de: &DualEncoderParams,
    vars: &DualEncoderVars,
    q: Var,
    cands: &[&TokenSeq],
    teacher: &Distribution,
) -> Result<Var> {
    if teacher.len() != cands.len() {
        return Err(Error::Shape(format!(
            "teacher distribution over {} candidates, {} given",
            teacher.len(),
            cands.len()
        )));
    }
    let scores = score_vars(g, de, vars, q, cands)?;
    let lsm = g.log_softmax(scores);
    let neg_entropy: f64 = teacher.0.iter().filter(|t| **t > 0.0).map(|t| t * t.ln()).sum();
    let t = g.owned_vector(teacher.0.clone());
    let cross = g.dot(t, lsm);
    Ok(g.affine(cross, -1.0, neg_entropy))
}
