//! Teacher confidence and the per-epoch self-paced selection.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::TrainInstance;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::CrossEncoderParams;
use crate::optim::tape::log_softmax;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub index: usize,
    pub query_id: u64,
    /// Log-probability of the positive against the original negatives.
    pub confidence: f64,
}

/// `log softmax([positive, negatives...])[0]`.
pub fn confidence_from_scores(positive: f64, negatives: &[f64]) -> f64 {
    let mut s = Vec::with_capacity(1 + negatives.len());
    s.push(positive);
    s.extend_from_slice(negatives);
    log_softmax(&s)[0]
}

/// Teacher confidence of instance `index`, over its positive and original
/// negatives only.
pub fn teacher_confidence(
    teacher: &CrossEncoderParams,
    index: usize,
    inst: &TrainInstance,
    data: &Dataset,
) -> Result<ConfidenceRecord> {
    let r = data.resolve(inst)?;
    let pos = teacher.score(r.query, r.positive)?;
    let negs = r
        .negatives
        .iter()
        .map(|n| teacher.score(r.query, n))
        .collect::<Result<Vec<_>>>()?;
    let confidence = confidence_from_scores(pos, &negs);
    if !confidence.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite confidence for query {}",
            inst.query_id
        )));
    }
    Ok(ConfidenceRecord {
        index,
        query_id: inst.query_id,
        confidence,
    })
}

/// Confidence of every training instance, in instance order.
pub fn score_confidences(teacher: &CrossEncoderParams, data: &Dataset) -> Result<Vec<ConfidenceRecord>> {
    par::map_range(data.instances.len(), |i| {
        teacher_confidence(teacher, i, &data.instances[i], data)
    })
    .into_iter()
    .collect()
}

fn by_confidence_desc(a: &ConfidenceRecord, b: &ConfidenceRecord) -> Ordering {
    (b.confidence + 0.0)
        .total_cmp(&(a.confidence + 0.0))
        .then_with(|| a.index.cmp(&b.index))
}

/// Records sorted by confidence descending, ties by index ascending.
pub fn ranked(confidences: &[ConfidenceRecord]) -> Vec<ConfidenceRecord> {
    let mut v = confidences.to_vec();
    v.sort_by(by_confidence_desc);
    v
}

/// `qid<TAB>confidence` lines, most confident first.
pub fn confidence_tsv(confidences: &[ConfidenceRecord]) -> String {
    let mut s = String::new();
    for r in ranked(confidences) {
        let _ = writeln!(s, "{}\t{}", r.query_id, r.confidence);
    }
    s
}

/// `ceil((1 - t / 2T) * n)` in exact integer arithmetic.
pub fn plan_size(n: usize, t: usize, total: usize) -> usize {
    let den = 2 * total;
    (n * (den - t)).div_ceil(den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    /// 1-based.
    pub epoch: usize,
    pub total_epochs: usize,
    /// Instance indices, most confident first.
    pub selected: Vec<usize>,
    pub selected_qids: Vec<u64>,
}

impl EpochPlan {
    /// Every instance, in confidence order.
    pub fn everything(confidences: &[ConfidenceRecord], epoch: usize, total_epochs: usize) -> Self {
        let order = ranked(confidences);
        Self {
            epoch,
            total_epochs,
            selected: order.iter().map(|r| r.index).collect(),
            selected_qids: order.iter().map(|r| r.query_id).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Membership mask over `n` instances.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.selected {
            m[i] = true;
        }
        m
    }
}

/// The most confident `ceil((1 - t / 2T) n)` instances for epoch `t` of `T`.
pub fn plan_epoch(confidences: &[ConfidenceRecord], t: usize, total_epochs: usize) -> Result<EpochPlan> {
    if total_epochs == 0 || t == 0 || t > total_epochs {
        return Err(Error::Usage(format!(
            "epoch {t} outside 1..={total_epochs}"
        )));
    }
    let order = ranked(confidences);
    let k = plan_size(order.len(), t, total_epochs);
    Ok(EpochPlan {
        epoch: t,
        total_epochs,
        selected: order[..k].iter().map(|r| r.index).collect(),
        selected_qids: order[..k].iter().map(|r| r.query_id).collect(),
    })
}
