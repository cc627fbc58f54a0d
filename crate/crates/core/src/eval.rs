//! Exact retrieval, ranking metrics and teacher score histograms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Qrels;
use crate::dark::{self, CandidateKind};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{CrossEncoderParams, DualEncoderParams};
use crate::optim::tape::dot;
use crate::par;
use crate::seed;
use crate::text::TokenSeq;

/// Retrieval depth used for the metrics file.
pub const EVAL_DEPTH: usize = 1000;

/// Encoded passages, one row per pid.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageIndex {
    pub pids: Vec<u64>,
    pub dim: usize,
    pub vectors: Vec<f64>,
}

impl PassageIndex {
    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Encodes `(pid, tokens)` pairs in order.
pub fn encode_corpus(de: &DualEncoderParams, passages: &[(u64, &TokenSeq)]) -> Result<PassageIndex> {
    let rows = par::try_map(passages, |(pid, seq)| {
        de.encode(seq)
            .map_err(|e| Error::Encode(format!("passage {pid}: {e}")))
    })?;
    Ok(PassageIndex {
        pids: passages.iter().map(|(p, _)| *p).collect(),
        dim: de.dim(),
        vectors: rows.concat(),
    })
}

/// Encodes the whole collection of `data` in collection order.
pub fn encode_dataset(de: &DualEncoderParams, data: &Dataset) -> Result<PassageIndex> {
    let passages = data
        .passage_ids()
        .iter()
        .map(|&pid| Ok((pid, data.passage(pid)?)))
        .collect::<Result<Vec<_>>>()?;
    encode_corpus(de, &passages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: u64,
    /// `(pid, score)`, score descending, ties by pid ascending.
    pub hits: Vec<(u64, f64)>,
}

impl RankedList {
    pub fn pids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.0).collect()
    }
}

// `+ 0.0` folds -0.0 into +0.0 so signed zeros tie
fn hit_order(a: &(u64, f64), b: &(u64, f64)) -> std::cmp::Ordering {
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then_with(|| a.0.cmp(&b.0))
}

/// Top `k` passages by inner product with `q`, by full scan. A `k` larger
/// than the index returns the full ranking.
pub fn retrieve(q: &[f64], index: &PassageIndex, k: usize) -> Result<Vec<(u64, f64)>> {
    if k == 0 {
        return Err(Error::Usage("retrieval depth must be at least 1".into()));
    }
    if q.len() != index.dim {
        return Err(Error::Shape(format!(
            "query vector has {} dims, index has {}",
            q.len(),
            index.dim
        )));
    }
    let mut hits: Vec<(u64, f64)> = index
        .pids
        .iter()
        .enumerate()
        .map(|(i, &pid)| (pid, dot(q, index.row(i))))
        .collect();
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_by(hit_order);
    Ok(hits)
}

/// Mean of a per-query metric plus the number of queries left out for
/// lacking relevance labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub n_queries: usize,
    pub excluded: usize,
}

fn aggregate(runs: &[RankedList], qrels: &Qrels, per_query: impl Fn(&[u64], &BTreeSet<u64>) -> f64) -> Aggregate {
    let mut sum = 0.0;
    let mut n = 0;
    let mut excluded = 0;
    for run in runs {
        match qrels.relevant(run.query_id) {
            Some(rel) if !rel.is_empty() => {
                sum += per_query(&run.pids(), rel);
                n += 1;
            }
            _ => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} queries without relevance labels excluded");
    }
    Aggregate {
        mean: if n == 0 { 0.0 } else { sum / n as f64 },
        n_queries: n,
        excluded,
    }
}

pub fn reciprocal_rank(ranked: &[u64], relevant: &BTreeSet<u64>, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|p| relevant.contains(p))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

pub fn recall(ranked: &[u64], relevant: &BTreeSet<u64>, k: usize) -> f64 {
    let found = ranked.iter().take(k).filter(|p| relevant.contains(p)).count();
    found as f64 / relevant.len() as f64
}

/// Binary-gain nDCG.
pub fn ndcg(ranked: &[u64], relevant: &BTreeSet<u64>, k: usize) -> f64 {
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, p)| relevant.contains(p))
        .map(|(i, _)| discount(i))
        .sum();
    let ideal: f64 = (0..relevant.len().min(k)).map(discount).sum();
    dcg / ideal
}

pub fn mrr_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Aggregate {
    aggregate(runs, qrels, |r, rel| reciprocal_rank(r, rel, k))
}

pub fn recall_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Aggregate {
    aggregate(runs, qrels, |r, rel| recall(r, rel, k))
}

pub fn ndcg_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Aggregate {
    aggregate(runs, qrels, |r, rel| ndcg(r, rel, k))
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr_at_10: f64,
    pub recall_at_50: f64,
    pub recall_at_1000: f64,
    pub ndcg_at_10: f64,
    pub n_queries: usize,
}

impl Metrics {
    pub fn from_runs(runs: &[RankedList], qrels: &Qrels) -> Self {
        let mrr = mrr_at_k(runs, qrels, 10);
        Self {
            mrr_at_10: mrr.mean,
            recall_at_50: recall_at_k(runs, qrels, 50).mean,
            recall_at_1000: recall_at_k(runs, qrels, 1000).mean,
            ndcg_at_10: ndcg_at_k(runs, qrels, 10).mean,
            n_queries: mrr.n_queries,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Retrieves the top `depth` passages for each query id, in the given order.
pub fn run_queries(
    de: &DualEncoderParams,
    data: &Dataset,
    index: &PassageIndex,
    qids: &[u64],
    depth: usize,
) -> Result<Vec<RankedList>> {
    par::try_map(qids, |&qid| {
        let q = de
            .encode(data.query(qid)?)
            .map_err(|e| Error::Encode(format!("query {qid}: {e}")))?;
        Ok(RankedList {
            query_id: qid,
            hits: retrieve(&q, index, depth)?,
        })
    })
}

/// Full-collection retrieval metrics over `qids`.
pub fn evaluate(de: &DualEncoderParams, data: &Dataset, qids: &[u64]) -> Result<Metrics> {
    let index = encode_dataset(de, data)?;
    let runs = run_queries(de, data, &index, qids, EVAL_DEPTH)?;
    Ok(Metrics::from_runs(&runs, &data.qrels))
}

/// 1-based rank of the positive among itself and the negatives; ties go to
/// the lower pid.
fn candidate_rank(pos: (u64, f64), negs: &[(u64, f64)]) -> usize {
    1 + negs
        .iter()
        .filter(|n| hit_order(n, &pos).is_lt())
        .count()
}

/// MRR@10 of the cross-encoder re-ranking each instance's positive and
/// negatives.
pub fn teacher_rerank_mrr(teacher: &CrossEncoderParams, data: &Dataset) -> Result<f64> {
    let rr = par::try_map(&data.instances, |inst| {
        let r = data.resolve(inst)?;
        let pos = (inst.positive_pid, teacher.score(r.query, r.positive)?);
        let negs = inst
            .negative_pids
            .iter()
            .zip(&r.negatives)
            .map(|(&pid, s)| Ok((pid, teacher.score(r.query, s)?)))
            .collect::<Result<Vec<_>>>()?;
        let rank = candidate_rank(pos, &negs);
        Ok(if rank <= 10 { 1.0 / rank as f64 } else { 0.0 })
    })?;
    Ok(if rr.is_empty() { 0.0 } else { rr.iter().sum::<f64>() / rr.len() as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            lo: -10.0,
            hi: 10.0,
            width: 0.5,
        }
    }
}

impl HistogramSpec {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !(self.lo < self.hi) || !self.width.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "histogram needs width > 0 and lo < hi, got width {} range [{}, {})",
                self.width, self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn n_buckets(&self) -> usize {
        (((self.hi - self.lo) / self.width) - 1e-9).ceil().max(1.0) as usize
    }

    /// Bucket of `score`, clamped into the first or last bucket.
    pub fn bucket(&self, score: f64) -> usize {
        let i = ((score - self.lo) / self.width).floor();
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(self.n_buckets() - 1)
        }
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let lo = self.lo + i as f64 * self.width;
        (lo, (lo + self.width).min(self.hi))
    }
}

pub fn bucketize(scores: &[f64], spec: &HistogramSpec) -> Vec<u64> {
    let mut counts = vec![0u64; spec.n_buckets()];
    for &s in scores {
        counts[spec.bucket(s)] += 1;
    }
    counts
}

/// Teacher scores per candidate group.
pub type GroupScores = BTreeMap<CandidateKind, Vec<f64>>;

/// Scores every training query against its positive, hard negatives and the
/// dark examples built from them. Masks are drawn from `mask_seed`.
pub fn teacher_group_scores(
    teacher: &CrossEncoderParams,
    data: &Dataset,
    ratios: &[f64],
    mask_seed: u64,
) -> Result<GroupScores> {
    let per_instance = par::map_range(data.instances.len(), |i| -> Result<Vec<(CandidateKind, f64)>> {
        let inst = &data.instances[i];
        let q = data.query(inst.query_id)?;
        let mut rng = seed::derived_rng(mask_seed, "histogram", i as u64);
        let dset = dark::build_dark_set(inst, data, ratios, true, &mut rng)?;
        let cands = dark::assemble_candidates(inst, &dset, data)?;
        let mut out = vec![(CandidateKind::Positive, teacher.score(q, data.passage(inst.positive_pid)?)?)];
        for c in &cands.candidates {
            out.push((c.kind, teacher.score(q, &c.ids)?));
        }
        Ok(out)
    });
    let mut groups = GroupScores::new();
    for kind in [CandidateKind::Positive, CandidateKind::HardNegative, CandidateKind::Mix, CandidateKind::Mask] {
        groups.insert(kind, Vec::new());
    }
    for scores in per_instance {
        for (kind, s) in scores? {
            groups.entry(kind).or_default().push(s);
        }
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub spec: HistogramSpec,
    pub groups: Vec<(CandidateKind, Vec<u64>)>,
}

impl Histogram {
    /// One row of counts per requested group, in the order given. Groups
    /// with no scores yield all-zero rows.
    pub fn from_scores(scores: &GroupScores, groups: &[CandidateKind], spec: HistogramSpec) -> Result<Self> {
        spec.validate()?;
        let groups = groups
            .iter()
            .map(|k| (*k, bucketize(scores.get(k).map_or(&[][..], |v| v), &spec)))
            .collect();
        Ok(Self { spec, groups })
    }

    pub fn counts(&self, kind: CandidateKind) -> Option<&[u64]> {
        self.groups.iter().find(|(k, _)| *k == kind).map(|(_, c)| c.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# range=[{},{}) width={}",
            self.spec.lo, self.spec.hi, self.spec.width
        );
        s.push_str("group,bucket_lo,bucket_hi,count\n");
        for (kind, counts) in &self.groups {
            for (i, c) in counts.iter().enumerate() {
                let (lo, hi) = self.spec.edges(i);
                let _ = writeln!(s, "{},{lo},{hi},{c}", kind.label());
            }
        }
        s
    }
}

/// `Σ min(p, q)` of the two count vectors normalized to sum 1; 1 for
/// identical shapes, 0 for disjoint support.
pub fn overlap_coefficient(a: &[u64], b: &[u64]) -> f64 {
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na as f64).min(y as f64 / nb as f64))
        .sum()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
