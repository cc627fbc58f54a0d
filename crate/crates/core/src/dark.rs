//! Dark examples: passages of intermediate relevance built from a training
//! instance, and the distillation candidate set that contains them.
//!
//! Two constructions operate in token space:
//!
//! * **mix**: the positive followed by `SEP` and one negative, cut to the
//!   passage length limit. One per negative.
//! * **mask**: the positive with a fraction of its positions replaced by
//!   `MASK`. One per masking ratio. All ratios share a single position
//!   order, so a lower ratio masks a subset of the positions masked by a
//!   higher one.
//!
//! The candidate set is hard negatives, then mix, then mask examples. It
//! never contains the unmodified positive.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::TrainInstance;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::text::{TokenSeq, MASK, SEP};

pub const DEFAULT_MASK_RATIOS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    /// The labelled positive. Only appears in standard (non-dark) candidate
    /// sets.
    Positive,
    HardNegative,
    Mix,
    Mask,
}

impl CandidateKind {
    pub fn label(self) -> &'static str {
        match self {
            CandidateKind::Positive => "positive",
            CandidateKind::HardNegative => "hard_negative",
            CandidateKind::Mix => "mix",
            CandidateKind::Mask => "mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DarkSet {
    pub mix: Vec<TokenSeq>,
    pub mask: Vec<(f64, TokenSeq)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub kind: CandidateKind,
    pub ids: TokenSeq,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn kinds(&self) -> impl Iterator<Item = CandidateKind> + '_ {
        self.candidates.iter().map(|c| c.kind)
    }

    pub fn seqs(&self) -> impl Iterator<Item = &TokenSeq> + '_ {
        self.candidates.iter().map(|c| &c.ids)
    }
}

/// `pos ++ [SEP] ++ neg`, keeping the first `max_len` ids.
pub fn mix_with_positive(pos: &TokenSeq, neg: &TokenSeq, max_len: usize) -> TokenSeq {
    let mut out = Vec::with_capacity((pos.len() + 1 + neg.len()).min(max_len));
    out.extend(
        pos.iter()
            .copied()
            .chain(std::iter::once(SEP))
            .chain(neg.iter().copied())
            .take(max_len),
    );
    TokenSeq(out)
}

/// Number of positions masked at `ratio` for a sequence of `len`:
/// `ratio * len` rounded half up, capped at `len`.
pub fn mask_count(ratio: f64, len: usize) -> usize {
    // The epsilon absorbs representation error in products such as 0.15 * 10.
    (((ratio * len as f64) + 0.5 + 1e-9).floor() as usize).min(len)
}

/// The first `k` entries of a forward Fisher-Yates shuffle of `0..len`.
pub fn mask_positions(len: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let k = k.min(len);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

fn apply_mask(seq: &TokenSeq, positions: &[usize]) -> TokenSeq {
    let mut out = seq.clone();
    for &p in positions {
        out.0[p] = MASK;
    }
    out
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::Config(format!("masking ratio {ratio} outside [0, 1]")))
    }
}

/// Replaces exactly [`mask_count`] positions of `seq` with `MASK`.
pub fn mask_positive(seq: &TokenSeq, ratio: f64, rng: &mut Rng) -> Result<TokenSeq> {
    check_ratio(ratio)?;
    let k = mask_count(ratio, seq.len());
    Ok(apply_mask(seq, &mask_positions(seq.len(), k, rng)))
}

pub fn validate_ratios(ratios: &[f64]) -> Result<()> {
    for r in ratios {
        check_ratio(*r)?;
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "masking ratios must be strictly increasing, got {ratios:?}"
        )));
    }
    Ok(())
}

/// Builds the dark examples of one instance.
///
/// `with_mix` controls the mix examples; pass no ratios to skip masking.
/// One shuffle of the positive's positions is drawn from `rng` and shared by
/// every ratio.
pub fn build_dark_set(
    inst: &TrainInstance,
    data: &Dataset,
    ratios: &[f64],
    with_mix: bool,
    rng: &mut Rng,
) -> Result<DarkSet> {
    validate_ratios(ratios)?;
    let pos = data.passage(inst.positive_pid)?;
    let mix = if with_mix {
        inst.negative_pids
            .iter()
            .map(|&pid| Ok(mix_with_positive(pos, data.passage(pid)?, data.passage_max_len)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let k_max = ratios.iter().map(|&r| mask_count(r, pos.len())).max().unwrap_or(0);
    let order = mask_positions(pos.len(), k_max, rng);
    let mask = ratios
        .iter()
        .map(|&r| (r, apply_mask(pos, &order[..mask_count(r, pos.len())])))
        .collect();
    Ok(DarkSet { mix, mask })
}

/// Hard negatives in instance order, then mix examples, then mask examples
/// in ratio order.
pub fn assemble_candidates(inst: &TrainInstance, dark: &DarkSet, data: &Dataset) -> Result<CandidateSet> {
    let mut candidates = Vec::with_capacity(inst.m() + dark.mix.len() + dark.mask.len());
    for &pid in &inst.negative_pids {
        candidates.push(Candidate {
            kind: CandidateKind::HardNegative,
            ids: data.passage(pid)?.clone(),
        });
    }
    candidates.extend(dark.mix.iter().map(|s| Candidate {
        kind: CandidateKind::Mix,
        ids: s.clone(),
    }));
    candidates.extend(dark.mask.iter().map(|(_, s)| Candidate {
        kind: CandidateKind::Mask,
        ids: s.clone(),
    }));
    Ok(CandidateSet { candidates })
}

/// The conventional candidate set: the positive followed by the negatives.
pub fn standard_candidates(inst: &TrainInstance, data: &Dataset) -> Result<CandidateSet> {
    let mut candidates = Vec::with_capacity(1 + inst.m());
    candidates.push(Candidate {
        kind: CandidateKind::Positive,
        ids: data.passage(inst.positive_pid)?.clone(),
    });
    for &pid in &inst.negative_pids {
        candidates.push(Candidate {
            kind: CandidateKind::HardNegative,
            ids: data.passage(pid)?.clone(),
        });
    }
    Ok(CandidateSet { candidates })
}

#[derive(Serialize)]
struct ShardRecord<'a> {
    qid: u64,
    candidates: &'a [Candidate],
}

/// Writes one JSON line per instance: `{qid, candidates: [{kind, ids}]}`.
pub fn write_shard(path: &Path, records: &[(u64, CandidateSet)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (qid, set) in records {
        let rec = ShardRecord {
            qid: *qid,
            candidates: &set.candidates,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
