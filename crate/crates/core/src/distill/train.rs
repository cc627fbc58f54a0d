//! Teacher pre-training and student distillation loops.

use std::collections::HashSet;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::TrainInstance;
use crate::dark::{self, CandidateSet, DEFAULT_MASK_RATIOS};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{softmax_over_candidates, CrossEncoderParams, DualEncoderParams, DEFAULT_DIM, DEFAULT_HIDDEN};
use crate::optim::{lr_at, AdamWConfig, AdamWState, Gradients, Graph, Params};
use crate::par;
use crate::seed;
use crate::text::TokenSeq;

use super::loss::{instance_loss_var, InstanceTerms, KdTarget};
use super::plan::{plan_epoch, ConfidenceRecord, EpochPlan};

/// Student distillation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub mask_ratios: Vec<f64>,
    /// Weight of the supervised term.
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub dim: usize,
    pub query_max_len: usize,
    pub passage_max_len: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mask_ratios: DEFAULT_MASK_RATIOS.to_vec(),
            lambda: 0.01,
            batch_size: 8,
            epochs: 8,
            peak_lr: 0.05,
            warmup_steps: 100,
            weight_decay: 0.01,
            dim: DEFAULT_DIM,
            query_max_len: crate::dataset::DEFAULT_QUERY_MAX_LEN,
            passage_max_len: crate::dataset::DEFAULT_PASSAGE_MAX_LEN,
        }
    }
}

impl DistillConfig {
    /// The large-batch settings of the original full-scale setup.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 128,
            peak_lr: 5e-5,
            ..Self::default()
        }
    }

    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.dim == 0 {
            return Err(Error::Config("batch_size and dim must be positive".into()));
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be >= 0".into()));
        }
        dark::validate_ratios(&self.mask_ratios)
    }
}

/// Cross-encoder pre-training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            hidden: DEFAULT_HIDDEN,
            epochs: 4,
            batch_size: 8,
            peak_lr: 5e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
        }
    }
}

/// How distillation candidates are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativesMode {
    /// Positive plus `m` passages drawn uniformly from the collection.
    Rand,
    /// Positive plus the instance's hard negatives.
    Hard,
    /// Hard negatives plus mix and mask dark examples.
    Dark,
}

/// Ablation switches; only consulted in [`NegativesMode::Dark`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub mix: bool,
    pub mask: bool,
    pub adaptive: bool,
    pub supervised: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            mix: true,
            mask: true,
            adaptive: true,
            supervised: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudentOptions {
    pub mode: NegativesMode,
    pub toggles: Toggles,
    /// Seeds student init, batch order, random negatives and masks.
    pub seed: u64,
    pub init: Option<DualEncoderParams>,
}

impl StudentOptions {
    pub fn new(mode: NegativesMode, seed: u64) -> Self {
        Self {
            mode,
            toggles: Toggles::default(),
            seed,
            init: None,
        }
    }

    fn effective_toggles(&self) -> Toggles {
        match self.mode {
            NegativesMode::Dark => self.toggles,
            _ => Toggles {
                mix: false,
                mask: false,
                adaptive: false,
                supervised: true,
            },
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub sup: f64,
    pub kd: f64,
    pub n_kd: usize,
    pub applied: bool,
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub params: CrossEncoderParams,
    pub optimizer: AdamWState,
    pub log: Vec<StepLog>,
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub params: DualEncoderParams,
    pub optimizer: AdamWState,
    pub log: Vec<StepLog>,
    pub plans: Vec<EpochPlan>,
}

struct LoopSettings {
    epochs: usize,
    batch_size: usize,
    peak_lr: f64,
    warmup_steps: u64,
    adamw: AdamWConfig,
    shuffle_seed: u64,
}

struct ItemOutput {
    loss: f64,
    sup: f64,
    kd: Option<f64>,
    grads: Gradients,
}

/// Shared mini-batch loop. Per-item losses may be computed in parallel; their
/// gradients are summed in batch order before the update.
fn run_loop<P, C, S, F>(
    params: &mut P,
    n: usize,
    s: &LoopSettings,
    mut setup_epoch: S,
    item: F,
) -> Result<(AdamWState, Vec<StepLog>)>
where
    P: Params + Sync,
    C: Sync,
    S: FnMut(usize) -> Result<C>,
    F: Fn(&P, &C, usize, usize) -> Result<Option<ItemOutput>> + Sync + Send,
{
    let mut opt = AdamWState::new(params, s.adamw.clone());
    let mut log = Vec::new();
    let steps_per_epoch = n.div_ceil(s.batch_size) as u64;
    let total = steps_per_epoch * s.epochs as u64;
    let warmup = s.warmup_steps.min(total);
    let mut step = 0u64;
    for epoch in 1..=s.epochs {
        let ctx = setup_epoch(epoch)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::derived_rng(s.shuffle_seed, "shuffle", epoch as u64));
        for batch in order.chunks(s.batch_size) {
            step += 1;
            let lr = lr_at(step, warmup, s.peak_lr, total);
            let p: &P = params;
            let outs = par::try_map(batch, |&i| item(p, &ctx, epoch, i))?;
            let mut grads: Option<Gradients> = None;
            let (mut loss, mut sup, mut kd, mut n_kd) = (0.0, 0.0, 0.0, 0usize);
            for o in outs.into_iter().flatten() {
                loss += o.loss;
                sup += o.sup;
                if let Some(k) = o.kd {
                    kd += k;
                    n_kd += 1;
                }
                match grads.as_mut() {
                    Some(g) => g.add_assign(&o.grads),
                    None => grads = Some(o.grads),
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "epoch {epoch} step {step}: non-finite loss {loss}"
                )));
            }
            let applied = grads.is_some();
            if let Some(g) = grads {
                opt.step(params, &g, lr).map_err(|e| {
                    Error::Training(format!("epoch {epoch} step {step}: {e}"))
                })?;
            }
            log.push(StepLog {
                epoch,
                step,
                lr,
                loss,
                sup,
                kd,
                n_kd,
                applied,
            });
        }
        debug!("epoch {epoch}/{} done after {step} steps", s.epochs);
    }
    Ok((opt, log))
}

/// Trains the cross-encoder with the contrastive objective over each
/// instance's positive and negatives.
pub fn train_teacher(cfg: &TeacherConfig, data: &Dataset, seed: u64) -> Result<TeacherRun> {
    let mut params = CrossEncoderParams::init(data.vocab.len(), cfg.dim, cfg.hidden, seed::derive(seed, "init", 0));
    let settings = LoopSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size.max(1),
        peak_lr: cfg.peak_lr,
        warmup_steps: cfg.warmup_steps,
        adamw: AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        shuffle_seed: seed::derive(seed, "shuffle", 0),
    };
    let (optimizer, log) = run_loop(
        &mut params,
        data.instances.len(),
        &settings,
        |_| Ok(()),
        |p: &CrossEncoderParams, _: &(), _, i| {
            let r = data.resolve(&data.instances[i])?;
            let mut g = Graph::new();
            let vars = p.leaves(&mut g);
            let mut scores = Vec::with_capacity(1 + r.negatives.len());
            scores.push(p.score_var(&mut g, &vars, r.query, r.positive)?);
            for n in &r.negatives {
                scores.push(p.score_var(&mut g, &vars, r.query, n)?);
            }
            let s = g.stack(&scores);
            let lsm = g.log_softmax(s);
            let first = g.index(lsm, 0);
            let loss = g.affine(first, -1.0, 0.0);
            let value = g.scalar_value(loss);
            let mut grads = g.backward(loss)?;
            Ok(Some(ItemOutput {
                loss: value,
                sup: value,
                kd: None,
                grads: CrossEncoderParams::gradients(&mut grads, &vars),
            }))
        },
    )?;
    Ok(TeacherRun {
        params,
        optimizer,
        log,
    })
}

/// Replaces every instance's negatives with `m` passages sampled uniformly
/// from the collection, excluding the query's relevant passages.
pub fn random_negatives(data: &Dataset, seed: u64) -> Result<Vec<TrainInstance>> {
    let pids = data.passage_ids();
    let mut rng = seed::derived_rng(seed, "random_negatives", 0);
    data.instances
        .iter()
        .map(|inst| {
            let relevant = data.qrels.relevant(inst.query_id);
            let eligible = pids.len()
                - 1
                - relevant.map_or(0, |r| r.iter().filter(|p| **p != inst.positive_pid).count());
            if eligible < inst.m() {
                return Err(Error::Data(format!(
                    "collection too small to draw {} random negatives",
                    inst.m()
                )));
            }
            let mut chosen = Vec::with_capacity(inst.m());
            let mut seen = HashSet::with_capacity(inst.m());
            while chosen.len() < inst.m() {
                let pid = pids[rng.gen_range(0..pids.len())];
                let bad = pid == inst.positive_pid || relevant.is_some_and(|r| r.contains(&pid));
                if !bad && seen.insert(pid) {
                    chosen.push(pid);
                }
            }
            TrainInstance::new(inst.query_id, inst.positive_pid, chosen)
        })
        .collect()
}

/// Teacher distribution over a candidate set, temperature 1.
pub fn teacher_target(teacher: &CrossEncoderParams, query: &TokenSeq, set: CandidateSet) -> Result<KdTarget> {
    let scores = set
        .seqs()
        .map(|c| teacher.score(query, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(KdTarget {
        teacher: softmax_over_candidates(&scores)?,
        candidates: set.candidates.into_iter().map(|c| c.ids).collect(),
    })
}

/// Candidate set for one instance at `epoch` under the given mode/toggles.
#[allow(clippy::too_many_arguments)]
pub fn kd_candidates(
    inst: &TrainInstance,
    index: usize,
    data: &Dataset,
    cfg: &DistillConfig,
    toggles: Toggles,
    mode: NegativesMode,
    mask_seed: u64,
    epoch: usize,
) -> Result<CandidateSet> {
    if mode != NegativesMode::Dark || (!toggles.mix && !toggles.mask) {
        return dark::standard_candidates(inst, data);
    }
    let ratios: &[f64] = if toggles.mask { &cfg.mask_ratios } else { &[] };
    let mut rng = seed::derived_rng(seed::derive(mask_seed, "epoch", epoch as u64), "instance", index as u64);
    let ds = dark::build_dark_set(inst, data, ratios, toggles.mix, &mut rng)?;
    dark::assemble_candidates(inst, &ds, data)
}

/// Distils `teacher` into a dual encoder.
///
/// Every instance contributes `λ · sup` each epoch; instances selected by the
/// epoch plan also contribute the KL term over freshly assembled candidates.
/// `confidences` must come from the frozen teacher and cover every instance.
pub fn train_student(
    cfg: &DistillConfig,
    data: &Dataset,
    teacher: &CrossEncoderParams,
    confidences: &[ConfidenceRecord],
    opts: &StudentOptions,
) -> Result<StudentRun> {
    cfg.validate()?;
    let toggles = opts.effective_toggles();
    let n = data.instances.len();
    if toggles.adaptive && confidences.len() != n {
        return Err(Error::Usage(format!(
            "{} confidence records for {n} instances",
            confidences.len()
        )));
    }
    let instances = match opts.mode {
        NegativesMode::Rand => random_negatives(data, opts.seed)?,
        _ => data.instances.clone(),
    };
    let mut params = match &opts.init {
        Some(p) => {
            if p.vocab_size() != data.vocab.len() || p.dim() != cfg.dim {
                return Err(Error::Shape(format!(
                    "initial student is {}x{}, expected {}x{}",
                    p.vocab_size(),
                    p.dim(),
                    data.vocab.len(),
                    cfg.dim
                )));
            }
            p.clone()
        }
        None => DualEncoderParams::init(data.vocab.len(), cfg.dim, seed::derive(opts.seed, "init", 0)),
    };
    let lambda = if toggles.supervised { cfg.lambda } else { 0.0 };
    let mask_seed = seed::derive(opts.seed, "masks", 0);
    let settings = LoopSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        peak_lr: cfg.peak_lr,
        warmup_steps: cfg.warmup_steps,
        adamw: AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        shuffle_seed: seed::derive(opts.seed, "shuffle", 0),
    };
    let everyone: Vec<ConfidenceRecord> = if confidences.len() == n {
        confidences.to_vec()
    } else {
        (0..n)
            .map(|i| ConfidenceRecord {
                index: i,
                query_id: data.instances[i].query_id,
                confidence: 0.0,
            })
            .collect()
    };
    let mut plans = Vec::with_capacity(cfg.epochs);
    let (optimizer, log) = run_loop(
        &mut params,
        n,
        &settings,
        |epoch| {
            let plan = if toggles.adaptive {
                plan_epoch(&everyone, epoch, cfg.epochs)?
            } else {
                EpochPlan::everything(&everyone, epoch, cfg.epochs)
            };
            let mask = plan.mask(n);
            plans.push(plan);
            Ok(mask)
        },
        |p: &DualEncoderParams, in_plan: &Vec<bool>, epoch, i| {
            let inst = &instances[i];
            let r = data.resolve(inst)?;
            let kd = if in_plan[i] {
                let set = kd_candidates(inst, i, data, cfg, toggles, opts.mode, mask_seed, epoch)?;
                Some(teacher_target(teacher, r.query, set)?)
            } else {
                None
            };
            let terms = InstanceTerms::new(r, kd);
            let mut g = Graph::new();
            let vars = p.leaves(&mut g);
            let Some(tv) = instance_loss_var(&mut g, p, &vars, &terms, lambda)? else {
                return Ok(None);
            };
            let out = ItemOutput {
                loss: g.scalar_value(tv.total),
                sup: tv.sup.map_or(0.0, |v| g.scalar_value(v)),
                kd: tv.kd.map(|v| g.scalar_value(v)),
                grads: Gradients(Vec::new()),
            };
            let mut grads = g.backward(tv.total)?;
            Ok(Some(ItemOutput {
                grads: DualEncoderParams::gradients(&mut grads, &vars),
                ..out
            }))
        },
    )?;
    Ok(StudentRun {
        params,
        optimizer,
        log,
        plans,
    })
}
