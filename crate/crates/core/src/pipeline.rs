//! Run configuration and the end-to-end stages shared by the CLI and the
//! experiment drivers.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, gen_synthetic, Corpus, SynthConfig};
use crate::dark::CandidateKind;
use crate::dataset::Dataset;
use crate::distill::plan::{confidence_tsv, score_confidences, ConfidenceRecord, EpochPlan};
use crate::distill::train::{
    train_student, train_teacher, DistillConfig, NegativesMode, StepLog, StudentOptions, TeacherConfig, Toggles,
};
use crate::error::{Error, Result};
use crate::eval::{self, Histogram, HistogramSpec, Metrics};
use crate::model::{Checkpoint, CrossEncoderParams, DualEncoderParams};
use crate::seed;
use crate::text::Vocab;

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEACHER_CHECKPOINT: &str = "teacher.json";
pub const STUDENT_CHECKPOINT: &str = "student.json";
pub const TEACHER_LOG: &str = "teacher_log.jsonl";
pub const STUDENT_LOG: &str = "train_log.jsonl";
pub const CONFIDENCE_FILE: &str = "confidence.tsv";
pub const PLANS_DIR: &str = "plans";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const SHARD_FILE: &str = "dark_examples.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Top-level seed; every other seed is derived from it.
    pub seed: u64,
    /// Directory holding the four corpus files. Relative paths resolve
    /// against the output directory; unset means `<out>/data`.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub vocab_size: usize,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub mode: NegativesMode,
    pub toggles: Toggles,
    pub histogram: HistogramSpec,
    pub histogram_groups: Vec<CandidateKind>,
    pub sweep_m: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            synth: SynthConfig::default(),
            vocab_size: 30_000,
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            mode: NegativesMode::Dark,
            toggles: Toggles::default(),
            histogram: HistogramSpec::default(),
            histogram_groups: vec![
                CandidateKind::Positive,
                CandidateKind::HardNegative,
                CandidateKind::Mix,
                CandidateKind::Mask,
            ],
            sweep_m: vec![5, 10, 15, 20, 25, 30],
        }
    }
}

/// Named sub-seeds of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub teacher: u64,
    pub student: u64,
    pub masks: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            data: seed::derive(base, "data", 0),
            teacher: seed::derive(base, "teacher", 0),
            student: seed::derive(base, "student", 0),
            masks: seed::derive(base, "masks", 0),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.distill.validate()?;
        self.histogram.validate()?;
        if self.teacher.batch_size == 0 || self.teacher.dim == 0 || self.teacher.hidden == 0 {
            return Err(Error::Config("teacher batch_size, dim and hidden must be positive".into()));
        }
        if self.vocab_size <= crate::text::NUM_SPECIAL {
            return Err(Error::Config(format!(
                "vocab_size must exceed {}",
                crate::text::NUM_SPECIAL
            )));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_base(self.seed)
    }

    /// The synthetic-data config with its seed taken from the run seed.
    pub fn resolved_synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seeds().data,
            ..self.synth.clone()
        }
    }

    pub fn data_dir(&self, out_dir: &Path) -> PathBuf {
        match &self.data_dir {
            Some(d) if d.is_absolute() => d.clone(),
            Some(d) => out_dir.join(d),
            None => out_dir.join("data"),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates the synthetic corpus into `dir` with a manifest echoing the
/// config and seed.
pub fn generate(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    let synth = cfg.resolved_synth();
    let corpus = gen_synthetic(&synth)?;
    create_dir(dir)?;
    corpus.write(dir)?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &serde_json::json!({ "run_seed": cfg.seed, "synth": synth }),
    )?;
    Ok(corpus)
}

/// Loads the corpus from `dir`, generating it first if it is absent.
pub fn load_or_generate(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    if dir.join(corpus::COLLECTION_FILE).exists() {
        Corpus::load(dir)
    } else {
        info!("no corpus in {}, generating", dir.display());
        generate(cfg, dir)
    }
}

/// Builds the vocabulary (or reuses `vocab`) and tokenizes the corpus.
pub fn build_dataset(cfg: &RunConfig, corpus: &Corpus, vocab: Option<Vocab>) -> Result<Dataset> {
    let vocab = match vocab {
        Some(v) => v,
        None => Vocab::build(&corpus.passages, &corpus.queries, cfg.vocab_size)?,
    };
    Dataset::new(corpus, vocab, cfg.distill.query_max_len, cfg.distill.passage_max_len)
}

/// Loads `vocab.tsv` from `dir` when present.
pub fn load_vocab(dir: &Path) -> Result<Option<Vocab>> {
    let path = dir.join(VOCAB_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Vocab::from_tsv(&s, &path).map(Some)
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

/// Corpus, tokenized data and vocabulary for a run rooted at `out_dir`.
pub fn prepare_data(cfg: &RunConfig, out_dir: &Path) -> Result<(Corpus, Dataset)> {
    let dir = cfg.data_dir(out_dir);
    let corpus = load_or_generate(cfg, &dir)?;
    let data = build_dataset(cfg, &corpus, load_vocab(&dir)?)?;
    create_dir(out_dir)?;
    let path = out_dir.join(VOCAB_FILE);
    fs::write(&path, data.vocab.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok((corpus, data))
}

pub fn teacher_stage(cfg: &RunConfig, data: &Dataset, out_dir: &Path) -> Result<CrossEncoderParams> {
    let run = train_teacher(&cfg.teacher, data, cfg.seeds().teacher)?;
    run.params
        .to_checkpoint(config_value(cfg), Some(run.optimizer))
        .save(&out_dir.join(TEACHER_CHECKPOINT))?;
    write_jsonl(&out_dir.join(TEACHER_LOG), &run.log)?;
    Ok(run.params)
}

pub fn load_teacher(path: &Path, data: &Dataset) -> Result<CrossEncoderParams> {
    CrossEncoderParams::from_checkpoint(&Checkpoint::load(path)?, Some(data.vocab.len()))
}

pub fn load_student(path: &Path, data: &Dataset) -> Result<DualEncoderParams> {
    DualEncoderParams::from_checkpoint(&Checkpoint::load(path)?, Some(data.vocab.len()))
}

pub fn confidence_stage(teacher: &CrossEncoderParams, data: &Dataset, out_dir: &Path) -> Result<Vec<ConfidenceRecord>> {
    let conf = score_confidences(teacher, data)?;
    let path = out_dir.join(CONFIDENCE_FILE);
    fs::write(&path, confidence_tsv(&conf)).map_err(|e| Error::io(&path, e))?;
    Ok(conf)
}

/// Reads `confidence.tsv` back into instance order. Needs one instance per
/// query id.
pub fn load_confidences(path: &Path, data: &Dataset) -> Result<Vec<ConfidenceRecord>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_qid = std::collections::HashMap::new();
    for (i, line) in s.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let (q, c) = line.split_once('\t').ok_or_else(|| parse_err("expected qid<TAB>confidence"))?;
        let q: u64 = q.trim().parse().map_err(|_| parse_err("bad query id"))?;
        let c: f64 = c.trim().parse().map_err(|_| parse_err("bad confidence"))?;
        if !c.is_finite() || c > 0.0 {
            return Err(parse_err("confidence must be finite and <= 0"));
        }
        by_qid.insert(q, c);
    }
    let mut seen = std::collections::HashSet::new();
    data.instances
        .iter()
        .enumerate()
        .map(|(index, inst)| {
            if !seen.insert(inst.query_id) {
                return Err(Error::Data(format!(
                    "query {} has several instances; confidences are keyed by query id",
                    inst.query_id
                )));
            }
            let confidence = *by_qid
                .get(&inst.query_id)
                .ok_or_else(|| Error::Data(format!("no confidence for query {}", inst.query_id)))?;
            Ok(ConfidenceRecord {
                index,
                query_id: inst.query_id,
                confidence,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct PlanFile<'a> {
    epoch: usize,
    total_epochs: usize,
    selected_qids: &'a [u64],
}

pub struct StudentOutput {
    pub params: DualEncoderParams,
    pub log: Vec<StepLog>,
    pub plans: Vec<EpochPlan>,
}

pub fn student_options(cfg: &RunConfig, init: Option<DualEncoderParams>) -> StudentOptions {
    StudentOptions {
        mode: cfg.mode,
        toggles: cfg.toggles,
        seed: cfg.seeds().student,
        init,
    }
}

pub fn distill_stage(
    cfg: &RunConfig,
    data: &Dataset,
    teacher: &CrossEncoderParams,
    confidences: &[ConfidenceRecord],
    init: Option<DualEncoderParams>,
    out_dir: &Path,
) -> Result<StudentOutput> {
    let run = train_student(&cfg.distill, data, teacher, confidences, &student_options(cfg, init))?;
    run.params
        .to_checkpoint(config_value(cfg), Some(run.optimizer))
        .save(&out_dir.join(STUDENT_CHECKPOINT))?;
    write_jsonl(&out_dir.join(STUDENT_LOG), &run.log)?;
    let plans_dir = out_dir.join(PLANS_DIR);
    create_dir(&plans_dir)?;
    for p in &run.plans {
        write_json(
            &plans_dir.join(format!("plan_epoch_{:03}.json", p.epoch)),
            &PlanFile {
                epoch: p.epoch,
                total_epochs: p.total_epochs,
                selected_qids: &p.selected_qids,
            },
        )?;
    }
    Ok(StudentOutput {
        params: run.params,
        log: run.log,
        plans: run.plans,
    })
}

/// Held-out retrieval metrics; falls back to the training queries when the
/// corpus has no held-out labels.
pub fn eval_stage(student: &DualEncoderParams, data: &Dataset, out_dir: &Path) -> Result<Metrics> {
    let mut qids = data.heldout_query_ids();
    if qids.is_empty() {
        log::warn!("no held-out queries; evaluating on training queries");
        qids = data.qrels.0.keys().copied().collect();
    }
    let metrics = eval::evaluate(student, data, &qids)?;
    metrics.save(&out_dir.join(METRICS_FILE))?;
    Ok(metrics)
}

pub fn histogram_stage(cfg: &RunConfig, teacher: &CrossEncoderParams, data: &Dataset, out_dir: &Path) -> Result<Histogram> {
    let scores = eval::teacher_group_scores(teacher, data, &cfg.distill.mask_ratios, cfg.seeds().masks)?;
    let h = Histogram::from_scores(&scores, &cfg.histogram_groups, cfg.histogram)?;
    let path = out_dir.join(HISTOGRAM_FILE);
    fs::write(&path, h.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(h)
}

/// Tags an error with the stage it came from, keeping its category.
pub fn in_stage(stage: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{stage}: {m}")),
        Error::Data(m) => Error::Data(format!("{stage}: {m}")),
        Error::Validation(m) => Error::Validation(format!("{stage}: {m}")),
        Error::Encode(m) => Error::Encode(format!("{stage}: {m}")),
        Error::Shape(m) => Error::Shape(format!("{stage}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{stage}: {m}")),
        Error::Usage(m) => Error::Usage(format!("{stage}: {m}")),
        Error::Training(m) => Error::Training(format!("{stage}: {m}")),
        other => other,
    }
}

/// Teacher training through evaluation, writing every artifact to `out_dir`.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path, init: Option<DualEncoderParams>) -> Result<Metrics> {
    let (_, data) = prepare_data(cfg, out_dir).map_err(|e| in_stage("data", e))?;
    let teacher = teacher_stage(cfg, &data, out_dir).map_err(|e| in_stage("train-teacher", e))?;
    let conf = confidence_stage(&teacher, &data, out_dir).map_err(|e| in_stage("score-confidence", e))?;
    let student =
        distill_stage(cfg, &data, &teacher, &conf, init, out_dir).map_err(|e| in_stage("distill", e))?;
    let metrics = eval_stage(&student.params, &data, out_dir).map_err(|e| in_stage("eval", e))?;
    write_json(&out_dir.join(MANIFEST_FILE), &serde_json::json!({ "config": cfg, "seeds": cfg.seeds() }))?;
    Ok(metrics)
}

/// In-memory run sharing one dataset, teacher and confidence ranking across
/// several student configurations.
pub struct Experiment {
    pub data: Dataset,
    pub teacher: CrossEncoderParams,
    pub confidences: Vec<ConfidenceRecord>,
    pub heldout: Vec<u64>,
}

impl Experiment {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let corpus = gen_synthetic(&cfg.resolved_synth())?;
        Self::from_corpus(cfg, &corpus)
    }

    pub fn from_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<Self> {
        let data = build_dataset(cfg, corpus, None)?;
        let teacher = train_teacher(&cfg.teacher, &data, cfg.seeds().teacher)?.params;
        let confidences = score_confidences(&teacher, &data)?;
        let heldout = data.heldout_query_ids();
        Ok(Self {
            data,
            teacher,
            confidences,
            heldout,
        })
    }

    pub fn student(&self, cfg: &RunConfig, mode: NegativesMode, toggles: Toggles) -> Result<DualEncoderParams> {
        let opts = StudentOptions {
            mode,
            toggles,
            ..student_options(cfg, None)
        };
        Ok(train_student(&cfg.distill, &self.data, &self.teacher, &self.confidences, &opts)?.params)
    }

    pub fn evaluate(&self, student: &DualEncoderParams) -> Result<Metrics> {
        eval::evaluate(student, &self.data, &self.heldout)
    }
}
