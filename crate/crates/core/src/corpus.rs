//! Retrieval data model, TSV ingestion and the synthetic topic corpus.
//!
//! File formats (UTF-8, LF line endings):
//!
//! | file            | line format                       |
//! | --------------- | --------------------------------- |
//! | `collection.tsv`| `pid<TAB>text`                    |
//! | `queries.tsv`   | `qid<TAB>text`                    |
//! | `qrels.txt`     | `qid 0 pid rel`                   |
//! | `instances.tsv` | `qid<TAB>pos<TAB>neg1,neg2,...`   |
//!
//! Blank lines are skipped.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::text::NUM_SPECIAL;

pub const COLLECTION_FILE: &str = "collection.tsv";
pub const QUERIES_FILE: &str = "queries.tsv";
pub const QRELS_FILE: &str = "qrels.txt";
pub const INSTANCES_FILE: &str = "instances.tsv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub text: String,
}

/// Query id to the set of relevant passage ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels(pub BTreeMap<u64, BTreeSet<u64>>);

impl Qrels {
    pub fn relevant(&self, qid: u64) -> Option<&BTreeSet<u64>> {
        self.0.get(&qid)
    }

    pub fn insert(&mut self, qid: u64, pid: u64) {
        self.0.entry(qid).or_default().insert(pid);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks that every referenced id exists in the loaded data.
    pub fn validate(&self, passages: &[Passage], queries: &[Query]) -> Result<()> {
        let pids: HashSet<u64> = passages.iter().map(|p| p.id).collect();
        let qids: HashSet<u64> = queries.iter().map(|q| q.id).collect();
        for (qid, rel) in &self.0 {
            if !qids.contains(qid) {
                return Err(Error::Validation(format!("qrels reference unknown query {qid}")));
            }
            if let Some(pid) = rel.iter().find(|p| !pids.contains(p)) {
                return Err(Error::Validation(format!(
                    "qrels for query {qid} reference unknown passage {pid}"
                )));
            }
        }
        Ok(())
    }
}

/// One query with its labelled positive and `m` negatives, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainInstance {
    pub query_id: u64,
    pub positive_pid: u64,
    pub negative_pids: Vec<u64>,
}

impl TrainInstance {
    pub fn new(query_id: u64, positive_pid: u64, negative_pids: Vec<u64>) -> Result<Self> {
        let inst = Self {
            query_id,
            positive_pid,
            negative_pids,
        };
        inst.check()?;
        Ok(inst)
    }

    fn check(&self) -> Result<()> {
        if self.negative_pids.is_empty() {
            return Err(Error::Validation(format!(
                "instance for query {} has no negatives",
                self.query_id
            )));
        }
        if self.negative_pids.contains(&self.positive_pid) {
            return Err(Error::Validation(format!(
                "instance for query {}: positive {} also listed as negative",
                self.query_id, self.positive_pid
            )));
        }
        let mut seen = HashSet::with_capacity(self.negative_pids.len());
        if let Some(dup) = self.negative_pids.iter().find(|p| !seen.insert(**p)) {
            return Err(Error::Validation(format!(
                "instance for query {}: duplicate negative {dup}",
                self.query_id
            )));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.negative_pids.len()
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_id(raw: &str, path: &Path, line: usize, what: &str) -> Result<u64> {
    raw.parse::<u64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("{what} {raw:?} is not a non-negative integer"),
    })
}

/// Lines with their 1-based numbers, skipping blank ones.
fn lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_id_text(content: &str, path: &Path, what: &str) -> Result<Vec<(u64, String)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line, raw) in lines(content) {
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let id = parse_id(fields[0], path, line, what)?;
        if fields[1].trim().is_empty() {
            return Err(Error::Validation(format!(
                "{}:{line}: {what} {id} has empty text",
                path.display()
            )));
        }
        if !seen.insert(id) {
            return Err(Error::Validation(format!(
                "{}:{line}: duplicate {what} {id}",
                path.display()
            )));
        }
        out.push((id, fields[1].to_string()));
    }
    Ok(out)
}

pub fn parse_collection(content: &str, path: &Path) -> Result<Vec<Passage>> {
    Ok(parse_id_text(content, path, "pid")?
        .into_iter()
        .map(|(id, text)| Passage { id, text })
        .collect())
}

pub fn parse_queries(content: &str, path: &Path) -> Result<Vec<Query>> {
    Ok(parse_id_text(content, path, "qid")?
        .into_iter()
        .map(|(id, text)| Query { id, text })
        .collect())
}

pub fn parse_qrels(content: &str, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::default();
    for (line, raw) in lines(content) {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected `qid 0 pid rel`, found {} fields", fields.len()),
            });
        }
        let qid = parse_id(fields[0], path, line, "qid")?;
        let pid = parse_id(fields[2], path, line, "pid")?;
        let rel: i64 = fields[3].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("relevance {:?} is not an integer", fields[3]),
        })?;
        if fields[1].parse::<i64>().is_err() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("iteration field {:?} is not an integer", fields[1]),
            });
        }
        if rel > 0 {
            qrels.insert(qid, pid);
        }
    }
    Ok(qrels)
}

pub fn parse_instances(content: &str, path: &Path) -> Result<Vec<TrainInstance>> {
    let mut out = Vec::new();
    for (line, raw) in lines(content) {
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let qid = parse_id(fields[0], path, line, "qid")?;
        let pos = parse_id(fields[1], path, line, "pid")?;
        let negs = if fields[2].trim().is_empty() {
            Vec::new()
        } else {
            fields[2]
                .split(',')
                .map(|n| parse_id(n.trim(), path, line, "pid"))
                .collect::<Result<Vec<_>>>()?
        };
        let inst = TrainInstance::new(qid, pos, negs).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{}:{line}: {msg}", path.display())),
            other => other,
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn load_collection(path: impl AsRef<Path>) -> Result<Vec<Passage>> {
    let path = path.as_ref();
    parse_collection(&read(path)?, path)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    parse_queries(&read(path)?, path)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    parse_qrels(&read(path)?, path)
}

pub fn load_instances(path: impl AsRef<Path>) -> Result<Vec<TrainInstance>> {
    let path = path.as_ref();
    parse_instances(&read(path)?, path)
}

pub fn format_collection(passages: &[Passage]) -> String {
    let mut s = String::new();
    for p in passages {
        let _ = writeln!(s, "{}\t{}", p.id, p.text);
    }
    s
}

pub fn format_queries(queries: &[Query]) -> String {
    let mut s = String::new();
    for q in queries {
        let _ = writeln!(s, "{}\t{}", q.id, q.text);
    }
    s
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut s = String::new();
    for (qid, rel) in &qrels.0 {
        for pid in rel {
            let _ = writeln!(s, "{qid} 0 {pid} 1");
        }
    }
    s
}

pub fn format_instances(instances: &[TrainInstance]) -> String {
    let mut s = String::new();
    for inst in instances {
        let negs: Vec<String> = inst.negative_pids.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}",
            inst.query_id,
            inst.positive_pid,
            negs.join(",")
        );
    }
    s
}

/// A full retrieval corpus as held in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub passages: Vec<Passage>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub instances: Vec<TrainInstance>,
}

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let corpus = Self {
            passages: load_collection(dir.join(COLLECTION_FILE))?,
            queries: load_queries(dir.join(QUERIES_FILE))?,
            qrels: load_qrels(dir.join(QRELS_FILE))?,
            instances: load_instances(dir.join(INSTANCES_FILE))?,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Cross-file referential checks.
    pub fn validate(&self) -> Result<()> {
        self.qrels.validate(&self.passages, &self.queries)?;
        let pids: HashSet<u64> = self.passages.iter().map(|p| p.id).collect();
        let qids: HashSet<u64> = self.queries.iter().map(|q| q.id).collect();
        for inst in &self.instances {
            if !qids.contains(&inst.query_id) {
                return Err(Error::Validation(format!(
                    "instance references unknown query {}",
                    inst.query_id
                )));
            }
            let all = std::iter::once(&inst.positive_pid).chain(&inst.negative_pids);
            if let Some(pid) = all.into_iter().find(|p| !pids.contains(p)) {
                return Err(Error::Validation(format!(
                    "instance for query {} references unknown passage {pid}",
                    inst.query_id
                )));
            }
        }
        Ok(())
    }

    /// Writes the four data files into `dir`, returning their paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            (COLLECTION_FILE, format_collection(&self.passages)),
            (QUERIES_FILE, format_queries(&self.queries)),
            (QRELS_FILE, format_qrels(&self.qrels)),
            (INSTANCES_FILE, format_instances(&self.instances)),
        ];
        let mut paths = Vec::with_capacity(files.len());
        for (name, content) in files {
            let path = dir.join(name);
            fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Queries with relevance labels that have no training instance. These
    /// form the held-out evaluation set.
    pub fn heldout_query_ids(&self) -> Vec<u64> {
        let train: HashSet<u64> = self.instances.iter().map(|i| i.query_id).collect();
        self.qrels
            .0
            .keys()
            .copied()
            .filter(|q| !train.contains(q))
            .collect()
    }
}

/// Parameters of the synthetic topic corpus.
///
/// Every topic owns `topic_token_count` vocabulary ids. A query draws its
/// tokens from its topic; its positive draws each token from the topic with
/// probability `positive_topic_fraction` (otherwise uniformly from the
/// vocabulary); each hard negative draws each token from the query topic with
/// probability `hard_overlap_fraction` and otherwise from one other topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub n_topics: usize,
    pub topic_token_count: usize,
    pub query_len: usize,
    pub passage_len: usize,
    pub positive_topic_fraction: f64,
    pub hard_overlap_fraction: f64,
    pub n_queries: usize,
    /// Extra queries whose positives and negatives enter the collection and
    /// qrels but which get no training instance.
    pub n_dev_queries: usize,
    pub negatives_per_query: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4005,
            n_topics: 250,
            topic_token_count: 12,
            query_len: 8,
            passage_len: 32,
            positive_topic_fraction: 0.8,
            hard_overlap_fraction: 0.4,
            n_queries: 2000,
            n_dev_queries: 500,
            negatives_per_query: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size <= NUM_SPECIAL {
            return fail(format!("vocab_size must exceed {NUM_SPECIAL}"));
        }
        if self.n_topics < 2 {
            return fail("n_topics must be at least 2".into());
        }
        for (name, v) in [
            ("topic_token_count", self.topic_token_count),
            ("query_len", self.query_len),
            ("passage_len", self.passage_len),
            ("n_queries", self.n_queries),
            ("negatives_per_query", self.negatives_per_query),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        let (f_hard, f_pos) = (self.hard_overlap_fraction, self.positive_topic_fraction);
        if !(0.0..=1.0).contains(&f_pos) || !(0.0..=1.0).contains(&f_hard) || f_hard >= f_pos {
            return fail(format!(
                "need 0 <= hard_overlap_fraction < positive_topic_fraction <= 1, got {f_hard} and {f_pos}"
            ));
        }
        if self.n_topics * self.topic_token_count > self.vocab_size - NUM_SPECIAL {
            return fail(format!(
                "{} topics x {} tokens exceed the {} non-special vocabulary ids",
                self.n_topics,
                self.topic_token_count,
                self.vocab_size - NUM_SPECIAL
            ));
        }
        Ok(())
    }
}

/// Surface form of synthetic vocabulary id `id`.
pub fn synth_word(id: u32) -> String {
    format!("w{id}")
}

/// Generates a synthetic corpus. Pure function of `cfg`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed);
    let lo = NUM_SPECIAL as u32;
    let hi = cfg.vocab_size as u32;

    let mut pool: Vec<u32> = (lo..hi).collect();
    let n_topic_tokens = cfg.n_topics * cfg.topic_token_count;
    let (chosen, _) = pool.partial_shuffle(&mut rng, n_topic_tokens);
    let topics: Vec<Vec<u32>> = chosen
        .chunks(cfg.topic_token_count)
        .map(<[u32]>::to_vec)
        .collect();

    let text = |ids: &[u32]| ids.iter().map(|&t| synth_word(t)).collect::<Vec<_>>().join(" ");

    let n_total = cfg.n_queries + cfg.n_dev_queries;
    let mut corpus = Corpus {
        passages: Vec::with_capacity(n_total * (1 + cfg.negatives_per_query)),
        queries: Vec::with_capacity(n_total),
        qrels: Qrels::default(),
        instances: Vec::with_capacity(cfg.n_queries),
    };
    let mut next_pid = 0u64;
    for qid in 0..n_total as u64 {
        let topic = rng.gen_range(0..cfg.n_topics);
        let own = &topics[topic];
        let q: Vec<u32> = (0..cfg.query_len)
            .map(|_| own[rng.gen_range(0..own.len())])
            .collect();
        corpus.queries.push(Query { id: qid, text: text(&q) });

        let pos: Vec<u32> = (0..cfg.passage_len)
            .map(|_| {
                if rng.gen_bool(cfg.positive_topic_fraction) {
                    own[rng.gen_range(0..own.len())]
                } else {
                    rng.gen_range(lo..hi)
                }
            })
            .collect();
        let pos_pid = next_pid;
        next_pid += 1;
        corpus.passages.push(Passage { id: pos_pid, text: text(&pos) });
        corpus.qrels.insert(qid, pos_pid);

        let mut negs = Vec::with_capacity(cfg.negatives_per_query);
        for _ in 0..cfg.negatives_per_query {
            let mut other = rng.gen_range(0..cfg.n_topics - 1);
            if other >= topic {
                other += 1;
            }
            let other = &topics[other];
            let neg: Vec<u32> = (0..cfg.passage_len)
                .map(|_| {
                    if rng.gen_bool(cfg.hard_overlap_fraction) {
                        own[rng.gen_range(0..own.len())]
                    } else {
                        other[rng.gen_range(0..other.len())]
                    }
                })
                .collect();
            corpus.passages.push(Passage { id: next_pid, text: text(&neg) });
            negs.push(next_pid);
            next_pid += 1;
        }
        if (qid as usize) < cfg.n_queries {
            corpus.instances.push(TrainInstance::new(qid, pos_pid, negs)?);
        }
    }
    Ok(corpus)
}
