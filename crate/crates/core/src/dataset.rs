//! Tokenized, length-capped view of a [`Corpus`] used by training and
//! evaluation.

use std::collections::HashMap;

use crate::corpus::{Corpus, Qrels, TrainInstance};
use crate::error::{Error, Result};
use crate::text::{TokenSeq, Vocab};

pub const DEFAULT_QUERY_MAX_LEN: usize = 32;
pub const DEFAULT_PASSAGE_MAX_LEN: usize = 128;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub qrels: Qrels,
    pub instances: Vec<TrainInstance>,
    pub query_max_len: usize,
    pub passage_max_len: usize,
    passages: HashMap<u64, TokenSeq>,
    passage_order: Vec<u64>,
    queries: HashMap<u64, TokenSeq>,
    query_order: Vec<u64>,
}

/// The token sequences of one training instance.
#[derive(Debug, Clone)]
pub struct Resolved<'a> {
    pub query: &'a TokenSeq,
    pub positive: &'a TokenSeq,
    pub negatives: Vec<&'a TokenSeq>,
}

impl Dataset {
    pub fn new(
        corpus: &Corpus,
        vocab: Vocab,
        query_max_len: usize,
        passage_max_len: usize,
    ) -> Result<Self> {
        if query_max_len == 0 || passage_max_len == 0 {
            return Err(Error::Config("maximum lengths must be at least 1".into()));
        }
        let passages = corpus
            .passages
            .iter()
            .map(|p| (p.id, vocab.tokenize(&p.text).truncate(passage_max_len)))
            .collect();
        let queries = corpus
            .queries
            .iter()
            .map(|q| (q.id, vocab.tokenize(&q.text).truncate(query_max_len)))
            .collect();
        Ok(Self {
            qrels: corpus.qrels.clone(),
            instances: corpus.instances.clone(),
            passage_order: corpus.passages.iter().map(|p| p.id).collect(),
            query_order: corpus.queries.iter().map(|q| q.id).collect(),
            vocab,
            query_max_len,
            passage_max_len,
            passages,
            queries,
        })
    }

    pub fn passage(&self, pid: u64) -> Result<&TokenSeq> {
        self.passages
            .get(&pid)
            .ok_or_else(|| Error::Data(format!("unknown passage id {pid}")))
    }

    pub fn query(&self, qid: u64) -> Result<&TokenSeq> {
        self.queries
            .get(&qid)
            .ok_or_else(|| Error::Data(format!("unknown query id {qid}")))
    }

    /// Passage ids in collection order.
    pub fn passage_ids(&self) -> &[u64] {
        &self.passage_order
    }

    pub fn query_ids(&self) -> &[u64] {
        &self.query_order
    }

    pub fn resolve(&self, inst: &TrainInstance) -> Result<Resolved<'_>> {
        Ok(Resolved {
            query: self.query(inst.query_id)?,
            positive: self.passage(inst.positive_pid)?,
            negatives: inst
                .negative_pids
                .iter()
                .map(|&pid| self.passage(pid))
                .collect::<Result<_>>()?,
        })
    }

    /// Query ids with relevance labels but no training instance.
    pub fn heldout_query_ids(&self) -> Vec<u64> {
        let train: std::collections::HashSet<u64> =
            self.instances.iter().map(|i| i.query_id).collect();
        self.qrels
            .0
            .keys()
            .copied()
            .filter(|q| !train.contains(q))
            .collect()
    }
}
