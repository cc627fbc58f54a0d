//! Whitespace vocabulary and tokenization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, Query};
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Ordered token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    /// Keeps the first `max_len` ids.
    pub fn truncate(&self, max_len: usize) -> TokenSeq {
        TokenSeq(self.0[..self.0.len().min(max_len)].to_vec())
    }

    /// Ids other than padding.
    pub fn content(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.0.iter().copied().filter(|&t| t != PAD)
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

/// Free-function form of [`TokenSeq::truncate`].
pub fn truncate(seq: &TokenSeq, max_len: usize) -> TokenSeq {
    seq.truncate(max_len)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    to_id: HashMap<String, TokenId>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::specials_only()
    }
}

impl Vocab {
    fn specials_only() -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { to_id, tokens }
    }

    /// Builds a vocabulary from corpus token frequencies. The most frequent
    /// tokens (ties broken lexicographically) take ids `5..max_size`.
    pub fn build(passages: &[Passage], queries: &[Query], max_size: usize) -> Result<Self> {
        if max_size <= NUM_SPECIAL {
            return Err(Error::Config(format!(
                "vocabulary size must exceed {NUM_SPECIAL}, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let texts = passages
            .iter()
            .map(|p| p.text.as_str())
            .chain(queries.iter().map(|q| q.text.as_str()));
        for text in texts {
            for tok in normalize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut vocab = Self::specials_only();
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !vocab.to_id.contains_key(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (tok, _) in ranked.into_iter().take(max_size - NUM_SPECIAL) {
            vocab.push(tok);
        }
        Ok(vocab)
    }

    fn push(&mut self, tok: String) {
        let id = self.tokens.len() as TokenId;
        self.to_id.insert(tok.clone(), id);
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Lowercases, splits on Unicode whitespace and maps unknown tokens to
    /// `UNK`. No `CLS`/`SEP` is added.
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        TokenSeq(
            normalize(text)
                .map(|t| self.to_id.get(&t).copied().unwrap_or(UNK))
                .collect(),
        )
    }

    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        seq.iter()
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` lines sorted by id, specials included.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{tok}\t{id}");
        }
        s
    }

    pub fn from_tsv(content: &str, path: &Path) -> Result<Self> {
        let mut vocab = Self::specials_only();
        for (i, line) in content.lines().enumerate() {
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `token<TAB>id`".into()))?;
            let id: usize = id
                .parse()
                .map_err(|_| parse_err(format!("bad id {id:?}")))?;
            if id != i {
                return Err(parse_err(format!("ids must be dense and sorted, found {id} at row {i}")));
            }
            if id < NUM_SPECIAL {
                if tok != SPECIAL_TOKENS[id] {
                    return Err(parse_err(format!("special id {id} must be {}", SPECIAL_TOKENS[id])));
                }
            } else {
                if vocab.to_id.contains_key(tok) {
                    return Err(Error::Validation(format!("duplicate token {tok:?} in vocabulary")));
                }
                vocab.push(tok.to_string());
            }
        }
        Ok(vocab)
    }
}

fn normalize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}
