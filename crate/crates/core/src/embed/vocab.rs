use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::Fnv;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token to index mapping. Index 0 is padding, 1 is unknown; the rest are
/// ordered by descending count, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a, I, S>(documents: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a str>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be positive".into()));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        let mut docs = 0usize;
        for doc in documents {
            docs += 1;
            for tok in doc {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut entries = vec![(PAD_TOKEN.to_string(), 0), (UNK_TOKEN.to_string(), 0)];
        entries.extend(kept.into_iter().map(|(t, c)| (t.to_string(), c)));
        Self::from_entries(entries)
    }

    /// Rebuilds a vocabulary from `(token, count)` pairs in index order.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        if entries.len() < 2 || entries[PAD].0 != PAD_TOKEN || entries[UNK].0 != UNK_TOKEN {
            return Err(Error::Data(format!("vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}")));
        }
        let mut index = BTreeMap::new();
        let mut tokens = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        for (i, (tok, count)) in entries.into_iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {tok:?} at index {i}")));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {tok:?}")));
            }
            tokens.push(tok);
            counts.push(count);
        }
        Ok(Vocabulary { tokens, counts, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
        tokens.into_iter().map(|t| self.lookup(t)).collect()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts.get(index).copied().unwrap_or(0)
    }

    /// `(token, index, count)` in index order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, u64)> {
        self.tokens.iter().zip(&self.counts).enumerate().map(|(i, (t, &c))| (t.as_str(), i, c))
    }

    /// Stable identifier used to tie embedding files to their vocabulary.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        for t in &self.tokens {
            h.write(t.as_bytes());
            h.write(&[0]);
        }
        h.finish()
    }
}
