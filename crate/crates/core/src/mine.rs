//! BM25 first-stage retrieval and hard-negative mining.
//!
//! Scoring follows the Lucene variant:
//!
//! ```text
//! idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//! score(q, d) = sum_t idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))
//! ```
//!
//! Persisted index layout, little-endian:
//!
//! ```text
//! "DQGIDX01" | k1: f64 | b: f64 | doc_count: u64 | doc_len: doc_count x u32
//! | term_count: u64 | per term, sorted by bytes:
//!     len: u32 | utf-8 bytes | postings: u32 | (ordinal: u32, tf: u32) x postings
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Collection;
use crate::error::{Error, Result};
use crate::querygen::QueryRecord;
use crate::text::tokenize;

pub const INDEX_MAGIC: &[u8; 8] = b"DQGIDX01";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    postings: HashMap<String, Vec<Posting>>,
    doc_len: Vec<u32>,
    avgdl: f64,
    params: Bm25Params,
}

/// Indexes every rendered (title + text) document with default parameters.
pub fn build_index(c: &Collection) -> Bm25Index {
    build_index_with(c, Bm25Params::default())
}

pub fn build_index_with(c: &Collection, params: Bm25Params) -> Bm25Index {
    let tokens: Vec<Vec<String>> = c.docs().par_iter().map(|d| tokenize(&d.render())).collect();
    Bm25Index::from_token_lists(&tokens, params)
}

impl Bm25Index {
    pub fn from_token_lists(docs: &[Vec<String>], params: Bm25Params) -> Self {
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for (ordinal, tokens) in docs.iter().enumerate() {
            doc_len.push(tokens.len() as u32);
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term.to_owned()).or_default().push(Posting {
                    doc: ordinal as u32,
                    tf: count,
                });
            }
        }
        // Documents are visited in ordinal order, so each list is already sorted.
        Self::assemble(postings, doc_len, params)
    }

    fn assemble(postings: HashMap<String, Vec<Posting>>, doc_len: Vec<u32>, params: Bm25Params) -> Self {
        let avgdl = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64
        };
        Self {
            postings,
            doc_len,
            avgdl,
            params,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_len.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_len(&self, ordinal: usize) -> usize {
        self.doc_len[ordinal] as usize
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn term_frequency(&self, term: &str, ordinal: usize) -> u32 {
        let list = self.postings(term);
        list.binary_search_by_key(&(ordinal as u32), |p| p.doc)
            .map_or(0, |i| list[i].tf)
    }

    fn weight(&self, idf: f64, tf: u32, ordinal: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * self.doc_len[ordinal] as f64 / self.avgdl;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// Ordinals and scores of every document with a positive score, best first,
    /// ties by ascending ordinal, at most `x` of them.
    pub fn search_topk(&self, query: &str, x: usize) -> Vec<(usize, f64)> {
        self.search_terms(&tokenize(query), x)
    }

    pub fn search_terms<S: AsRef<str>>(&self, terms: &[S], x: usize) -> Vec<(usize, f64)> {
        let mut scores = vec![0.0f64; self.doc_count()];
        let mut touched = Vec::new();
        for term in terms {
            let term = term.as_ref();
            let list = self.postings(term);
            if list.is_empty() {
                continue;
            }
            let idf = self.idf(term);
            for p in list {
                let d = p.doc as usize;
                if scores[d] == 0.0 {
                    touched.push(d);
                }
                scores[d] += self.weight(idf, p.tf, d);
            }
        }
        let mut hits: Vec<(usize, f64)> = touched
            .into_iter()
            .map(|d| (d, scores[d]))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(x);
        hits
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&self.params.k1.to_le_bytes());
        out.extend_from_slice(&self.params.b.to_le_bytes());
        out.extend_from_slice(&(self.doc_len.len() as u64).to_le_bytes());
        for &l in &self.doc_len {
            out.extend_from_slice(&l.to_le_bytes());
        }
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        out.extend_from_slice(&(terms.len() as u64).to_le_bytes());
        for term in terms {
            let list = &self.postings[term];
            out.extend_from_slice(&(term.len() as u32).to_le_bytes());
            out.extend_from_slice(term.as_bytes());
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for p in list {
                out.extend_from_slice(&p.doc.to_le_bytes());
                out.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != INDEX_MAGIC {
            return Err(Error::Format("missing DQGIDX01 header".into()));
        }
        let k1 = f64::from_le_bytes(r.array()?);
        let b = f64::from_le_bytes(r.array()?);
        let doc_count = u64::from_le_bytes(r.array()?) as usize;
        let mut doc_len = Vec::with_capacity(doc_count.min(bytes.len() / 4));
        for _ in 0..doc_count {
            doc_len.push(u32::from_le_bytes(r.array()?));
        }
        let term_count = u64::from_le_bytes(r.array()?) as usize;
        let mut postings = HashMap::with_capacity(term_count.min(bytes.len()));
        for _ in 0..term_count {
            let len = u32::from_le_bytes(r.array()?) as usize;
            let term = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("index term is not UTF-8".into()))?
                .to_owned();
            let count = u32::from_le_bytes(r.array()?) as usize;
            let mut list = Vec::with_capacity(count.min(bytes.len() / 8));
            for _ in 0..count {
                let doc = u32::from_le_bytes(r.array()?);
                let tf = u32::from_le_bytes(r.array()?);
                if doc as usize >= doc_count || tf == 0 {
                    return Err(Error::Validation(format!("bad posting for term {term:?}")));
                }
                list.push(Posting { doc, tf });
            }
            if list.windows(2).any(|w| w[0].doc >= w[1].doc) {
                return Err(Error::Validation(format!("postings for {term:?} are not sorted")));
            }
            postings.insert(term, list);
        }
        if r.pos != bytes.len() {
            return Err(Error::SizeMismatch(format!(
                "{} trailing bytes after index",
                bytes.len() - r.pos
            )));
        }
        Ok(Self::assemble(postings, doc_len, Bm25Params { k1, b }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::SizeMismatch("index file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}

/// BM25 score of one document for an already-tokenized query. Repeated
/// terms count once per occurrence.
pub fn bm25_score<S: AsRef<str>>(idx: &Bm25Index, query_terms: &[S], ordinal: usize) -> f64 {
    query_terms
        .iter()
        .map(|t| {
            let t = t.as_ref();
            let tf = idx.term_frequency(t, ordinal);
            if tf == 0 {
                0.0
            } else {
                idx.weight(idx.idf(t), tf, ordinal)
            }
        })
        .sum()
}

pub fn search_topk(idx: &Bm25Index, query: &str, x: usize) -> Vec<(usize, f64)> {
    idx.search_topk(query, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningConfig {
    /// First-stage hits to consider.
    pub x: usize,
    pub num_neg: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { x: 100, num_neg: 4 }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_neg == 0 || self.num_neg >= self.x {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= num_neg < x, got num_neg = {} and x = {}",
                self.num_neg, self.x
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedNegatives {
    /// In retrieval order.
    pub ordinals: Vec<usize>,
    /// Fewer than `num_neg` candidates were available.
    pub shortfall: bool,
}

/// The last `num_neg` of the top-`x` hits, skipping the positive. Each
/// skipped positive pulls the window up by one rank.
pub fn mine_negatives(ranked: &[(usize, f64)], positive: usize, cfg: &MiningConfig) -> MinedNegatives {
    let candidates: Vec<usize> = ranked
        .iter()
        .take(cfg.x)
        .map(|&(d, _)| d)
        .filter(|&d| d != positive)
        .collect();
    let start = candidates.len().saturating_sub(cfg.num_neg);
    MinedNegatives {
        shortfall: candidates.len() < cfg.num_neg,
        ordinals: candidates[start..].to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query: String,
    pub positive_doc_id: String,
    pub negative_doc_ids: Vec<String>,
    #[serde(default)]
    pub shortfall: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairAssembly {
    pub pairs: Vec<TrainingPair>,
    /// Doc ids of queries whose seed document is not in the collection.
    pub skipped: Vec<String>,
}

/// Pairs each query with its seed document and mined negatives, in query order.
pub fn assemble_pairs(
    queries: &[QueryRecord],
    collection: &Collection,
    idx: &Bm25Index,
    cfg: &MiningConfig,
) -> Result<PairAssembly> {
    cfg.validate()?;
    let mined: Vec<Option<TrainingPair>> = queries
        .par_iter()
        .map(|q| {
            let positive = collection.ordinal(&q.doc_id)?;
            let ranked = idx.search_topk(&q.query, cfg.x);
            let neg = mine_negatives(&ranked, positive, cfg);
            Some(TrainingPair {
                query: q.query.clone(),
                positive_doc_id: q.doc_id.clone(),
                negative_doc_ids: neg
                    .ordinals
                    .iter()
                    .map(|&o| collection.docs()[o].id.clone())
                    .collect(),
                shortfall: neg.shortfall,
            })
        })
        .collect();
    let mut out = PairAssembly::default();
    for (q, pair) in queries.iter().zip(mined) {
        match pair {
            Some(p) => out.pairs.push(p),
            None => {
                log::warn!("skipping query for unknown document {:?}", q.doc_id);
                out.skipped.push(q.doc_id.clone());
            }
        }
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    crate::querygen::write_jsonl(path, pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    crate::querygen::read_jsonl(path)
}
