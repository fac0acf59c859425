use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, Vocab};
use crate::error::{contract, Error, Result};
use crate::index::{AnnIndex, Hits, InvertedIndex};
use crate::quantstore::EmbeddingStore;
use crate::scalar::{dot, Scalar};

/// Which retrieval channels produced a candidate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sources {
    pub text: bool,
    pub semantic: bool,
}

impl Sources {
    pub fn union(self, other: Sources) -> Sources {
        Sources {
            text: self.text || other.text,
            semantic: self.semantic || other.semantic,
        }
    }

    pub fn names(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.text {
            out.push("text");
        }
        if self.semantic {
            out.push("semantic");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc_id: u64,
    pub sources: Sources,
    pub semantic_score: Option<f64>,
    pub bm25_score: Option<f64>,
}

/// Union of text-match and semantic-match candidates, one entry per document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    entries: BTreeMap<u64, Candidate>,
    /// Set when both channels came back empty.
    pub empty: bool,
}

impl CandidatePool {
    pub fn from_hits(text: &Hits, semantic: &Hits) -> Self {
        let mut pool = Self::default();
        for h in &text.hits {
            pool.insert(Candidate {
                doc_id: h.doc_id,
                sources: Sources { text: true, semantic: false },
                semantic_score: None,
                bm25_score: Some(h.score),
            });
        }
        for h in &semantic.hits {
            pool.insert(Candidate {
                doc_id: h.doc_id,
                sources: Sources { text: false, semantic: true },
                semantic_score: Some(h.score),
                bm25_score: None,
            });
        }
        pool.empty = pool.entries.is_empty();
        pool
    }

    /// Adds `c`, combining flags and filling absent scores of an existing entry.
    pub fn insert(&mut self, c: Candidate) {
        match self.entries.get_mut(&c.doc_id) {
            Some(e) => {
                e.sources = e.sources.union(c.sources);
                e.semantic_score = e.semantic_score.or(c.semantic_score);
                e.bm25_score = e.bm25_score.or(c.bm25_score);
            }
            None => {
                self.entries.insert(c.doc_id, c);
                self.empty = false;
            }
        }
    }

    pub fn merge(&mut self, other: &CandidatePool) {
        for c in other.iter() {
            self.insert(c.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, doc_id: u64) -> Option<&Candidate> {
        self.entries.get(&doc_id)
    }

    /// Candidates in doc-id order.
    pub fn iter(&self) -> impl Iterator<Item = &Candidate> {
        self.entries.values()
    }

    pub fn remove(&mut self, doc_id: u64) -> Option<Candidate> {
        self.entries.remove(&doc_id)
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut Candidate> {
        self.entries.values_mut()
    }
}

/// Text and semantic channels over the same corpus. Either `k` may be 0 to
/// switch that channel off.
pub fn retrieve<T: Scalar>(
    query_emb: &[T],
    query_text: &str,
    ann: &AnnIndex<T>,
    inverted: &InvertedIndex,
    k_sem: usize,
    k_text: usize,
) -> Result<CandidatePool> {
    let text = if k_text > 0 { inverted.search(query_text, k_text)? } else { Hits::default() };
    let semantic = if k_sem > 0 { ann.search(query_emb, k_sem)? } else { Hits::default() };
    Ok(CandidatePool::from_hits(&text, &semantic))
}

/// Embeds the query with `model` and runs [`retrieve`]; returns the query
/// embedding alongside the pool so later stages can reuse it.
pub fn retrieve_text<T: Scalar>(
    query_text: &str,
    model: &EncoderModel<T>,
    vocab: &Vocab,
    ann: &AnnIndex<T>,
    inverted: &InvertedIndex,
    k_sem: usize,
    k_text: usize,
) -> Result<(CandidatePool, Vec<T>)> {
    let seq = vocab.encode(query_text, model.config().max_len);
    let emb = model.embed_query(&seq)?;
    let pool = retrieve(&emb, query_text, ann, inverted, k_sem, k_text)?;
    Ok((pool, emb))
}

/// Documents that can be embedded on demand when they are absent from the store.
pub struct OnDemand<'a, T> {
    pub model: &'a EncoderModel<T>,
    pub vocab: &'a Vocab,
    pub titles: &'a HashMap<u64, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackfillReport {
    pub reused: usize,
    pub from_store: usize,
    pub encoded: usize,
    /// Candidates removed because no embedding could be obtained.
    pub dropped: Vec<u64>,
}

/// Fills in the semantic score of every text-only candidate from its stored
/// (quantized) embedding. Scores already present are kept as they are.
pub fn backfill_semantic<T: Scalar>(
    pool: &mut CandidatePool,
    query_emb: &[T],
    store: &EmbeddingStore<T>,
    on_demand: Option<&OnDemand<'_, T>>,
) -> Result<BackfillReport> {
    if query_emb.len() != store.params().dim() {
        return Err(Error::Shape(format!(
            "query width {} vs store {}",
            query_emb.len(),
            store.params().dim()
        )));
    }
    let mut report = BackfillReport::default();
    for c in pool.iter_mut() {
        if c.semantic_score.is_some() {
            report.reused += 1;
            continue;
        }
        let emb = match store.get_dequantized(c.doc_id) {
            Ok(e) => {
                report.from_store += 1;
                e
            }
            Err(Error::NotFound(_)) => match on_demand.and_then(|o| o.titles.get(&c.doc_id).map(|t| (o, t))) {
                Some((o, title)) => {
                    report.encoded += 1;
                    o.model.embed_document(&o.vocab.encode(title, o.model.config().max_len))?
                }
                None => {
                    report.dropped.push(c.doc_id);
                    continue;
                }
            },
            Err(e) => return Err(e),
        };
        if emb.len() != query_emb.len() {
            return contract(format!("doc {} embedding has width {}", c.doc_id, emb.len()));
        }
        c.semantic_score = Some(dot(query_emb, &emb).to_f64_lossy());
    }
    for id in &report.dropped {
        pool.remove(*id);
    }
    Ok(report)
}
