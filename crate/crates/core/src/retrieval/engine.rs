use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::pool::{backfill_semantic, retrieve_text, BackfillReport, CandidatePool, OnDemand};
use super::ranker::{filter_rank, ClickStats, LinearRanker, Ranked};
use crate::encoder::{EncoderModel, Vocab};
use crate::error::{Error, Result};
use crate::index::{AnnIndex, InvertedIndex};
use crate::quantstore::EmbeddingStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub doc_id: u64,
    pub title: String,
    pub score: f64,
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchResult>,
}

/// Everything one query needs, from retrieval through filtering.
#[derive(Clone, Debug)]
pub struct Trace {
    pub pool: CandidatePool,
    pub backfill: BackfillReport,
    pub ranked: Vec<Ranked>,
    pub imputed: Vec<u64>,
}

/// Immutable serving artifacts; `search` takes `&self`, so one engine can be
/// shared across threads.
pub struct SearchEngine<T> {
    pub model: EncoderModel<T>,
    pub vocab: Vocab,
    pub ann: AnnIndex<T>,
    pub inverted: InvertedIndex,
    pub store: EmbeddingStore<T>,
    pub titles: HashMap<u64, String>,
    pub stats: ClickStats,
    pub ranker: LinearRanker,
    pub k_sem: usize,
    pub k_text: usize,
}

impl<T: Scalar> SearchEngine<T> {
    pub fn trace(&self, query: &str, n_out: usize) -> Result<Trace> {
        let (mut pool, emb) = retrieve_text(query, &self.model, &self.vocab, &self.ann, &self.inverted, self.k_sem, self.k_text)?;
        let on_demand = OnDemand {
            model: &self.model,
            vocab: &self.vocab,
            titles: &self.titles,
        };
        let backfill = backfill_semantic(&mut pool, &emb, &self.store, Some(&on_demand))?;
        let out = filter_rank(&pool, &self.stats, &self.ranker, n_out)?;
        Ok(Trace {
            pool,
            backfill,
            ranked: out.results,
            imputed: out.imputed,
        })
    }

    pub fn search(&self, req: &SearchRequest) -> Result<SearchResponse> {
        if req.k == 0 {
            return Err(Error::Input("k must be at least 1".into()));
        }
        let trace = self.trace(&req.query, req.k)?;
        let results = trace
            .ranked
            .into_iter()
            .map(|r| SearchResult {
                doc_id: r.doc_id,
                title: self.titles.get(&r.doc_id).cloned().unwrap_or_default(),
                score: r.score,
                sources: r.sources.names().into_iter().map(String::from).collect(),
            })
            .collect();
        Ok(SearchResponse { results })
    }

    /// One line of the serve protocol: a JSON request in, a JSON response (or
    /// `{"error": ...}`) out.
    pub fn handle_line(&self, line: &str) -> String {
        let reply = serde_json::from_str::<SearchRequest>(line)
            .map_err(Error::from)
            .and_then(|req| self.search(&req));
        match reply {
            Ok(r) => serde_json::to_string(&r).expect("response serializes"),
            Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
        }
    }
}
