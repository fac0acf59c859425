//! Triplet mining from click logs and graded judgements.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{ClickLogRecord, GradedLabelRecord, TrainExample};
use crate::encoder::{TokenSequence, Vocab};

/// How exposed-but-unclicked documents are paired with clicked ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// One uniformly drawn non-clicked document per clicked document.
    #[default]
    SampleOne,
    /// Every (clicked, non-clicked) combination.
    SampleAll,
}

/// Clicked and non-clicked documents of one query, tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickGroup {
    pub query_id: u64,
    pub query: TokenSequence,
    pub positives: Vec<TokenSequence>,
    pub negatives: Vec<TokenSequence>,
}

impl ClickGroup {
    pub fn expand(&self, policy: NegativePolicy, rng: &mut dyn RngCore, out: &mut Vec<TrainExample>) {
        for p in &self.positives {
            let negs: Vec<&TokenSequence> = match policy {
                NegativePolicy::SampleAll => self.negatives.iter().collect(),
                NegativePolicy::SampleOne => self.negatives.choose(rng).into_iter().collect(),
            };
            for n in negs {
                out.push(TrainExample {
                    query: self.query.clone(),
                    positive: p.clone(),
                    strong_negative: n.clone(),
                });
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClickGroups {
    pub groups: Vec<ClickGroup>,
    /// Queries lacking either a click or a non-clicked exposure.
    pub skipped_queries: usize,
}

impl ClickGroups {
    pub fn expand(&self, policy: NegativePolicy, rng: &mut dyn RngCore) -> Vec<TrainExample> {
        let mut out = Vec::new();
        for g in &self.groups {
            g.expand(policy, rng, &mut out);
        }
        out
    }
}

/// Groups a click log by query (in order of first appearance). A document
/// clicked in any session is a positive; documents shown but never clicked are
/// the negatives.
pub fn group_click_log(records: &[ClickLogRecord], vocab: &Vocab, max_len: usize) -> ClickGroups {
    struct Acc<'a> {
        query: &'a str,
        docs: Vec<(u64, &'a str, bool)>,
    }
    let mut order: Vec<u64> = Vec::new();
    let mut by_query: HashMap<u64, Acc> = HashMap::new();
    for r in records {
        let acc = by_query.entry(r.query_id).or_insert_with(|| {
            order.push(r.query_id);
            Acc {
                query: &r.query_text,
                docs: Vec::new(),
            }
        });
        match acc.docs.iter_mut().find(|d| d.0 == r.doc_id) {
            Some(d) => d.2 |= r.clicked,
            None => acc.docs.push((r.doc_id, &r.doc_title, r.clicked)),
        }
    }
    let mut groups = Vec::new();
    let mut skipped_queries = 0;
    for qid in order {
        let acc = &by_query[&qid];
        let enc = |t: &str| vocab.encode(t, max_len);
        let positives: Vec<TokenSequence> = acc.docs.iter().filter(|d| d.2).map(|d| enc(d.1)).collect();
        let negatives: Vec<TokenSequence> = acc.docs.iter().filter(|d| !d.2).map(|d| enc(d.1)).collect();
        if positives.is_empty() || negatives.is_empty() {
            skipped_queries += 1;
            continue;
        }
        groups.push(ClickGroup {
            query_id: qid,
            query: enc(acc.query),
            positives,
            negatives,
        });
    }
    ClickGroups {
        groups,
        skipped_queries,
    }
}

/// Clicked documents as positives, exposed non-clicked ones as strong negatives.
/// Returns the triplets and the number of skipped queries.
pub fn mine_from_click_log(
    records: &[ClickLogRecord],
    vocab: &Vocab,
    max_len: usize,
    policy: NegativePolicy,
    rng: &mut dyn RngCore,
) -> (Vec<TrainExample>, usize) {
    let groups = group_click_log(records, vocab, max_len);
    (groups.expand(policy, rng), groups.skipped_queries)
}

/// Every same-query pair with strictly ordered grades, higher grade as the positive.
pub fn mine_from_graded_labels(records: &[GradedLabelRecord], vocab: &Vocab, max_len: usize) -> Vec<TrainExample> {
    let mut order: Vec<u64> = Vec::new();
    let mut by_query: HashMap<u64, Vec<&GradedLabelRecord>> = HashMap::new();
    for r in records {
        by_query
            .entry(r.query_id)
            .or_insert_with(|| {
                order.push(r.query_id);
                Vec::new()
            })
            .push(r);
    }
    let mut out = Vec::new();
    for qid in order {
        let rs = &by_query[&qid];
        let query = vocab.encode(&rs[0].query_text, max_len);
        let titles: Vec<TokenSequence> = rs.iter().map(|r| vocab.encode(&r.doc_title, max_len)).collect();
        for (i, hi) in rs.iter().enumerate() {
            for (j, lo) in rs.iter().enumerate() {
                if hi.grade > lo.grade {
                    out.push(TrainExample {
                        query: query.clone(),
                        positive: titles[i].clone(),
                        strong_negative: titles[j].clone(),
                    });
                }
            }
        }
    }
    out
}
