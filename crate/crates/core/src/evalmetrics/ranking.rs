use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// One judged document under a query: label `y` and model score `f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: u64,
    pub label: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: u64,
    pub docs: Vec<ScoredDoc>,
}

pub const DEFAULT_PNR_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPnr {
    pub query_id: u64,
    pub concordant: usize,
    pub discordant: usize,
    pub pnr: f64,
    /// No discordant pair: `pnr` holds the cap.
    pub capped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnrReport {
    pub per_query: Vec<QueryPnr>,
    /// Average of the per-query values.
    pub mean: f64,
    pub capped_queries: usize,
    /// Queries without any label-ordered pair whose scores are ordered too.
    pub skipped_queries: Vec<u64>,
}

/// Concordant and discordant counts over pairs with `y_i > y_j`.
/// Pairs tied in score count as neither.
pub fn pair_counts(labels: &[f64], scores: &[f64]) -> (usize, usize) {
    let mut conc = 0;
    let mut disc = 0;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] > labels[j] {
                if scores[i] > scores[j] {
                    conc += 1;
                } else if scores[i] < scores[j] {
                    disc += 1;
                }
            }
        }
    }
    (conc, disc)
}

/// Positive-negative ratio per query and averaged over queries.
pub fn pnr(records: &[EvalRecord], cap: f64) -> Result<PnrReport> {
    if !(cap > 0.0) {
        return contract("PNR cap must be positive");
    }
    let mut per_query = Vec::new();
    let mut skipped_queries = Vec::new();
    for r in records {
        let labels: Vec<f64> = r.docs.iter().map(|d| d.label).collect();
        let scores: Vec<f64> = r.docs.iter().map(|d| d.score).collect();
        let (concordant, discordant) = pair_counts(&labels, &scores);
        if concordant + discordant == 0 {
            skipped_queries.push(r.query_id);
            continue;
        }
        let capped = discordant == 0;
        let pnr = if capped {
            cap
        } else {
            concordant as f64 / discordant as f64
        };
        per_query.push(QueryPnr {
            query_id: r.query_id,
            concordant,
            discordant,
            pnr,
            capped,
        });
    }
    if per_query.is_empty() {
        return contract("no query has an ordered label pair with ordered scores");
    }
    let mean = per_query.iter().map(|q| q.pnr).sum::<f64>() / per_query.len() as f64;
    let capped_queries = per_query.iter().filter(|q| q.capped).count();
    Ok(PnrReport {
        per_query,
        mean,
        capped_queries,
        skipped_queries,
    })
}

/// `|retrieved ∩ truth| / k`, dividing by `k` even when the truth set is smaller.
pub fn recall_at_k(retrieved: &[u64], truth: &[u64], k: usize) -> Result<f64> {
    if k == 0 {
        return contract("k must be positive");
    }
    if retrieved.len() > k {
        return contract(format!("{} results retrieved for k = {}", retrieved.len(), k));
    }
    let truth: HashSet<u64> = truth.iter().copied().collect();
    let hits: HashSet<u64> = retrieved.iter().copied().filter(|d| truth.contains(d)).collect();
    Ok(hits.len() as f64 / k as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// The grade itself.
    #[default]
    Raw,
    /// `2^grade - 1`.
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dcg {
    pub value: f64,
    /// Fewer than `k` results were available.
    pub short: bool,
}

/// `Σ_{i ≤ k} gain(g_i) / log2(i + 1)` over grades in rank order.
pub fn dcg_at_k(grades: &[f64], k: usize, gain: Gain) -> Result<Dcg> {
    if let Some(g) = grades.iter().find(|g| !(0.0..=4.0).contains(*g)) {
        return contract(format!("grade {} outside [0, 4]", g));
    }
    let value = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| {
            let gain = match gain {
                Gain::Raw => g,
                Gain::Exponential => g.exp2() - 1.0,
            };
            gain / ((i + 2) as f64).log2()
        })
        .sum();
    Ok(Dcg {
        value,
        short: grades.len() < k,
    })
}

/// `(good - bad) / (good + same + bad)`.
pub fn delta_gsb(good: usize, same: usize, bad: usize) -> Result<f64> {
    let total = good + same + bad;
    if total == 0 {
        return contract("no side-by-side judgements");
    }
    Ok((good as f64 - bad as f64) / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(labels: &[f64], scores: &[f64]) -> EvalRecord {
        EvalRecord {
            query_id: 1,
            docs: labels
                .iter()
                .zip(scores)
                .enumerate()
                .map(|(i, (&label, &score))| ScoredDoc {
                    doc_id: i as u64,
                    label,
                    score,
                })
                .collect(),
        }
    }

    #[test]
    fn pnr_examples() {
        let r = pnr(&[record(&[2.0, 1.0, 0.0], &[0.9, 0.5, 0.7])], DEFAULT_PNR_CAP).unwrap();
        assert_eq!((r.per_query[0].concordant, r.per_query[0].discordant), (2, 1));
        assert_eq!(r.mean, 2.0);

        let r = pnr(&[record(&[2.0, 1.0, 0.0], &[3.0, 2.0, 1.0])], DEFAULT_PNR_CAP).unwrap();
        assert!(r.per_query[0].capped);
        assert_eq!(r.mean, 100.0);
        assert_eq!(r.capped_queries, 1);

        let rev = pnr(&[record(&[2.0, 1.0, 0.0], &[-0.9, -0.5, -0.7])], DEFAULT_PNR_CAP).unwrap();
        assert_eq!(rev.mean, 0.5);

        let flat = pnr(&[record(&[1.0, 1.0], &[0.2, 0.3]), record(&[2.0, 1.0, 0.0], &[0.9, 0.5, 0.7])], 100.0)
            .unwrap();
        assert_eq!(flat.skipped_queries, vec![1]);
        assert!(pnr(&[record(&[1.0, 1.0], &[0.2, 0.3])], 100.0).is_err());
    }

    #[test]
    fn recall_examples() {
        let truth: Vec<u64> = (0..10).collect();
        assert_eq!(recall_at_k(&truth, &truth, 10).unwrap(), 1.0);
        let other: Vec<u64> = (10..20).collect();
        assert_eq!(recall_at_k(&other, &truth, 10).unwrap(), 0.0);
        let six: Vec<u64> = (4..14).collect();
        assert_eq!(recall_at_k(&six, &truth, 10).unwrap(), 0.6);
        assert_eq!(recall_at_k(&[1, 2], &[1, 2], 10).unwrap(), 0.2);
        assert!(recall_at_k(&other, &truth, 5).is_err());
    }

    #[test]
    fn dcg_examples() {
        assert_eq!(dcg_at_k(&[4.0, 0.0, 0.0, 0.0], 4, Gain::Raw).unwrap().value, 4.0);
        assert_eq!(dcg_at_k(&[0.0; 4], 4, Gain::Raw).unwrap().value, 0.0);
        let d = dcg_at_k(&[4.0, 3.0, 2.0, 1.0], 4, Gain::Raw).unwrap();
        let want = 4.0 + 3.0 / 3f64.log2() + 2.0 / 2.0 + 1.0 / 5f64.log2();
        assert!((d.value - want).abs() < 1e-12);
        assert!((d.value - 7.3235).abs() < 1e-3);
        assert!(!d.short);
        assert!(dcg_at_k(&[4.0, 3.0], 4, Gain::Raw).unwrap().short);
        assert_eq!(dcg_at_k(&[4.0], 4, Gain::Exponential).unwrap().value, 15.0);
        assert!(dcg_at_k(&[5.0], 4, Gain::Raw).is_err());
    }

    #[test]
    fn gsb_examples() {
        assert_eq!(delta_gsb(4, 2, 4).unwrap(), 0.0);
        assert_eq!(delta_gsb(7, 0, 3).unwrap(), 0.4);
        assert_eq!(delta_gsb(0, 5, 0).unwrap(), 0.0);
        assert!(delta_gsb(0, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn pnr_ignores_monotone_transforms(
            pairs in prop::collection::vec((0u8..5, -3.0f64..3.0), 2..12),
        ) {
            let labels: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let scores: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
            prop_assert_eq!(pair_counts(&labels, &scores), pair_counts(&labels, &mapped));
        }

        #[test]
        fn recall_ignores_order(mut ids in prop::collection::vec(0u64..30, 0..10)) {
            let truth: Vec<u64> = (0..15).collect();
            let a = recall_at_k(&ids, &truth, 10).unwrap();
            ids.reverse();
            prop_assert_eq!(a, recall_at_k(&ids, &truth, 10).unwrap());
        }

        #[test]
        fn dcg_prefers_better_first(grades in prop::collection::vec(0u8..5, 2..6), i in 0usize..5) {
            let g: Vec<f64> = grades.iter().map(|&x| x as f64).collect();
            let i = i % (g.len() - 1);
            prop_assume!(g[i] > g[i + 1]);
            let mut swapped = g.clone();
            swapped.swap(i, i + 1);
            let k = g.len();
            prop_assert!(dcg_at_k(&swapped, k, Gain::Raw).unwrap().value <= dcg_at_k(&g, k, Gain::Raw).unwrap().value);
        }

        #[test]
        fn gsb_bounded_and_antisymmetric(g in 0usize..50, s in 0usize..50, b in 0usize..50) {
            prop_assume!(g + s + b > 0);
            let d = delta_gsb(g, s, b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&d));
            prop_assert_eq!(d, -delta_gsb(b, s, g).unwrap());
        }
    }
}
