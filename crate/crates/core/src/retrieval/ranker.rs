use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pool::{CandidatePool, Sources};
use crate::error::{contract, Error, Result};
use crate::training::ClickLogRecord;

pub const FEATURE_NAMES: [&str; 4] = ["ctr", "dwell", "bm25", "semantic"];
pub const N_FEATURES: usize = FEATURE_NAMES.len();

/// Click-through rate, mean dwell of clicks, BM25 (0 when not text-matched)
/// and the semantic score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub ctr: f64,
    pub dwell: f64,
    pub bm25: f64,
    pub semantic: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [self.ctr, self.dwell, self.bm25, self.semantic]
    }

    pub fn from_array(a: [f64; N_FEATURES]) -> Self {
        Self {
            ctr: a[0],
            dwell: a[1],
            bm25: a[2],
            semantic: a[3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocStats {
    pub impressions: u32,
    pub clicks: u32,
    pub ctr: f64,
    /// Mean dwell over clicks; `None` for a doc that was never clicked.
    pub mean_dwell: Option<f64>,
}

/// Per-document statistics aggregated from a click log. Documents without an
/// entry get the corpus mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClickStats {
    pub docs: BTreeMap<u64, DocStats>,
    pub mean_ctr: f64,
    pub mean_dwell: f64,
}

impl ClickStats {
    pub fn from_click_log(records: &[ClickLogRecord]) -> Self {
        let mut acc: BTreeMap<u64, (u32, u32, f64)> = BTreeMap::new();
        for r in records {
            let e = acc.entry(r.doc_id).or_default();
            e.0 += 1;
            if r.clicked {
                e.1 += 1;
                e.2 += r.dwell_time;
            }
        }
        let docs: BTreeMap<u64, DocStats> = acc
            .into_iter()
            .map(|(id, (imp, clicks, dwell))| {
                let stats = DocStats {
                    impressions: imp,
                    clicks,
                    ctr: clicks as f64 / imp as f64,
                    mean_dwell: (clicks > 0).then(|| dwell / clicks as f64),
                };
                (id, stats)
            })
            .collect();
        let mean = |xs: Vec<f64>| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        let mean_ctr = mean(docs.values().map(|d| d.ctr).collect());
        let mean_dwell = mean(docs.values().filter_map(|d| d.mean_dwell).collect());
        Self {
            docs,
            mean_ctr,
            mean_dwell,
        }
    }

    /// `(ctr, dwell, imputed)`.
    pub fn lookup(&self, doc_id: u64) -> (f64, f64, bool) {
        match self.docs.get(&doc_id) {
            Some(d) => match d.mean_dwell {
                Some(dw) => (d.ctr, dw, false),
                None => (d.ctr, self.mean_dwell, true),
            },
            None => (self.mean_ctr, self.mean_dwell, true),
        }
    }
}

/// Feature vectors of a backfilled pool; `imputed` lists docs whose
/// statistical features fell back to the corpus mean.
pub struct PoolFeatures {
    pub features: BTreeMap<u64, FeatureVector>,
    pub imputed: Vec<u64>,
}

pub fn pool_features(pool: &CandidatePool, stats: &ClickStats) -> Result<PoolFeatures> {
    let mut features = BTreeMap::new();
    let mut imputed = Vec::new();
    for c in pool.iter() {
        let Some(semantic) = c.semantic_score else {
            return contract(format!("doc {} has no semantic score; backfill first", c.doc_id));
        };
        let (ctr, dwell, miss) = stats.lookup(c.doc_id);
        if miss {
            imputed.push(c.doc_id);
        }
        features.insert(
            c.doc_id,
            FeatureVector {
                ctr,
                dwell,
                bm25: c.bm25_score.unwrap_or(0.0),
                semantic,
            },
        );
    }
    Ok(PoolFeatures { features, imputed })
}

/// Affine scorer over [`FEATURE_NAMES`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRanker {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearRanker {
    pub fn new(weights: [f64; N_FEATURES], bias: f64) -> Self {
        Self {
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            weights: weights.to_vec(),
            bias,
        }
    }

    /// Weight 1 on the semantic score and nothing else.
    pub fn semantic_only() -> Self {
        Self::new([0.0, 0.0, 0.0, 1.0], 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_names != FEATURE_NAMES {
            return Err(Error::Input(format!(
                "ranker features {:?}, expected {:?}",
                self.feature_names, FEATURE_NAMES
            )));
        }
        if self.weights.len() != N_FEATURES || self.weights.iter().chain([&self.bias]).any(|w| !w.is_finite()) {
            return Err(Error::Input("ranker needs one finite weight per feature".into()));
        }
        Ok(())
    }

    pub fn score(&self, f: &FeatureVector) -> f64 {
        let mut s = self.bias;
        for (w, x) in self.weights.iter().zip(f.to_array()) {
            s += w * x;
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        r.validate()?;
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub doc_id: u64,
    pub score: f64,
    pub sources: Sources,
    pub features: FeatureVector,
}

pub struct FilterOutput {
    pub results: Vec<Ranked>,
    /// Docs whose statistical features were imputed.
    pub imputed: Vec<u64>,
}

/// Scores every candidate with `ranker` and keeps the best `n_out`
/// (score descending, ties by doc id).
pub fn filter_rank(pool: &CandidatePool, stats: &ClickStats, ranker: &LinearRanker, n_out: usize) -> Result<FilterOutput> {
    ranker.validate()?;
    let PoolFeatures { features, imputed } = pool_features(pool, stats)?;
    let mut results: Vec<Ranked> = pool
        .iter()
        .map(|c| {
            let f = features[&c.doc_id];
            Ranked {
                doc_id: c.doc_id,
                score: ranker.score(&f),
                sources: c.sources,
                features: f,
            }
        })
        .collect();
    results.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id)));
    results.truncate(n_out);
    Ok(FilterOutput { results, imputed })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query_id: u64,
    pub better: FeatureVector,
    pub worse: FeatureVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerTrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            learning_rate: 0.1,
            max_iters: 2000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankerTrainReport {
    pub iterations: usize,
    pub loss: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Pairs whose feature difference is zero; each adds a constant 1 to the loss.
    pub degenerate_pairs: usize,
}

/// Pairwise hinge objective `mean(max(0, 1 - w·(b - w'))) + λ‖w‖²`.
pub fn ranker_objective(weights: &[f64; N_FEATURES], diffs: &[[f64; N_FEATURES]], lambda: f64) -> (f64, [f64; N_FEATURES]) {
    let n = diffs.len() as f64;
    let mut loss = 0.0;
    let mut grad = [0.0; N_FEATURES];
    for d in diffs {
        let margin: f64 = weights.iter().zip(d).map(|(w, x)| w * x).sum();
        if margin < 1.0 {
            loss += (1.0 - margin) / n;
            for j in 0..N_FEATURES {
                grad[j] -= d[j] / n;
            }
        }
    }
    for j in 0..N_FEATURES {
        loss += lambda * weights[j] * weights[j];
        grad[j] += 2.0 * lambda * weights[j];
    }
    (loss, grad)
}

/// Full-batch subgradient descent on [`ranker_objective`] with a `1/√t`
/// step decay, keeping the best iterate. Stops once the gradient norm drops
/// below the tolerance.
pub fn train_ranker(pairs: &[PreferencePair], cfg: &RankerTrainConfig) -> Result<(LinearRanker, RankerTrainReport)> {
    if pairs.is_empty() {
        return contract("need at least one preference pair");
    }
    if !(cfg.lambda >= 0.0 && cfg.learning_rate > 0.0) {
        return Err(Error::Input("lambda must be ≥ 0 and learning_rate > 0".into()));
    }
    let diffs: Vec<[f64; N_FEATURES]> = pairs
        .iter()
        .map(|p| {
            let (b, w) = (p.better.to_array(), p.worse.to_array());
            std::array::from_fn(|j| b[j] - w[j])
        })
        .collect();
    if diffs.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite feature in preference pairs".into()));
    }
    let degenerate_pairs = diffs.iter().filter(|d| d.iter().all(|x| *x == 0.0)).count();
    let mut w = [0.0; N_FEATURES];
    let (mut best_w, mut best_loss) = (w, f64::INFINITY);
    let mut report = RankerTrainReport {
        iterations: 0,
        loss: 0.0,
        gradient_norm: 0.0,
        converged: false,
        degenerate_pairs,
    };
    for t in 0..cfg.max_iters.max(1) {
        let (loss, grad) = ranker_objective(&w, &diffs, cfg.lambda);
        if loss < best_loss {
            best_loss = loss;
            best_w = w;
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        report.iterations = t + 1;
        report.gradient_norm = norm;
        if norm < cfg.tolerance {
            report.converged = true;
            break;
        }
        let step = cfg.learning_rate / ((t + 1) as f64).sqrt();
        for j in 0..N_FEATURES {
            w[j] -= step * grad[j];
        }
    }
    report.loss = best_loss;
    Ok((LinearRanker::new(best_w, 0.0), report))
}

/// Preference pairs from graded judgements: every (higher, lower) grade pair
/// of a query whose docs both have features.
pub fn preference_pairs(
    judged: &[(u64, u64, u8)],
    features: &HashMap<(u64, u64), FeatureVector>,
) -> Vec<PreferencePair> {
    let mut by_query: BTreeMap<u64, Vec<(u64, u8)>> = BTreeMap::new();
    for &(q, d, g) in judged {
        by_query.entry(q).or_default().push((d, g));
    }
    let mut out = Vec::new();
    for (q, docs) in by_query {
        for &(a, ga) in &docs {
            for &(b, gb) in &docs {
                if ga <= gb {
                    continue;
                }
                if let (Some(fa), Some(fb)) = (features.get(&(q, a)), features.get(&(q, b))) {
                    out.push(PreferencePair {
                        query_id: q,
                        better: *fa,
                        worse: *fb,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{Hit, Hits};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(a: [f64; 4]) -> FeatureVector {
        FeatureVector::from_array(a)
    }

    fn semantic_pool(scores: &[(u64, f64)]) -> CandidatePool {
        let sem = Hits {
            hits: scores.iter().map(|&(doc_id, score)| Hit { doc_id, score }).collect(),
            short: false,
        };
        CandidatePool::from_hits(&Hits::default(), &sem)
    }

    fn click(doc_id: u64, clicked: bool, dwell: f64) -> ClickLogRecord {
        ClickLogRecord {
            query_id: 1,
            query_text: "q".into(),
            doc_id,
            doc_title: "t".into(),
            clicked,
            dwell_time: dwell,
        }
    }

    #[test]
    fn click_stats_and_imputation() {
        let log = [click(1, true, 10.0), click(1, false, 0.0), click(1, true, 30.0), click(2, false, 0.0)];
        let s = ClickStats::from_click_log(&log);
        assert_eq!(s.docs[&1].ctr, 2.0 / 3.0);
        assert_eq!(s.docs[&1].mean_dwell, Some(20.0));
        assert_eq!(s.mean_ctr, (2.0 / 3.0) / 2.0);
        assert_eq!(s.mean_dwell, 20.0);
        assert_eq!(s.lookup(1), (2.0 / 3.0, 20.0, false));
        assert_eq!(s.lookup(2), (0.0, 20.0, true));
        assert_eq!(s.lookup(7), (1.0 / 3.0, 20.0, true));
    }

    #[test]
    fn hand_computed_affine_scores() {
        let r = LinearRanker::new([2.0, 0.1, 0.5, 3.0], -1.0);
        let mut stats = ClickStats::default();
        for (id, ctr, dwell) in [(1, 0.5, 20.0), (2, 0.1, 5.0), (3, 0.9, 40.0)] {
            stats.docs.insert(
                id,
                DocStats {
                    impressions: 10,
                    clicks: 1,
                    ctr,
                    mean_dwell: Some(dwell),
                },
            );
        }
        let mut pool = semantic_pool(&[(1, 0.2), (2, 0.9), (3, -0.4)]);
        pool.insert(crate::retrieval::Candidate {
            doc_id: 2,
            sources: Sources { text: true, semantic: false },
            semantic_score: None,
            bm25_score: Some(4.0),
        });
        let out = filter_rank(&pool, &stats, &r, 10).unwrap();
        let want = [
            (2, -1.0 + 0.2 + 0.5 + 2.0 + 2.7),
            (3, -1.0 + 1.8 + 4.0 + 0.0 - 1.2),
            (1, -1.0 + 1.0 + 2.0 + 0.0 + 0.6),
        ];
        let got: Vec<(u64, f64)> = out.results.iter().map(|x| (x.doc_id, x.score)).collect();
        for ((gi, gs), (wi, ws)) in got.iter().zip(want) {
            assert_eq!(*gi, wi);
            assert!((gs - ws).abs() < 1e-12);
        }
        assert!(out.imputed.is_empty());
        assert!(out.results[0].sources.text && out.results[0].sources.semantic);
    }

    #[test]
    fn semantic_only_follows_semantic_order() {
        let pool = semantic_pool(&[(4, 0.3), (2, 0.7), (9, 0.3), (1, -0.2)]);
        let out = filter_rank(&pool, &ClickStats::default(), &LinearRanker::semantic_only(), 3).unwrap();
        let ids: Vec<u64> = out.results.iter().map(|r| r.doc_id).collect();
        assert_eq!(ids, vec![2, 4, 9]);
        assert_eq!(out.results[0].score, 0.7);
        let all = filter_rank(&pool, &ClickStats::default(), &LinearRanker::semantic_only(), 99).unwrap();
        assert_eq!(all.results.len(), 4);
        assert_eq!(all.imputed, vec![1, 2, 4, 9]);
    }

    #[test]
    fn unscored_candidates_are_rejected() {
        let mut pool = semantic_pool(&[(1, 0.3)]);
        pool.insert(crate::retrieval::Candidate {
            doc_id: 5,
            sources: Sources { text: true, semantic: false },
            semantic_score: None,
            bm25_score: Some(1.0),
        });
        assert!(filter_rank(&pool, &ClickStats::default(), &LinearRanker::semantic_only(), 5).is_err());
    }

    #[test]
    fn ranker_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ranker.json");
        let r = LinearRanker::new([0.25, -1.5, 1e-17, 3.0], 0.1);
        r.save(&p).unwrap();
        assert_eq!(LinearRanker::load(&p).unwrap(), r);
        let mut bad = r.clone();
        bad.feature_names.swap(0, 1);
        bad.save(&p).unwrap();
        assert!(LinearRanker::load(&p).is_err());
    }

    #[test]
    fn separable_one_dimensional_data_gets_positive_weight() {
        let pairs: Vec<PreferencePair> = (0..20)
            .map(|i| PreferencePair {
                query_id: i,
                better: fv([0.0, 0.0, 0.0, 1.0 + i as f64 * 0.1]),
                worse: fv([0.0, 0.0, 0.0, i as f64 * 0.05]),
            })
            .collect();
        let (r, report) = train_ranker(&pairs, &RankerTrainConfig::default()).unwrap();
        assert!(r.weights[3] > 0.0);
        assert_eq!(r.weights[..3], [0.0, 0.0, 0.0]);
        assert_eq!(report.degenerate_pairs, 0);
    }

    #[test]
    fn strong_regularization_shrinks_weights() {
        let pairs = vec![PreferencePair {
            query_id: 0,
            better: fv([1.0, 2.0, 0.0, 1.0]),
            worse: fv([0.0, 1.0, 0.0, 0.0]),
        }];
        let (weak, _) = train_ranker(&pairs, &RankerTrainConfig::default()).unwrap();
        let cfg = RankerTrainConfig {
            lambda: 1e4,
            learning_rate: 1e-5,
            ..Default::default()
        };
        let (strong, _) = train_ranker(&pairs, &cfg).unwrap();
        let norm = |r: &LinearRanker| r.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm(&strong) < 1e-3);
        assert!(norm(&weak) > 0.1);
    }

    #[test]
    fn identical_pairs_are_flagged() {
        let same = fv([0.3, 1.0, 2.0, 0.1]);
        let pairs = vec![PreferencePair {
            query_id: 0,
            better: same,
            worse: same,
        }];
        let (r, report) = train_ranker(&pairs, &RankerTrainConfig::default()).unwrap();
        assert_eq!(report.degenerate_pairs, 1);
        assert_eq!(r.weights, vec![0.0; 4]);
        assert!((report.loss - 1.0).abs() < 1e-12);
        assert!(report.converged);
        assert!(train_ranker(&[], &RankerTrainConfig::default()).is_err());
    }

    #[test]
    fn two_dimensional_preferences_generalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = |x: &[f64; 4]| 1.5 * x[0] - 0.5 * x[3];
        let draw = |rng: &mut ChaCha8Rng| {
            let a = fv([rng.gen_range(-1.0..1.0), 0.0, 0.0, rng.gen_range(-1.0..1.0)]);
            let b = fv([rng.gen_range(-1.0..1.0), 0.0, 0.0, rng.gen_range(-1.0..1.0)]);
            if truth(&a.to_array()) >= truth(&b.to_array()) {
                (a, b)
            } else {
                (b, a)
            }
        };
        let train: Vec<PreferencePair> = (0..400)
            .map(|i| {
                let (better, worse) = draw(&mut rng);
                PreferencePair { query_id: i, better, worse }
            })
            .collect();
        let (r, _) = train_ranker(&train, &RankerTrainConfig::default()).unwrap();
        let held: Vec<_> = (0..1000).map(|_| draw(&mut rng)).collect();
        let correct = held.iter().filter(|(b, w)| r.score(b) > r.score(w)).count();
        assert!(correct as f64 / 1000.0 > 0.9, "accuracy {}", correct);
    }

    #[test]
    fn preference_pairs_enumerate_grade_order() {
        let judged = [(1, 10, 3), (1, 11, 1), (1, 12, 1), (2, 20, 0)];
        let mut feats = HashMap::new();
        for (q, d, g) in judged {
            feats.insert((q, d), fv([g as f64, 0.0, 0.0, d as f64]));
        }
        let pairs = preference_pairs(&judged, &feats);
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.better.ctr == 3.0 && p.worse.ctr == 1.0));
    }
}
