use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    A,
    B,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterleaveEvent {
    pub query_id: u64,
    pub winner: Winner,
    pub dwell_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterleaveLog {
    pub events: Vec<InterleaveEvent>,
}

impl InterleaveLog {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.events.iter().find(|e| !(e.dwell_time >= 0.0)) {
            return Err(Error::Input(format!(
                "negative dwell time {} for query {}",
                e.dwell_time, e.query_id
            )));
        }
        Ok(())
    }

    /// The same log with the roles of A and B exchanged.
    pub fn swapped(&self) -> Self {
        let events = self
            .events
            .iter()
            .map(|e| InterleaveEvent {
                winner: match e.winner {
                    Winner::A => Winner::B,
                    Winner::B => Winner::A,
                    Winner::Tie => Winner::Tie,
                },
                ..e.clone()
            })
            .collect();
        Self { events }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for e in &self.events {
            match e.winner {
                Winner::A => c.0 += 1,
                Winner::B => c.1 += 1,
                Winner::Tie => c.2 += 1,
            }
        }
        c
    }
}

/// Logistic map of dwell time to `[0, 1]`: `σ((t - center) / scale)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwellSigmoid {
    pub center: f64,
    pub scale: f64,
}

impl Default for DwellSigmoid {
    fn default() -> Self {
        Self {
            center: 30.0,
            scale: 10.0,
        }
    }
}

impl DwellSigmoid {
    pub fn weight(&self, dwell: f64) -> f64 {
        1.0 / (1.0 + (-(dwell - self.center) / self.scale).exp())
    }
}

fn weighted_delta(log: &InterleaveLog, weights: &[f64]) -> Result<f64> {
    if log.events.is_empty() {
        return contract("empty interleave log");
    }
    log.validate()?;
    let (mut a, mut b, mut t) = (0.0, 0.0, 0.0);
    for (e, w) in log.events.iter().zip(weights) {
        match e.winner {
            Winner::A => a += w,
            Winner::B => b += w,
            Winner::Tie => t += w,
        }
    }
    let total = a + b + t;
    if !(total > 0.0) {
        return contract("interleave log carries no weight");
    }
    Ok((a + 0.5 * t) / total - 0.5)
}

/// `(wins(A) + ties/2) / (wins(A) + wins(B) + ties) - 1/2`.
pub fn delta_ab(log: &InterleaveLog) -> Result<f64> {
    weighted_delta(log, &vec![1.0; log.events.len()])
}

/// [`delta_ab`] with every counter increment weighted by the dwell sigmoid.
///
/// Weights are divided by their maximum, a common factor that cancels in the
/// ratio; when all dwell times are equal every weight is exactly 1 and the
/// result is bit-identical to [`delta_ab`].
pub fn delta_ab_tw(log: &InterleaveLog, sigmoid: DwellSigmoid) -> Result<f64> {
    let raw: Vec<f64> = log.events.iter().map(|e| sigmoid.weight(e.dwell_time)).collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return weighted_delta(log, &raw);
    }
    let weights: Vec<f64> = raw.iter().map(|w| w / max).collect();
    weighted_delta(log, &weights)
}

/// Two-sided exact sign test of A-wins against B-wins (ties dropped).
pub fn sign_test(log: &InterleaveLog) -> f64 {
    let (a, b, _) = log.counts();
    let n = a + b;
    if n == 0 {
        return 1.0;
    }
    let k = a.min(b);
    // P(X <= k) for X ~ Binomial(n, 1/2), accumulated in log space.
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_c = 0.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_c + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

/// Position-biased examination times grade-driven attraction; clicked results
/// get a log-normal dwell time whose location grows with the grade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickModel {
    /// Examination probability at rank `r` (0-based) is `(r + 1)^-exam_decay`.
    pub exam_decay: f64,
    /// Click probability of an examined result, by grade 0..=4.
    pub attraction: [f64; 5],
    pub dwell_mu: [f64; 5],
    pub dwell_sigma: f64,
    /// Results shown per impression.
    pub depth: usize,
    pub impressions_per_query: usize,
}

impl Default for ClickModel {
    fn default() -> Self {
        Self {
            exam_decay: 0.5,
            attraction: [0.03, 0.08, 0.2, 0.55, 0.85],
            dwell_mu: [2.2, 2.55, 2.9, 3.25, 3.6],
            dwell_sigma: 0.5,
            depth: 10,
            impressions_per_query: 10,
        }
    }
}

/// Balanced interleaving of two rankings; `a_first` decides who leads ties.
pub fn balanced_interleave(a: &[u64], b: &[u64], a_first: bool, depth: usize) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    let (mut ka, mut kb) = (0, 0);
    while out.len() < depth && (ka < a.len() || kb < b.len()) {
        let take_a = kb >= b.len() || (ka < a.len() && (ka < kb || (ka == kb && a_first)));
        let d = if take_a {
            ka += 1;
            a[ka - 1]
        } else {
            kb += 1;
            b[kb - 1]
        };
        if !out.contains(&d) {
            out.push(d);
        }
    }
    out
}

/// Ranked lists of both systems for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRankings {
    pub query_id: u64,
    pub a: Vec<u64>,
    pub b: Vec<u64>,
}

/// Simulated balanced-interleaving traffic.
///
/// Each impression interleaves the two lists and samples clicks. The top-most
/// clicked result decides the event: the system ranking it higher wins, equal
/// ranks tie (so identical lists always tie). Impressions without clicks carry
/// no preference and are not logged.
pub fn simulate_interleave(
    rankings: &[QueryRankings],
    grades: &HashMap<(u64, u64), u8>,
    model: &ClickModel,
    seed: u64,
) -> Result<InterleaveLog> {
    if model.attraction.iter().any(|p| !(0.0..=1.0).contains(p)) || !(model.dwell_sigma > 0.0) {
        return contract("click model probabilities must lie in [0, 1] and dwell sigma be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    for q in rankings {
        if q.a.is_empty() || q.b.is_empty() {
            continue;
        }
        let rank = |list: &[u64], d: u64| list.iter().position(|x| *x == d).unwrap_or(usize::MAX);
        for _ in 0..model.impressions_per_query {
            let a_first = rng.gen::<bool>();
            let shown = balanced_interleave(&q.a, &q.b, a_first, model.depth);
            for (pos, &d) in shown.iter().enumerate() {
                let g = grades.get(&(q.query_id, d)).copied().unwrap_or(0).min(4) as usize;
                let p = (pos as f64 + 1.0).powf(-model.exam_decay) * model.attraction[g];
                if rng.gen::<f64>() < p {
                    let dwell = LogNormal::new(model.dwell_mu[g], model.dwell_sigma)
                        .map_err(|e| Error::Contract(e.to_string()))?
                        .sample(&mut rng);
                    let (ra, rb) = (rank(&q.a, d), rank(&q.b, d));
                    let winner = match ra.cmp(&rb) {
                        std::cmp::Ordering::Less => Winner::A,
                        std::cmp::Ordering::Greater => Winner::B,
                        std::cmp::Ordering::Equal => Winner::Tie,
                    };
                    events.push(InterleaveEvent {
                        query_id: q.query_id,
                        winner,
                        dwell_time: dwell,
                    });
                    break;
                }
            }
        }
    }
    Ok(InterleaveLog { events })
}
