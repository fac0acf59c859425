//! Finite-difference check of the full contrastive loss.
//!
//! Each perturbed evaluation restarts from cached hidden states at the first
//! stage that reads the perturbed tensor, so upper-layer parameters are cheap.

use super::batch::{contrastive_loss_on, contrastive_step, scores_from_reps_on, Batch};
use crate::encoder::{EncoderModel, ScoreMode, TokenSequence};
use crate::error::Result;
use crate::numkernel::{relative_error, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat entry of the worst mismatch.
    pub worst: Option<(String, usize)>,
    /// Entries compared against finite differences.
    pub checked: usize,
    pub loss: f64,
}

struct Inputs<'a> {
    queries: Vec<&'a TokenSequence>,
    docs: Vec<&'a TokenSequence>,
    q_spans: Vec<usize>,
    d_spans: Vec<usize>,
}

/// Hidden states entering every stage `0..=n_layers` for queries and documents.
type StageCache = Vec<(Tensor<f64>, Tensor<f64>)>;

fn stage_inputs(model: &EncoderModel<f64>, inp: &Inputs<'_>) -> Result<StageCache> {
    let n = model.config().n_layers;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mut q = model.embed_batch_on(&mut tape, &bound, &inp.queries, None, None)?;
    let mut d = model.embed_batch_on(&mut tape, &bound, &inp.docs, None, None)?;
    let mut out = Vec::with_capacity(n + 1);
    for l in 0..=n {
        out.push((tape.value(q).clone(), tape.value(d).clone()));
        if l < n {
            q = model.layers_on(&mut tape, &bound, q, &inp.q_spans, l..l + 1, None)?;
            d = model.layers_on(&mut tape, &bound, d, &inp.d_spans, l..l + 1, None)?;
        }
    }
    Ok(out)
}

fn loss_from(
    model: &EncoderModel<f64>,
    inp: &Inputs<'_>,
    cache: &StageCache,
    stage: Option<usize>,
    temperature: f64,
    mode: ScoreMode,
) -> Result<f64> {
    let n = model.config().n_layers;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let (q, d) = match stage {
        None => (
            model.encode_batch_on(&mut tape, &bound, &inp.queries, None, None)?,
            model.encode_batch_on(&mut tape, &bound, &inp.docs, None, None)?,
        ),
        Some(l) => {
            let q = tape.constant(cache[l].0.clone());
            let d = tape.constant(cache[l].1.clone());
            (
                model.layers_on(&mut tape, &bound, q, &inp.q_spans, l..n, None)?,
                model.layers_on(&mut tape, &bound, d, &inp.d_spans, l..n, None)?,
            )
        }
    };
    let q = model.query_head_on(&mut tape, &bound, q, &inp.q_spans)?;
    let d = model.doc_head_on(&mut tape, &bound, d, &inp.d_spans)?;
    let s = scores_from_reps_on(&mut tape, q, d, model.reps_per_query(), mode)?;
    let targets: Vec<usize> = (0..inp.queries.len()).collect();
    let l = contrastive_loss_on(&mut tape, s, &targets, temperature)?;
    tape.value(l).item()
}

/// Compares the analytic in-batch contrastive gradient with central differences
/// of the given `step` on every entry accepted by `select(param, entry, analytic)`.
///
/// Returns the analytic gradients alongside the report.
pub fn check_contrastive_gradients(
    model: &EncoderModel<f64>,
    batch: &Batch,
    temperature: f64,
    mode: ScoreMode,
    step: f64,
    mut select: impl FnMut(usize, usize, f64) -> bool,
) -> Result<(Vec<Vec<f64>>, GradCheckReport)> {
    let (loss, analytic) = contrastive_step(model, batch, temperature, mode, true, None)?;
    let ex = batch.examples();
    let inp = Inputs {
        queries: ex.iter().map(|e| &e.query).collect(),
        docs: ex
            .iter()
            .map(|e| &e.positive)
            .chain(ex.iter().map(|e| &e.strong_negative))
            .collect(),
        q_spans: ex.iter().map(|e| e.query.len()).collect(),
        d_spans: ex
            .iter()
            .map(|e| e.positive.len())
            .chain(ex.iter().map(|e| e.strong_negative.len()))
            .collect(),
    };
    let cache = stage_inputs(model, &inp)?;
    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        loss,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let stage = model.param_stage(pi);
        for (e, &a) in grad.iter().enumerate() {
            if !select(pi, e, a) {
                continue;
            }
            let orig = work.params()[pi].tensor.data()[e];
            work.params_mut()[pi].tensor_mut().data_mut()[e] = orig + step;
            let plus = loss_from(&work, &inp, &cache, stage, temperature, mode)?;
            work.params_mut()[pi].tensor_mut().data_mut()[e] = orig - step;
            let minus = loss_from(&work, &inp, &cache, stage, temperature, mode)?;
            work.params_mut()[pi].tensor_mut().data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((model.params()[pi].name.clone(), e));
            }
        }
    }
    Ok((analytic, report))
}
