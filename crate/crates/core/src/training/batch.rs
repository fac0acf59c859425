use serde::{Deserialize, Serialize};

use crate::encoder::{Bound, Dropout, EncoderModel, ScoreMode, TokenSequence};
use crate::error::{contract, Result};
use crate::numkernel::{NodeId, Tape, Tensor};
use crate::scalar::Scalar;

/// One `(query, positive, strong negative)` triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub query: TokenSequence,
    pub positive: TokenSequence,
    pub strong_negative: TokenSequence,
}

/// A mini-batch of triplets. Column `j < B` of the score matrix is the
/// positive of example `j`; column `B + j` is its strong negative.
#[derive(Clone, Debug)]
pub struct Batch {
    examples: Vec<TrainExample>,
}

impl Batch {
    pub fn new(examples: Vec<TrainExample>) -> Result<Self> {
        if examples.is_empty() {
            return contract("empty batch");
        }
        Ok(Self { examples })
    }

    pub fn examples(&self) -> &[TrainExample] {
        &self.examples
    }

    pub fn size(&self) -> usize {
        self.examples.len()
    }

    /// Column of query `i`'s own positive.
    pub fn positive_col(&self, i: usize) -> usize {
        i
    }

    /// Column of query `i`'s own strong negative.
    pub fn strong_negative_col(&self, i: usize) -> usize {
        self.examples.len() + i
    }

    /// Negatives faced by each query: its strong negative plus `2(B-1)` random ones.
    pub fn negatives_per_query(&self) -> usize {
        2 * self.examples.len() - 1
    }
}

/// Records the `[B × 2B]` in-batch score matrix on `tape`.
///
/// All query representations are stacked into `[B·m × d]` and multiplied once
/// against the stacked document matrix; each group of `m` rows is then reduced
/// by max (training) or mean (prediction).
pub fn build_in_batch_scores_on<T: Scalar>(
    model: &EncoderModel<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &Batch,
    mode: ScoreMode,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<NodeId> {
    if batch.size() < 2 {
        return contract("in-batch negatives need at least two examples");
    }
    let queries: Vec<&TokenSequence> = batch.examples().iter().map(|e| &e.query).collect();
    let docs: Vec<&TokenSequence> = batch
        .examples()
        .iter()
        .map(|e| &e.positive)
        .chain(batch.examples().iter().map(|e| &e.strong_negative))
        .collect();
    let q = model.query_reps_batch_on(tape, bound, &queries, dropout.as_deref_mut())?;
    let d = model.doc_reps_batch_on(tape, bound, &docs, dropout)?;
    scores_from_reps_on(tape, q, d, model.reps_per_query(), mode)
}

/// Scores stacked query representations (`group` rows per query) against
/// stacked document representations.
pub fn scores_from_reps_on<T: Scalar>(
    tape: &mut Tape<T>,
    queries: NodeId,
    docs: NodeId,
    group: usize,
    mode: ScoreMode,
) -> Result<NodeId> {
    let all = tape.matmul_bt(queries, docs)?;
    tape.group_reduce_rows(all, group, mode.reduce())
}

/// Per-triplet `[B × 2]` scores (positive, own strong negative) without in-batch negatives.
pub fn build_pairwise_scores_on<T: Scalar>(
    model: &EncoderModel<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &Batch,
    mode: ScoreMode,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(batch.size());
    for ex in batch.examples() {
        let q = model.query_reps_on(tape, bound, &ex.query, dropout.as_deref_mut())?;
        let p = model.doc_rep_on(tape, bound, &ex.positive, dropout.as_deref_mut())?;
        let n = model.doc_rep_on(tape, bound, &ex.strong_negative, dropout.as_deref_mut())?;
        let group = tape.value(q).rows();
        let d = tape.stack_rows(&[p, n])?;
        let s = tape.matmul_bt(q, d)?;
        rows.push(tape.group_reduce_rows(s, group, mode.reduce())?);
    }
    tape.stack_rows(&rows)
}

/// Evaluation-mode in-batch score matrix.
pub fn build_in_batch_scores<T: Scalar>(
    model: &EncoderModel<T>,
    batch: &Batch,
    mode: ScoreMode,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let s = build_in_batch_scores_on(model, &mut tape, &bound, batch, mode, None)?;
    Ok(tape.value(s).clone())
}

/// Mean negative log contrastive probability of each row's positive column.
pub fn contrastive_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    scores: NodeId,
    positive_cols: &[usize],
    temperature: T,
) -> Result<NodeId> {
    if !(temperature > T::zero()) {
        return contract("temperature must be positive");
    }
    let scaled = tape.scale(scores, T::one() / temperature);
    tape.cross_entropy(scaled, positive_cols)
}

/// Contrastive loss of a score matrix whose row `i` has its positive in column `i`.
pub fn contrastive_loss<T: Scalar>(scores: &Tensor<T>, temperature: T) -> Result<T> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let targets: Vec<usize> = (0..scores.rows()).collect();
    let l = contrastive_loss_on(&mut tape, s, &targets, temperature)?;
    tape.value(l).item()
}

/// Loss and per-parameter gradients of one contrastive batch.
pub fn contrastive_step<T: Scalar>(
    model: &EncoderModel<T>,
    batch: &Batch,
    temperature: T,
    mode: ScoreMode,
    in_batch_negatives: bool,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<(T, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let (scores, targets) = if in_batch_negatives {
        let s = build_in_batch_scores_on(model, &mut tape, &bound, batch, mode, dropout)?;
        (s, (0..batch.size()).collect::<Vec<_>>())
    } else {
        let s = build_pairwise_scores_on(model, &mut tape, &bound, batch, mode, dropout)?;
        (s, vec![0; batch.size()])
    };
    let loss = contrastive_loss_on(&mut tape, scores, &targets, temperature)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item()?;
    Ok((value, model.gradients(&tape, &bound)))
}

/// Evaluation-mode loss only (used by gradient checks).
pub fn contrastive_batch_loss<T: Scalar>(
    model: &EncoderModel<T>,
    batch: &Batch,
    temperature: T,
    mode: ScoreMode,
) -> Result<T> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let s = build_in_batch_scores_on(model, &mut tape, &bound, batch, mode, None)?;
    let targets: Vec<usize> = (0..batch.size()).collect();
    let l = contrastive_loss_on(&mut tape, s, &targets, temperature)?;
    tape.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let single = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(contrastive_loss(&single, 1.0).unwrap(), 0.0);

        let tie = Tensor::new(vec![1, 2], vec![0.4, 0.4]).unwrap();
        assert!((contrastive_loss(&tie, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let s = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        let want = -(e / (e + 1.0)).ln();
        let got = contrastive_loss(&s, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.3133).abs() < 1e-4);

        assert!(contrastive_loss(&s, 0.0).is_err());
        assert!(contrastive_loss(&s, -1.0).is_err());
    }
}
