//! Masked-token and next-sentence objectives of the two pretraining stages.

use rand::seq::index::sample;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::encoder::{Dropout, EncoderModel, TokenSequence, MASK_ID};
use crate::error::{contract, Result};
use crate::numkernel::Tape;
use crate::scalar::Scalar;

/// Sentence pair for the pretraining stages; `a` and `b` hold word ids without `[CLS]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainPair {
    pub a: Vec<u32>,
    /// The document side, truncated first when the pair is too long.
    pub b: Vec<u32>,
    pub is_next: bool,
}

/// `[CLS] a b` with segment ids 0 for `[CLS]` and `a`, 1 for `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedPair {
    pub seq: TokenSequence,
    pub segments: Vec<usize>,
    pub truncated: bool,
}

pub fn pack_pair(a: &[u32], b: &[u32], max_len: usize) -> Result<PackedPair> {
    if a.is_empty() || b.is_empty() {
        return contract("both sides of a sentence pair need at least one token");
    }
    if max_len < 3 {
        return contract("max_len below 3 cannot hold a sentence pair");
    }
    let room = max_len - 1;
    // Keep at least one token of b; a gives way only when it alone overflows.
    let a_len = a.len().min(room - 1);
    let b_len = b.len().min(room - a_len);
    let truncated = a_len < a.len() || b_len < b.len();
    let mut content = a[..a_len].to_vec();
    content.extend_from_slice(&b[..b_len]);
    let mut segments = vec![0; 1 + a_len];
    segments.extend(std::iter::repeat_n(1, b_len));
    Ok(PackedPair {
        seq: TokenSequence::from_content(&content),
        segments,
        truncated,
    })
}

/// Number of positions masked among `n` content tokens: `max(1, round(ratio·n))`,
/// or none when `ratio` is 0.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    if ratio <= 0.0 || n == 0 {
        0
    } else {
        ((ratio * n as f64).round() as usize).clamp(1, n)
    }
}

/// Replaces randomly chosen content tokens with `[MASK]`; returns the masked
/// sequence, the masked positions (sequence indices) and the original ids.
pub fn mask_tokens(
    seq: &TokenSequence,
    ratio: f64,
    rng: &mut dyn RngCore,
) -> Result<(TokenSequence, Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return contract(format!("mask ratio {} outside [0, 1]", ratio));
    }
    let n = seq.content().len();
    if n < 2 {
        return contract("masked prediction needs at least two content tokens");
    }
    let mut positions: Vec<usize> = sample(rng, n, mask_count(n, ratio)).into_iter().map(|i| i + 1).collect();
    positions.sort_unstable();
    let mut tokens = seq.tokens().to_vec();
    let targets = positions
        .iter()
        .map(|&p| std::mem::replace(&mut tokens[p], MASK_ID) as usize)
        .collect();
    Ok((TokenSequence::new(tokens)?, positions, targets))
}

/// Masked-token cross-entropy of one sequence, averaged over the masked positions.
pub fn mlm_loss<T: Scalar>(
    model: &EncoderModel<T>,
    seq: &TokenSequence,
    mask_ratio: f64,
    rng: &mut dyn RngCore,
) -> Result<T> {
    let (masked, positions, targets) = mask_tokens(seq, mask_ratio, rng)?;
    if positions.is_empty() {
        return Ok(T::zero());
    }
    mlm_loss_at(model, &masked, &positions, &targets)
}

/// Masked-token cross-entropy at given positions of an already masked sequence.
pub fn mlm_loss_at<T: Scalar>(
    model: &EncoderModel<T>,
    masked: &TokenSequence,
    positions: &[usize],
    targets: &[usize],
) -> Result<T> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let out = model.encode_on(&mut tape, &bound, masked, None, None)?;
    let logits = model.mlm_logits_on(&mut tape, &bound, out, positions)?;
    let l = tape.cross_entropy(logits, targets)?;
    tape.value(l).item()
}

/// Binary cross-entropy of the next-sentence head on one pair. Also reports
/// whether the document side had to be truncated.
pub fn nsp_loss<T: Scalar>(model: &EncoderModel<T>, a: &[u32], b: &[u32], is_next: bool) -> Result<(T, bool)> {
    let packed = pack_pair(a, b, model.config().max_len)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let out = model.encode_on(&mut tape, &bound, &packed.seq, Some(&packed.segments), None)?;
    let z = model.nsp_logits_on(&mut tape, &bound, out, &[0])?;
    let y = if is_next { T::one() } else { T::zero() };
    let l = tape.bce_with_logits(z, &[y])?;
    Ok((tape.value(l).item()?, packed.truncated))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub mlm: f64,
    pub nsp: f64,
    pub masked_tokens: usize,
    pub truncated_pairs: usize,
}

/// Joint MLM + NSP loss over a batch of pairs and its parameter gradients.
/// Pairs with fewer than two content tokens contribute to NSP only.
pub fn pretrain_step<T: Scalar>(
    model: &EncoderModel<T>,
    pairs: &[PretrainPair],
    mask_ratio: f64,
    rng: &mut dyn RngCore,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<(T, PretrainLosses, Vec<Vec<T>>)> {
    if pairs.is_empty() {
        return contract("empty pretraining batch");
    }
    let max_len = model.config().max_len;
    let mut seqs = Vec::with_capacity(pairs.len());
    let mut segments = Vec::with_capacity(pairs.len());
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut cls_rows = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    let mut report = PretrainLosses::default();
    let mut offset = 0;
    for p in pairs {
        let packed = pack_pair(&p.a, &p.b, max_len)?;
        report.truncated_pairs += packed.truncated as usize;
        let seq = if packed.seq.content().len() >= 2 {
            let (masked, pos, tgt) = mask_tokens(&packed.seq, mask_ratio, rng)?;
            positions.extend(pos.iter().map(|q| q + offset));
            targets.extend(tgt);
            masked
        } else {
            packed.seq
        };
        cls_rows.push(offset);
        offset += seq.len();
        labels.push(if p.is_next { T::one() } else { T::zero() });
        seqs.push(seq);
        segments.push(packed.segments);
    }
    report.masked_tokens = positions.len();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let seg_refs: Vec<&[usize]> = segments.iter().map(Vec::as_slice).collect();
    let out = model.encode_batch_on(&mut tape, &bound, &refs, Some(&seg_refs), dropout)?;
    let z = model.nsp_logits_on(&mut tape, &bound, out, &cls_rows)?;
    let nsp = tape.bce_with_logits(z, &labels)?;
    report.nsp = tape.value(nsp).item()?.to_f64_lossy();
    let total = if positions.is_empty() {
        nsp
    } else {
        let logits = model.mlm_logits_on(&mut tape, &bound, out, &positions)?;
        let mlm = tape.cross_entropy(logits, &targets)?;
        report.mlm = tape.value(mlm).item()?.to_f64_lossy();
        tape.add(mlm, nsp)?
    };
    tape.backward(total)?;
    let value = tape.value(total).item()?;
    Ok((value, report, model.gradients(&tape, &bound)))
}
