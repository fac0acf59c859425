//! The eval and ablate commands.

use std::collections::HashMap;
use std::fmt::Write as _;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use polyret::encoder::{EncoderModel, ScoreMode, Vocab};
use polyret::evalmetrics::{
    dcg_at_k, delta_ab, delta_ab_tw, delta_gsb, pnr, recall_at_k, sign_test, simulate_interleave, write_report,
    PnrReport, QueryRankings,
};
use polyret::index::{AnnIndex, AnnParams};
use polyret::quantstore::{calibrate, dequantize, quantize, EmbeddingStore};
use polyret::retrieval::SearchEngine;
use polyret::synth::SyntheticCorpus;
use polyret::training::{EmbeddedValidation, ValidationSet};

use crate::config::RunConfig;
use crate::pipeline::{load_corpus, load_engine, train_encoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnrSummary {
    pub mean: f64,
    pub capped_queries: usize,
    pub skipped_queries: usize,
}

impl From<&PnrReport> for PnrSummary {
    fn from(r: &PnrReport) -> Self {
        Self {
            mean: r.mean,
            capped_queries: r.capped_queries,
            skipped_queries: r.skipped_queries.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub queries: usize,
    /// Exact top-10 over full-precision embeddings.
    pub recall_at_10: f64,
    pub recall_at_10_head: f64,
    pub recall_at_10_tail: f64,
    /// Mean-pooled prediction scoring.
    pub pnr: PnrSummary,
    /// Max over context codes, as in training.
    pub pnr_max: PnrSummary,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Recall and PNR of `model` on the held-out queries of `val`.
pub fn evaluate_model(
    corpus: &SyntheticCorpus,
    model: &EncoderModel<f64>,
    val: &ValidationSet,
    emb: &EmbeddedValidation<f64>,
    cap: f64,
) -> Result<ModelEval> {
    let flat = AnnIndex::build(&val.doc_ids, &emb.doc_embeddings, &AnnParams::default())?;
    let tail: HashMap<u64, bool> = corpus.queries.iter().map(|q| (q.query_id, q.tail)).collect();
    let (mut all, mut head, mut tails) = (Vec::new(), Vec::new(), Vec::new());
    for (q, e) in val.queries.iter().zip(&emb.query_embeddings) {
        let r = recall_at_k(&flat.search(e, val.k)?.ids(), &q.relevant, val.k)?;
        all.push(r);
        if tail[&q.query_id] {
            tails.push(r);
        } else {
            head.push(r);
        }
    }
    Ok(ModelEval {
        queries: val.queries.len(),
        recall_at_10: mean(&all),
        recall_at_10_head: mean(&head),
        recall_at_10_tail: mean(&tails),
        pnr: (&pnr(&val.eval_records(model, emb, ScoreMode::Predict)?, cap)?).into(),
        pnr_max: (&pnr(&val.eval_records(model, emb, ScoreMode::Train)?, cap)?).into(),
    })
}

/// Document embeddings replaced by their quantize → dequantize round trip.
pub fn with_quantized_docs(emb: &EmbeddedValidation<f64>) -> Result<EmbeddedValidation<f64>> {
    let (params, _) = calibrate(&emb.doc_embeddings)?;
    let docs = emb
        .doc_embeddings
        .iter()
        .map(|d| dequantize(&quantize(d, &params)?, &params))
        .collect::<polyret::Result<Vec<_>>>()?;
    Ok(EmbeddedValidation {
        doc_embeddings: docs,
        query_embeddings: emb.query_embeddings.clone(),
    })
}

fn from_store(emb: &EmbeddedValidation<f64>, val: &ValidationSet, store: &EmbeddingStore<f64>) -> Result<EmbeddedValidation<f64>> {
    let docs = val
        .doc_ids
        .iter()
        .map(|id| store.get_dequantized(*id))
        .collect::<polyret::Result<Vec<_>>>()?;
    Ok(EmbeddedValidation {
        doc_embeddings: docs,
        query_embeddings: emb.query_embeddings.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideBySide {
    pub good: usize,
    pub same: usize,
    pub bad: usize,
    pub delta_gsb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterleaveSummary {
    pub impressions_with_clicks: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub delta_ab: f64,
    pub delta_ab_tw: f64,
    pub sign_test_p: f64,
}

/// Full workflow (system A) against the semantic channel alone (system B).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowEval {
    pub dcg_workflow: f64,
    pub dcg_semantic_only: f64,
    pub side_by_side: SideBySide,
    pub interleave: Option<InterleaveSummary>,
    pub backfilled_from_store: usize,
    pub dropped_candidates: usize,
    pub imputed_features: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelEval,
    /// Recall@10 through the ANN index as built (flat or IVF).
    pub recall_at_10_index: f64,
    /// PNR with document embeddings read back from the quantized store.
    pub pnr_quantized: PnrSummary,
    pub workflow: WorkflowEval,
}

fn workflow_eval(cfg: &RunConfig, corpus: &SyntheticCorpus, engine: &SearchEngine<f64>) -> Result<WorkflowEval> {
    let grader = corpus.grader();
    let docs: HashMap<u64, _> = corpus.docs.iter().map(|d| (d.doc_id, d)).collect();
    let n_out = cfg.retrieval.n_out;
    let k = cfg.eval.dcg_k;
    let (mut dcg_a, mut dcg_b) = (Vec::new(), Vec::new());
    let (mut good, mut same, mut bad) = (0, 0, 0);
    let mut rankings = Vec::new();
    let mut grades = HashMap::new();
    let (mut backfilled, mut dropped, mut imputed) = (0, 0, 0);
    for q in corpus.queries_in(cfg.eval.split) {
        let trace = engine.trace(&q.text, n_out)?;
        backfilled += trace.backfill.from_store + trace.backfill.encoded;
        dropped += trace.backfill.dropped.len();
        imputed += trace.imputed.len();
        let a: Vec<u64> = trace.ranked.iter().map(|r| r.doc_id).collect();
        let q_emb = engine.model.embed_query(&engine.vocab.encode(&q.text, engine.model.config().max_len))?;
        let b = engine.ann.search(&q_emb, n_out)?.ids();
        let mut grade_of = |d: u64| -> Result<f64> {
            let doc = docs.get(&d).context("result outside the corpus")?;
            let g = grader.grade(q, doc);
            grades.insert((q.query_id, d), g);
            Ok(g as f64)
        };
        let ga = a.iter().map(|d| grade_of(*d)).collect::<Result<Vec<_>>>()?;
        let gb = b.iter().map(|d| grade_of(*d)).collect::<Result<Vec<_>>>()?;
        let (da, db) = (dcg_at_k(&ga, k, cfg.eval.gain)?.value, dcg_at_k(&gb, k, cfg.eval.gain)?.value);
        if da > db + 1e-9 {
            good += 1;
        } else if db > da + 1e-9 {
            bad += 1;
        } else {
            same += 1;
        }
        dcg_a.push(da);
        dcg_b.push(db);
        rankings.push(QueryRankings {
            query_id: q.query_id,
            a,
            b,
        });
    }
    let log = simulate_interleave(&rankings, &grades, &cfg.eval.click_model, cfg.seed)?;
    let interleave = if log.events.is_empty() {
        None
    } else {
        let (wins_a, wins_b, ties) = log.counts();
        Some(InterleaveSummary {
            impressions_with_clicks: log.events.len(),
            wins_a,
            wins_b,
            ties,
            delta_ab: delta_ab(&log)?,
            delta_ab_tw: delta_ab_tw(&log, cfg.eval.dwell)?,
            sign_test_p: sign_test(&log),
        })
    };
    Ok(WorkflowEval {
        dcg_workflow: mean(&dcg_a),
        dcg_semantic_only: mean(&dcg_b),
        side_by_side: SideBySide {
            good,
            same,
            bad,
            delta_gsb: delta_gsb(good, same, bad)?,
        },
        interleave,
        backfilled_from_store: backfilled,
        dropped_candidates: dropped,
        imputed_features: imputed,
    })
}

pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let corpus = load_corpus(cfg)?;
    let engine = load_engine(cfg)?;
    let val = corpus.validation_set(cfg.eval.split, &engine.vocab, engine.model.config().max_len);
    let emb = val.embed(&engine.model)?;
    let model = evaluate_model(&corpus, &engine.model, &val, &emb, cfg.eval.pnr_cap)?;
    let mut index_recall = Vec::new();
    for (q, e) in val.queries.iter().zip(&emb.query_embeddings) {
        index_recall.push(recall_at_k(&engine.ann.search(e, val.k)?.ids(), &q.relevant, val.k)?);
    }
    let quantized = from_store(&emb, &val, &engine.store)?;
    let pnr_quantized = (&pnr(&val.eval_records(&engine.model, &quantized, ScoreMode::Predict)?, cfg.eval.pnr_cap)?).into();
    let report = EvalReport {
        model,
        recall_at_10_index: mean(&index_recall),
        pnr_quantized,
        workflow: workflow_eval(cfg, &corpus, &engine)?,
    };
    write_report(&cfg.path("eval_report.json"), &report)?;
    cfg.write_resolved("eval")?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub recall_at_10: f64,
    pub pnr: f64,
    pub pnr_capped_queries: usize,
    pub bytes_per_doc: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Stage subsets; the first row is the full four-stage schedule.
    pub stages: Vec<AblationRow>,
    /// Architecture and training features layered onto a plain bi-encoder.
    pub features: Vec<AblationRow>,
}

fn stage_label(cfg: &RunConfig) -> String {
    cfg.stages.iter().map(|s| s.stage.number().to_string()).collect::<Vec<_>>().join(",")
}

fn ablation_row(
    variant: String,
    cfg: &RunConfig,
    corpus: &SyntheticCorpus,
    quantized: bool,
) -> Result<(AblationRow, EncoderModel<f64>, Vocab)> {
    let (model, vocab, _) = train_encoder(cfg, corpus)?;
    let row = score_row(variant, cfg, corpus, &model, &vocab, quantized)?;
    Ok((row, model, vocab))
}

fn score_row(
    variant: String,
    cfg: &RunConfig,
    corpus: &SyntheticCorpus,
    model: &EncoderModel<f64>,
    vocab: &Vocab,
    quantized: bool,
) -> Result<AblationRow> {
    let val = corpus.validation_set(cfg.eval.split, vocab, model.config().max_len);
    let mut emb = val.embed(model)?;
    if quantized {
        emb = with_quantized_docs(&emb)?;
    }
    let m = evaluate_model(corpus, model, &val, &emb, cfg.eval.pnr_cap)?;
    let dim = model.config().output_dim();
    Ok(AblationRow {
        variant,
        recall_at_10: m.recall_at_10,
        pnr: m.pnr.mean,
        pnr_capped_queries: m.pnr.capped_queries,
        bytes_per_doc: 8 + if quantized { dim } else { 8 * dim },
    })
}

/// Trains one model per stage subset (the full schedule always comes first)
/// and, with `features`, the feature-layering series over stages 1–3.
pub fn ablate(cfg: &RunConfig, stage_sets: &[Vec<usize>], features: bool) -> Result<AblationReport> {
    let corpus = load_corpus(cfg)?;
    let mut report = AblationReport::default();
    let full = vec![1, 2, 3, 4];
    let mut sets = vec![full.clone()];
    sets.extend(stage_sets.iter().filter(|s| **s != full).cloned());
    let base = cfg.clone();
    for set in &sets {
        let mut c = base.clone();
        c.select_stages(set)?;
        let c = c.resolve()?;
        let label = format!("stages {}", stage_label(&c));
        report.stages.push(ablation_row(label, &c, &corpus, false)?.0);
    }
    if features {
        let mut c = base.clone();
        c.select_stages(&[1, 2, 3])?;
        let layer = |poly: bool, ibn: bool, compression: bool| {
            let mut v = c.clone();
            v.encoder.poly = poly;
            v.encoder.compression = compression;
            for s in &mut v.stages {
                s.in_batch_negatives = ibn;
            }
            v.resolve()
        };
        report.features.push(ablation_row("base".into(), &layer(false, false, false)?, &corpus, false)?.0);
        report.features.push(ablation_row("+poly".into(), &layer(true, false, false)?, &corpus, false)?.0);
        report.features.push(ablation_row("+in-batch negatives".into(), &layer(true, true, false)?, &corpus, false)?.0);
        let last = layer(true, true, true)?;
        let (row, model, vocab) = ablation_row("+compression".into(), &last, &corpus, false)?;
        report.features.push(row);
        report.features.push(score_row("+quantization".into(), &last, &corpus, &model, &vocab, true)?);
    }
    std::fs::create_dir_all(&cfg.workdir)?;
    write_report(&cfg.path("ablate_report.json"), &report)?;
    cfg.write_resolved("ablate")?;
    Ok(report)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}  {:>9}  {:>8}  {:>6}  {:>9}\n", "variant", "Recall@10", "PNR", "capped", "bytes/doc");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>8.3}  {:>6}  {:>9}",
            r.variant, r.recall_at_10, r.pnr, r.pnr_capped_queries, r.bytes_per_doc
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_docs_keep_queries_and_stay_close() {
        let emb = EmbeddedValidation {
            doc_embeddings: vec![vec![0.0, -1.0], vec![0.5, 2.0], vec![1.0, 0.25]],
            query_embeddings: vec![vec![0.3, 0.7]],
        };
        let q = with_quantized_docs(&emb).unwrap();
        assert_eq!(q.query_embeddings, emb.query_embeddings);
        for (a, b) in q.doc_embeddings.iter().zip(&emb.doc_embeddings) {
            assert!((a[0] - b[0]).abs() <= 0.5 / 255.0 + 1e-15);
            assert!((a[1] - b[1]).abs() <= 1.5 / 255.0 + 1e-15);
        }
    }

    #[test]
    fn table_has_one_line_per_row() {
        let row = |v: &str| AblationRow {
            variant: v.into(),
            recall_at_10: 0.5,
            pnr: 3.25,
            pnr_capped_queries: 2,
            bytes_per_doc: 24,
        };
        let t = format_table(&[row("stages 1,2,3,4"), row("stages 3")]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("variant"));
        assert!(lines[2].starts_with("stages 3 ") && lines[2].contains("0.5000") && lines[2].contains("3.250"));
    }

    #[test]
    fn mean_of_nothing_is_zero() {
        assert_eq!(mean(&[]), 0.0);
        assert_eq!(mean(&[1.0, 2.0]), 1.5);
    }
}
