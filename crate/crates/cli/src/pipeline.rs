//! gen-data, train, build-index and quantize, plus loading of the artifacts
//! they leave in the workdir.

use std::collections::HashMap;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use polyret::encoder::{load_checkpoint, save_checkpoint, EncoderModel, Vocab};
use polyret::evalmetrics::write_report;
use polyret::index::{AnnIndex, AnnParams, InvertedIndex};
use polyret::quantstore::{calibrate, EmbeddingStore};
use polyret::retrieval::{
    preference_pairs, train_ranker, ClickStats, FeatureVector, LinearRanker, RankerTrainReport, SearchEngine,
};
use polyret::scalar::dot;
use polyret::synth::{Split, SyntheticCorpus};
use polyret::training::{train_pipeline, PipelineReport, Stage, StageData};

use crate::config::RunConfig;

pub const VOCAB: &str = "vocab.json";
pub const MODEL: &str = "model.ckpt";
pub const RANKER: &str = "ranker.json";
pub const ANN: &str = "ann.idx";
pub const TEXT: &str = "text.idx";
pub const STORE: &str = "store.emb";

pub fn gen_data(cfg: &RunConfig) -> Result<SyntheticCorpus> {
    let corpus = cfg.data.generate()?;
    corpus.write_dir(&cfg.data_dir())?;
    cfg.write_resolved("gen-data")?;
    Ok(corpus)
}

pub fn load_corpus(cfg: &RunConfig) -> Result<SyntheticCorpus> {
    let dir = cfg.data_dir();
    SyntheticCorpus::read_dir(&dir).with_context(|| format!("loading corpus from {} (run gen-data first)", dir.display()))
}

pub fn stage_data(corpus: &SyntheticCorpus, stage: Stage, vocab: &Vocab, max_len: usize) -> StageData {
    match stage {
        Stage::Pretrain => corpus.pretrain_data(vocab),
        Stage::PostPretrain => corpus.post_pretrain_data(vocab),
        Stage::IntermediateFt => StageData::ClickLog(corpus.click_groups(vocab, max_len)),
        Stage::TargetFt => StageData::Triplets(corpus.graded_triplets(Split::Train, vocab, max_len)),
    }
}

/// Builds the vocabulary and trains a fresh encoder through the configured stages,
/// validating on the validation split.
pub fn train_encoder(cfg: &RunConfig, corpus: &SyntheticCorpus) -> Result<(EncoderModel<f64>, Vocab, PipelineReport)> {
    let vocab = corpus.vocab(cfg.vocab_capacity);
    let enc = polyret::encoder::EncoderConfig {
        vocab_size: vocab.len(),
        ..cfg.encoder.clone()
    };
    let max_len = enc.max_len;
    let mut model = EncoderModel::<f64>::new(enc, cfg.seed)?;
    let validation = corpus.validation_set(Split::Valid, &vocab, max_len);
    let stages: Vec<_> = cfg
        .stages
        .iter()
        .map(|s| (s.clone(), stage_data(corpus, s.stage, &vocab, max_len)))
        .collect();
    let report = train_pipeline(&mut model, &stages, Some(&validation))?;
    Ok((model, vocab, report))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutput {
    pub pipeline: PipelineReport,
    pub ranker: RankerTrainReport,
    pub ranker_pairs: usize,
}

/// Fits the post-retrieval ranker on the training split's graded labels,
/// with features computed as the serving path would see them.
pub fn fit_ranker(
    cfg: &RunConfig,
    corpus: &SyntheticCorpus,
    model: &EncoderModel<f64>,
    vocab: &Vocab,
) -> Result<(LinearRanker, RankerTrainReport, usize)> {
    let stats = ClickStats::from_click_log(&corpus.click_log);
    let inverted = InvertedIndex::build(corpus.docs.iter().map(|d| (d.doc_id, d.title.as_str())))?;
    let max_len = model.config().max_len;
    let labels = corpus.labels_in(Split::Train);
    let titles: HashMap<u64, &str> = corpus.docs.iter().map(|d| (d.doc_id, d.title.as_str())).collect();
    let mut doc_emb: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut features = HashMap::new();
    let mut by_query: HashMap<u64, (Vec<f64>, HashMap<u64, f64>)> = HashMap::new();
    for l in &labels {
        if !by_query.contains_key(&l.query_id) {
            let q = model.embed_query(&vocab.encode(&l.query_text, max_len))?;
            let bm25 = if cfg.retrieval.k_text > 0 {
                inverted
                    .search(&l.query_text, cfg.retrieval.k_text)?
                    .hits
                    .into_iter()
                    .map(|h| (h.doc_id, h.score))
                    .collect()
            } else {
                HashMap::new()
            };
            by_query.insert(l.query_id, (q, bm25));
        }
        let (q, bm25) = &by_query[&l.query_id];
        if !doc_emb.contains_key(&l.doc_id) {
            let title = titles.get(&l.doc_id).context("label for an unknown document")?;
            doc_emb.insert(l.doc_id, model.embed_document(&vocab.encode(title, max_len))?);
        }
        let (ctr, dwell, _) = stats.lookup(l.doc_id);
        features.insert(
            (l.query_id, l.doc_id),
            FeatureVector {
                ctr,
                dwell,
                bm25: bm25.get(&l.doc_id).copied().unwrap_or(0.0),
                semantic: dot(q, &doc_emb[&l.doc_id]),
            },
        );
    }
    let judged: Vec<(u64, u64, u8)> = labels.iter().map(|l| (l.query_id, l.doc_id, l.grade)).collect();
    let pairs = preference_pairs(&judged, &features);
    let (ranker, report) = train_ranker(&pairs, &cfg.ranker)?;
    Ok((ranker, report, pairs.len()))
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    let corpus = load_corpus(cfg)?;
    let (model, vocab, pipeline) = train_encoder(cfg, &corpus)?;
    let (ranker, ranker_report, ranker_pairs) = fit_ranker(cfg, &corpus, &model, &vocab)?;
    std::fs::create_dir_all(&cfg.workdir)?;
    vocab.save(&cfg.path(VOCAB))?;
    save_checkpoint(&model, &cfg.path(MODEL))?;
    ranker.save(&cfg.path(RANKER))?;
    let out = TrainOutput {
        pipeline,
        ranker: ranker_report,
        ranker_pairs,
    };
    write_report(&cfg.path("train_report.json"), &out)?;
    cfg.write_resolved("train")?;
    Ok(out)
}

pub fn load_model(cfg: &RunConfig) -> Result<(EncoderModel<f64>, Vocab)> {
    let model = load_checkpoint(&cfg.path(MODEL)).context("loading model (run train first)")?;
    let vocab = Vocab::load(&cfg.path(VOCAB)).context("loading vocabulary")?;
    Ok((model, vocab))
}

pub fn embed_titles(corpus: &SyntheticCorpus, model: &EncoderModel<f64>, vocab: &Vocab) -> Result<(Vec<u64>, Vec<Vec<f64>>)> {
    let max_len = model.config().max_len;
    let ids = corpus.docs.iter().map(|d| d.doc_id).collect();
    let seqs: Vec<_> = corpus.docs.iter().map(|d| vocab.encode(&d.title, max_len)).collect();
    Ok((ids, model.embed_documents(&seqs)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexReport {
    pub params: AnnParams,
    pub docs: usize,
    pub dim: usize,
    pub clusters: usize,
    pub terms: usize,
    pub avg_title_terms: f64,
}

pub fn build_index(cfg: &RunConfig) -> Result<IndexReport> {
    let corpus = load_corpus(cfg)?;
    let (model, vocab) = load_model(cfg)?;
    let (ids, emb) = embed_titles(&corpus, &model, &vocab)?;
    let ann = AnnIndex::build(&ids, &emb, &cfg.index)?;
    let inverted = InvertedIndex::build(corpus.docs.iter().map(|d| (d.doc_id, d.title.as_str())))?;
    ann.save(&cfg.path(ANN))?;
    inverted.save(&cfg.path(TEXT))?;
    let report = IndexReport {
        params: cfg.index.clone(),
        docs: ann.len(),
        dim: ann.dim(),
        clusters: ann.n_clusters(),
        terms: inverted.terms().count(),
        avg_title_terms: inverted.avg_len(),
    };
    write_report(&cfg.path("index_report.json"), &report)?;
    cfg.write_resolved("build-index")?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub docs: usize,
    pub dim: usize,
    /// Dimensions whose observed range was zero and had to be widened.
    pub widened_dims: Vec<usize>,
    pub bytes_per_record: usize,
    pub full_precision_bytes_per_record: usize,
    pub max_abs_error: f64,
}

pub fn quantize(cfg: &RunConfig) -> Result<QuantizeReport> {
    let corpus = load_corpus(cfg)?;
    let (model, vocab) = load_model(cfg)?;
    let (ids, emb) = embed_titles(&corpus, &model, &vocab)?;
    let (params, widened_dims) = calibrate(&emb)?;
    let mut store = EmbeddingStore::new(params);
    let mut max_abs_error: f64 = 0.0;
    for (id, e) in ids.iter().zip(&emb) {
        store.put_embedding(*id, e)?;
        for (a, b) in store.get_dequantized(*id)?.iter().zip(e) {
            max_abs_error = max_abs_error.max((a - b).abs());
        }
    }
    store.save(&cfg.path(STORE))?;
    let dim = store.params().dim();
    let report = QuantizeReport {
        docs: store.len(),
        dim,
        widened_dims,
        bytes_per_record: store.record_bytes(),
        full_precision_bytes_per_record: 8 + 8 * dim,
        max_abs_error,
    };
    write_report(&cfg.path("quantize_report.json"), &report)?;
    cfg.write_resolved("quantize")?;
    Ok(report)
}

/// Loads every serving artifact.
pub fn load_engine(cfg: &RunConfig) -> Result<SearchEngine<f64>> {
    let corpus = load_corpus(cfg)?;
    let (model, vocab) = load_model(cfg)?;
    let ann = AnnIndex::load(&cfg.path(ANN)).context("loading ANN index (run build-index first)")?;
    let inverted = InvertedIndex::load(&cfg.path(TEXT)).context("loading text index (run build-index first)")?;
    let store = EmbeddingStore::load(&cfg.path(STORE)).context("loading embedding store (run quantize first)")?;
    let ranker = LinearRanker::load(&cfg.path(RANKER)).context("loading ranker (run train first)")?;
    Ok(SearchEngine {
        model,
        vocab,
        ann,
        inverted,
        store,
        titles: corpus.docs.iter().map(|d| (d.doc_id, d.title.clone())).collect(),
        stats: ClickStats::from_click_log(&corpus.click_log),
        ranker,
        k_sem: cfg.retrieval.k_sem,
        k_text: cfg.retrieval.k_text,
    })
}
