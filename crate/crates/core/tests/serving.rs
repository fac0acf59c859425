//! Serving path over persisted artifacts: indexes and the embedding store are
//! written, read back and queried the way the engine does.

use std::collections::HashMap;

use polyret::encoder::{EncoderConfig, EncoderModel};
use polyret::index::{AnnIndex, AnnMode, AnnParams, InvertedIndex};
use polyret::quantstore::{calibrate, EmbeddingStore};
use polyret::retrieval::{backfill_semantic, retrieve_text, ClickStats, LinearRanker, OnDemand, SearchEngine, SearchRequest};
use polyret::scalar::dot;
use polyret::synth::{Split, SyntheticCorpus, SyntheticCorpusSpec};

struct Fixture {
    corpus: SyntheticCorpus,
    model: EncoderModel<f64>,
    vocab: polyret::encoder::Vocab,
    ids: Vec<u64>,
    emb: Vec<Vec<f64>>,
}

fn fixture() -> Fixture {
    let corpus = SyntheticCorpusSpec {
        n_topics: 6,
        docs_per_topic: 15,
        queries_per_topic: 4,
        vocab_size: 120,
        seed: 11,
        ..SyntheticCorpusSpec::default()
    }
    .generate()
    .unwrap();
    let vocab = corpus.vocab(512);
    let model = EncoderModel::<f64>::new(
        EncoderConfig {
            vocab_size: vocab.len(),
            n_layers: 1,
            ..EncoderConfig::default()
        },
        5,
    )
    .unwrap();
    let max_len = model.config().max_len;
    let ids = corpus.docs.iter().map(|d| d.doc_id).collect();
    let seqs: Vec<_> = corpus.docs.iter().map(|d| vocab.encode(&d.title, max_len)).collect();
    let emb = model.embed_documents(&seqs).unwrap();
    Fixture {
        corpus,
        model,
        vocab,
        ids,
        emb,
    }
}

#[test]
fn backfilled_scores_track_full_precision_within_quantization_error() {
    let f = fixture();
    let (params, _) = calibrate(&f.emb).unwrap();
    let mut store = EmbeddingStore::new(params.clone());
    for (id, e) in f.ids.iter().zip(&f.emb) {
        store.put_embedding(*id, e).unwrap();
    }
    let ann = AnnIndex::build(&f.ids, &f.emb, &AnnParams::default()).unwrap();
    let inverted = InvertedIndex::build(f.corpus.docs.iter().map(|d| (d.doc_id, d.title.as_str()))).unwrap();
    let full: HashMap<u64, &Vec<f64>> = f.ids.iter().copied().zip(&f.emb).collect();
    let mut checked = 0;
    for q in f.corpus.queries_in(Split::Test) {
        // Text channel only, so every candidate is backfilled from the store.
        let (mut pool, qe) = retrieve_text(&q.text, &f.model, &f.vocab, &ann, &inverted, 0, 30).unwrap();
        let report = backfill_semantic(&mut pool, &qe, &store, None).unwrap();
        assert_eq!(report.from_store, pool.len());
        let bound: f64 = qe.iter().zip(&params.q).map(|(a, q)| a.abs() * q / 2.0).sum();
        for c in pool.iter() {
            let s = c.semantic_score.unwrap();
            let exact = dot(&qe, full[&c.doc_id]);
            assert!((s - exact).abs() <= bound * (1.0 + 1e-9), "{} vs {} (bound {})", s, exact, bound);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn missing_store_entries_are_encoded_on_demand_or_dropped() {
    let f = fixture();
    let (params, _) = calibrate(&f.emb).unwrap();
    let mut store = EmbeddingStore::new(params);
    for (id, e) in f.ids.iter().zip(&f.emb).skip(f.ids.len() / 2) {
        store.put_embedding(*id, e).unwrap();
    }
    let ann = AnnIndex::build(&f.ids, &f.emb, &AnnParams::default()).unwrap();
    let inverted = InvertedIndex::build(f.corpus.docs.iter().map(|d| (d.doc_id, d.title.as_str()))).unwrap();
    let titles: HashMap<u64, String> = f.corpus.docs.iter().map(|d| (d.doc_id, d.title.clone())).collect();
    let full: HashMap<u64, &Vec<f64>> = f.ids.iter().copied().zip(&f.emb).collect();
    let q = f.corpus.queries_in(Split::Test).next().unwrap();

    let (mut pool, qe) = retrieve_text(&q.text, &f.model, &f.vocab, &ann, &inverted, 0, 60).unwrap();
    let before = pool.len();
    let on_demand = OnDemand {
        model: &f.model,
        vocab: &f.vocab,
        titles: &titles,
    };
    let report = backfill_semantic(&mut pool, &qe, &store, Some(&on_demand)).unwrap();
    assert!(report.encoded > 0);
    assert_eq!(report.encoded + report.from_store, before);
    for c in pool.iter().filter(|c| store.get(c.doc_id).is_err()) {
        // Encoded documents get the full-precision score.
        assert_eq!(c.semantic_score.unwrap(), dot(&qe, full[&c.doc_id]));
    }

    let (mut pool, _) = retrieve_text(&q.text, &f.model, &f.vocab, &ann, &inverted, 0, 60).unwrap();
    let report = backfill_semantic(&mut pool, &qe, &store, None).unwrap();
    assert_eq!(report.dropped.len() + report.from_store, before);
    assert_eq!(pool.len(), report.from_store);
}

#[test]
fn persisted_artifacts_answer_identically() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (params, _) = calibrate(&f.emb).unwrap();
    let mut store = EmbeddingStore::new(params);
    for (id, e) in f.ids.iter().zip(&f.emb) {
        store.put_embedding(*id, e).unwrap();
    }
    let ivf = AnnParams {
        mode: AnnMode::Ivf,
        n_clusters: 6,
        n_probe: 2,
        ..AnnParams::default()
    };
    let ann = AnnIndex::build(&f.ids, &f.emb, &ivf).unwrap();
    let inverted = InvertedIndex::build(f.corpus.docs.iter().map(|d| (d.doc_id, d.title.as_str()))).unwrap();
    ann.save(&dir.path().join("ann.idx")).unwrap();
    inverted.save(&dir.path().join("text.idx")).unwrap();
    store.save(&dir.path().join("store.emb")).unwrap();

    let engine = |ann, inverted, store| SearchEngine {
        model: f.model.clone(),
        vocab: f.vocab.clone(),
        ann,
        inverted,
        store,
        titles: f.corpus.docs.iter().map(|d| (d.doc_id, d.title.clone())).collect(),
        stats: ClickStats::from_click_log(&f.corpus.click_log),
        ranker: LinearRanker::new([0.2, 0.01, 0.3, 1.0], 0.0),
        k_sem: 20,
        k_text: 20,
    };
    let live = engine(ann, inverted, store);
    let loaded = engine(
        AnnIndex::load(&dir.path().join("ann.idx")).unwrap(),
        InvertedIndex::load(&dir.path().join("text.idx")).unwrap(),
        EmbeddingStore::load(&dir.path().join("store.emb")).unwrap(),
    );
    for q in f.corpus.queries.iter().take(10) {
        let req = SearchRequest {
            query: q.text.clone(),
            k: 10,
        };
        let a = live.search(&req).unwrap();
        assert!(!a.results.is_empty());
        assert_eq!(a, loaded.search(&req).unwrap());
        assert_eq!(live.handle_line(&serde_json::to_string(&req).unwrap()), serde_json::to_string(&a).unwrap());
    }
}
