//! The four-stage training paradigm: MLM + NSP pretraining on documents,
//! MLM + NSP post-pretraining on query–title pairs, contrastive fine-tuning on
//! click-log triplets and on graded-label triplets.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    clip_global_norm, contrastive_step, pretrain_step, Adam, AdamConfig, Batch, ClickGroups, LrSchedule,
    NegativePolicy, PretrainPair, TrainExample,
};
use crate::encoder::{Dropout, EncoderModel, ScoreMode, TokenSequence};
use crate::error::{contract, Result};
use crate::evalmetrics::{pnr, recall_at_k, EvalRecord, ScoredDoc, DEFAULT_PNR_CAP};
use crate::index::{AnnIndex, AnnParams};
use crate::scalar::{dot, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    PostPretrain,
    IntermediateFt,
    TargetFt,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::PostPretrain, Stage::IntermediateFt, Stage::TargetFt];

    /// Position in the paradigm, 1 to 4.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn from_number(n: usize) -> Result<Self> {
        match n {
            1..=4 => Ok(Self::ALL[n - 1]),
            _ => contract(format!("stage {} is not in 1..=4", n)),
        }
    }

    pub fn objectives(self) -> &'static [Objective] {
        match self {
            Stage::Pretrain | Stage::PostPretrain => &[Objective::Mlm, Objective::Nsp],
            Stage::IntermediateFt | Stage::TargetFt => &[Objective::Contrastive],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Pretrain => "pretrain",
            Stage::PostPretrain => "post_pretrain",
            Stage::IntermediateFt => "intermediate_ft",
            Stage::TargetFt => "target_ft",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mlm,
    Nsp,
    Contrastive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Learning rate at the end of the stage as a fraction of the peak.
    pub decay: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub mask_ratio: f64,
    pub negative_policy: NegativePolicy,
    /// Score each query against every document in its batch; when off only
    /// its own positive and strong negative compete.
    pub in_batch_negatives: bool,
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Run validation after every epoch rather than only after the last.
    pub validate_each_epoch: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::desk(Stage::IntermediateFt)
    }
}

impl StageConfig {
    /// Desk-scale defaults.
    pub fn desk(stage: Stage) -> Self {
        Self {
            stage,
            learning_rate: 1e-3,
            batch_size: 32,
            warmup_steps: 200,
            decay: 0.01,
            epochs: 1,
            temperature: 1.0,
            mask_ratio: 0.15,
            negative_policy: NegativePolicy::SampleOne,
            in_batch_negatives: true,
            clip_norm: Some(1.0),
            adam: AdamConfig::default(),
            seed: 0,
            validate_each_epoch: false,
        }
    }

    /// Published production settings.
    pub fn production(stage: Stage) -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 160,
            warmup_steps: 4000,
            ..Self::desk(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return contract("batch_size and epochs must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return contract("learning_rate and temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.decay) || !(0.0..=1.0).contains(&self.mask_ratio) {
            return contract("decay and mask_ratio must lie in [0, 1]");
        }
        if self.stage.objectives() == [Objective::Contrastive] && self.batch_size < 2 {
            return contract("contrastive stages need batch_size >= 2 for in-batch negatives");
        }
        Ok(())
    }
}

/// Training data of one stage.
#[derive(Clone, Debug)]
pub enum StageData {
    /// Sentence pairs that belong together; negatives for next-sentence
    /// prediction replace `b` with a random entry of `negative_pool`.
    Pairs {
        pairs: Vec<PretrainPair>,
        negative_pool: Vec<Vec<u32>>,
    },
    /// Click-log groups; strong negatives are re-drawn every epoch.
    ClickLog(ClickGroups),
    Triplets(Vec<TrainExample>),
}

impl StageData {
    fn is_empty(&self) -> bool {
        match self {
            StageData::Pairs { pairs, .. } => pairs.is_empty(),
            StageData::ClickLog(g) => g.groups.is_empty(),
            StageData::Triplets(t) => t.is_empty(),
        }
    }

    fn fits(&self, stage: Stage) -> bool {
        matches!(
            (self, stage),
            (StageData::Pairs { .. }, Stage::Pretrain | Stage::PostPretrain)
                | (StageData::ClickLog(_) | StageData::Triplets(_), Stage::IntermediateFt)
                | (StageData::Triplets(_), Stage::TargetFt)
        )
    }

    /// Examples per epoch (fixed for every policy).
    fn epoch_len(&self, policy: NegativePolicy) -> usize {
        match self {
            StageData::Pairs { pairs, .. } => pairs.len(),
            StageData::ClickLog(g) => g
                .groups
                .iter()
                .map(|g| match policy {
                    NegativePolicy::SampleOne => g.positives.len(),
                    NegativePolicy::SampleAll => g.positives.len() * g.negatives.len(),
                })
                .sum(),
            StageData::Triplets(t) => t.len(),
        }
    }
}

/// One held-out query: its relevant documents and its judged documents.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationQuery {
    pub query_id: u64,
    pub seq: TokenSequence,
    pub relevant: Vec<u64>,
    /// `(doc_id, grade)` pairs; every id must be in the corpus.
    pub judged: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationSet {
    pub doc_ids: Vec<u64>,
    pub docs: Vec<TokenSequence>,
    pub queries: Vec<ValidationQuery>,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub recall_at_10: f64,
    /// PNR with prediction-time (mean-pooled) scoring.
    pub pnr: f64,
    pub pnr_capped_queries: usize,
    pub queries: usize,
}

/// Corpus and query embeddings of one model over a validation set.
pub struct EmbeddedValidation<T> {
    pub doc_embeddings: Vec<Vec<T>>,
    pub query_embeddings: Vec<Vec<T>>,
}

impl ValidationSet {
    pub fn embed<T: Scalar>(&self, model: &EncoderModel<T>) -> Result<EmbeddedValidation<T>> {
        let seqs: Vec<TokenSequence> = self.queries.iter().map(|q| q.seq.clone()).collect();
        Ok(EmbeddedValidation {
            doc_embeddings: model.embed_documents(&self.docs)?,
            query_embeddings: model.embed_queries(&seqs)?,
        })
    }

    /// Mean Recall@k of exact top-k retrieval over the corpus.
    pub fn recall<T: Scalar>(&self, emb: &EmbeddedValidation<T>) -> Result<f64> {
        if self.queries.is_empty() {
            return contract("validation set has no queries");
        }
        let index = AnnIndex::build(&self.doc_ids, &emb.doc_embeddings, &AnnParams::default())?;
        let mut total = 0.0;
        for (q, e) in self.queries.iter().zip(&emb.query_embeddings) {
            let hits = index.search(e, self.k)?;
            total += recall_at_k(&hits.ids(), &q.relevant, self.k)?;
        }
        Ok(total / self.queries.len() as f64)
    }

    /// Judged-document records scored with `mode` (mean-pooled prediction or max over codes).
    pub fn eval_records<T: Scalar>(
        &self,
        model: &EncoderModel<T>,
        emb: &EmbeddedValidation<T>,
        mode: ScoreMode,
    ) -> Result<Vec<EvalRecord>> {
        let row: HashMap<u64, usize> = self.doc_ids.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let mut out = Vec::with_capacity(self.queries.len());
        for (q, qe) in self.queries.iter().zip(&emb.query_embeddings) {
            let reps = match mode {
                ScoreMode::Predict => None,
                ScoreMode::Train => Some(model.query_reps(&q.seq)?),
            };
            let mut docs = Vec::with_capacity(q.judged.len());
            for &(doc_id, label) in &q.judged {
                let Some(&r) = row.get(&doc_id) else {
                    return contract(format!("judged doc {} is not in the validation corpus", doc_id));
                };
                let d = &emb.doc_embeddings[r];
                let score = match &reps {
                    None => dot(qe, d),
                    Some(p) => (0..p.rows()).map(|i| dot(p.row(i), d)).fold(T::neg_infinity(), T::max),
                };
                docs.push(ScoredDoc {
                    doc_id,
                    label,
                    score: score.to_f64_lossy(),
                });
            }
            out.push(EvalRecord {
                query_id: q.query_id,
                docs,
            });
        }
        Ok(out)
    }

    pub fn evaluate<T: Scalar>(&self, model: &EncoderModel<T>) -> Result<ValidationMetrics> {
        let emb = self.embed(model)?;
        let recall_at_10 = self.recall(&emb)?;
        let report = pnr(&self.eval_records(model, &emb, ScoreMode::Predict)?, DEFAULT_PNR_CAP)?;
        Ok(ValidationMetrics {
            recall_at_10,
            pnr: report.mean,
            pnr_capped_queries: report.capped_queries,
            queries: self.queries.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    /// Mean masked-token / next-sentence parts for pretraining stages.
    pub mlm_loss: Option<f64>,
    pub nsp_loss: Option<f64>,
    pub validation: Option<ValidationMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub objectives: Vec<Objective>,
    pub config: StageConfig,
    pub examples_per_epoch: usize,
    pub skipped_queries: usize,
    pub truncated_pairs: usize,
    pub total_steps: usize,
    pub epochs: Vec<EpochReport>,
    pub validation: Option<ValidationMetrics>,
}

fn nsp_epoch(pairs: &[PretrainPair], pool: &[Vec<u32>], rng: &mut ChaCha8Rng) -> Vec<PretrainPair> {
    let mut out: Vec<PretrainPair> = pairs
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.is_next = true;
            if !pool.is_empty() && rng.gen::<bool>() {
                for _ in 0..8 {
                    let cand = &pool[rng.gen_range(0..pool.len())];
                    if *cand != p.b {
                        q.b = cand.clone();
                        q.is_next = false;
                        break;
                    }
                }
            }
            q
        })
        .collect();
    out.shuffle(rng);
    out
}

/// Trains `model` in place for one stage.
pub fn run_stage<T: Scalar>(
    model: &mut EncoderModel<T>,
    cfg: &StageConfig,
    data: &StageData,
    validation: Option<&ValidationSet>,
) -> Result<StageReport> {
    cfg.validate()?;
    if data.is_empty() {
        return contract(format!("no training data for stage {}", cfg.stage));
    }
    if !data.fits(cfg.stage) {
        return contract(format!("data does not match stage {}", cfg.stage));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d0d0);
    let per_epoch = data.epoch_len(cfg.negative_policy);
    let contrastive = cfg.stage.objectives() == [Objective::Contrastive];
    let batches_per_epoch = if contrastive {
        // A trailing single example cannot form in-batch negatives and is dropped.
        per_epoch / cfg.batch_size + usize::from(per_epoch % cfg.batch_size >= 2)
    } else {
        per_epoch.div_ceil(cfg.batch_size)
    };
    if batches_per_epoch == 0 {
        return contract("not enough examples for a single batch");
    }
    let total_steps = batches_per_epoch * cfg.epochs;
    let schedule = LrSchedule {
        peak: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps.min(total_steps / 2),
        total_steps,
        final_fraction: cfg.decay,
    };
    let mut adam = Adam::new(model, cfg.adam);
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut truncated_pairs = 0;
    let skipped_queries = match data {
        StageData::ClickLog(g) => g.skipped_queries,
        _ => 0,
    };
    let temperature = T::of(cfg.temperature);
    let rate = model.config().dropout;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut mlm_sum = 0.0;
        let mut nsp_sum = 0.0;
        let mut steps = 0;
        match data {
            StageData::Pairs { pairs, negative_pool } => {
                let epoch_pairs = nsp_epoch(pairs, negative_pool, &mut rng);
                for chunk in epoch_pairs.chunks(cfg.batch_size) {
                    let mut dropout = Dropout {
                        rate,
                        rng: &mut drop_rng,
                    };
                    let (loss, parts, mut grads) =
                        pretrain_step(model, chunk, cfg.mask_ratio, &mut rng, Some(&mut dropout))?;
                    truncated_pairs += parts.truncated_pairs;
                    if let Some(c) = cfg.clip_norm {
                        clip_global_norm(&mut grads, c);
                    }
                    adam.step(model, &grads, schedule.at(step))?;
                    step += 1;
                    steps += 1;
                    loss_sum += loss.to_f64_lossy();
                    mlm_sum += parts.mlm;
                    nsp_sum += parts.nsp;
                }
            }
            StageData::ClickLog(_) | StageData::Triplets(_) => {
                let mut examples = match data {
                    StageData::ClickLog(g) => g.expand(cfg.negative_policy, &mut rng),
                    StageData::Triplets(t) => t.clone(),
                    StageData::Pairs { .. } => unreachable!(),
                };
                examples.shuffle(&mut rng);
                for chunk in examples.chunks(cfg.batch_size) {
                    if chunk.len() < 2 {
                        continue;
                    }
                    let batch = Batch::new(chunk.to_vec())?;
                    let mut dropout = Dropout {
                        rate,
                        rng: &mut drop_rng,
                    };
                    let (loss, mut grads) =
                        contrastive_step(
                        model,
                        &batch,
                        temperature,
                        ScoreMode::Train,
                        cfg.in_batch_negatives,
                        Some(&mut dropout),
                    )?;
                    if let Some(c) = cfg.clip_norm {
                        clip_global_norm(&mut grads, c);
                    }
                    adam.step(model, &grads, schedule.at(step))?;
                    step += 1;
                    steps += 1;
                    loss_sum += loss.to_f64_lossy();
                }
            }
        }
        let last = epoch + 1 == cfg.epochs;
        let validation = match validation {
            Some(v) if cfg.validate_each_epoch || last => Some(v.evaluate(model)?),
            _ => None,
        };
        let mean = |s: f64| s / steps.max(1) as f64;
        epochs.push(EpochReport {
            epoch,
            mean_loss: mean(loss_sum),
            steps,
            mlm_loss: (!contrastive).then(|| mean(mlm_sum)),
            nsp_loss: (!contrastive).then(|| mean(nsp_sum)),
            validation,
        });
    }
    let validation = epochs.last().and_then(|e| e.validation.clone());
    Ok(StageReport {
        stage: cfg.stage,
        objectives: cfg.stage.objectives().to_vec(),
        config: cfg.clone(),
        examples_per_epoch: per_epoch,
        skipped_queries,
        truncated_pairs,
        total_steps: step,
        epochs,
        validation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// Validation metrics before any training.
    pub initial: Option<ValidationMetrics>,
    pub stages: Vec<StageReport>,
}

/// Runs stages in paradigm order (stages may be skipped, never reordered or repeated).
pub fn train_pipeline<T: Scalar>(
    model: &mut EncoderModel<T>,
    stages: &[(StageConfig, StageData)],
    validation: Option<&ValidationSet>,
) -> Result<PipelineReport> {
    if stages.is_empty() {
        return contract("empty stage list");
    }
    if stages.windows(2).any(|w| w[0].0.stage >= w[1].0.stage) {
        return contract("stages must follow pretrain < post_pretrain < intermediate_ft < target_ft");
    }
    let initial = validation.map(|v| v.evaluate(model)).transpose()?;
    let mut reports = Vec::with_capacity(stages.len());
    for (cfg, data) in stages {
        reports.push(run_stage(model, cfg, data, validation)?);
    }
    Ok(PipelineReport {
        initial,
        stages: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn model() -> EncoderModel<f64> {
        let cfg = EncoderConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 16,
            max_len: 8,
            context_codes: 2,
            d_compress: 4,
            dropout: 0.1,
            ..EncoderConfig::default()
        };
        EncoderModel::new(cfg, 1).unwrap()
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::from_content(ids)
    }

    fn triplets() -> Vec<TrainExample> {
        (0..6u32)
            .map(|i| TrainExample {
                query: seq(&[4 + i, 10]),
                positive: seq(&[4 + i, 11]),
                strong_negative: seq(&[4 + (i + 1) % 6, 11]),
            })
            .collect()
    }

    fn quick(stage: Stage) -> StageConfig {
        StageConfig {
            batch_size: 3,
            warmup_steps: 2,
            epochs: 3,
            learning_rate: 1e-2,
            ..StageConfig::desk(stage)
        }
    }

    #[test]
    fn stage_numbers_and_objectives() {
        assert_eq!(Stage::from_number(3).unwrap(), Stage::IntermediateFt);
        assert!(Stage::from_number(0).is_err());
        assert_eq!(Stage::Pretrain.objectives(), &[Objective::Mlm, Objective::Nsp]);
        assert_eq!(Stage::TargetFt.objectives(), &[Objective::Contrastive]);
        assert_eq!(Stage::PostPretrain.to_string(), "post_pretrain");
    }

    #[test]
    fn contrastive_stage_is_deterministic_and_learns() {
        let data = StageData::Triplets(triplets());
        let cfg = StageConfig { epochs: 30, ..quick(Stage::TargetFt) };
        let mut a = model();
        let ra = run_stage(&mut a, &cfg, &data, None).unwrap();
        let mut b = model();
        run_stage(&mut b, &cfg, &data, None).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_eq!(ra.total_steps, 60);
        assert!(ra.epochs.last().unwrap().mean_loss < ra.epochs[0].mean_loss);
    }

    #[test]
    fn pretraining_stage_runs() {
        let pairs: Vec<PretrainPair> = (0..5u32)
            .map(|i| PretrainPair {
                a: vec![4 + i, 5 + i],
                b: vec![9 + i],
                is_next: true,
            })
            .collect();
        let pool = (0..5u32).map(|i| vec![9 + i]).collect();
        let data = StageData::Pairs { pairs, negative_pool: pool };
        let mut m = model();
        let r = run_stage(&mut m, &quick(Stage::Pretrain), &data, None).unwrap();
        assert_eq!(r.total_steps, 6);
        assert!(r.epochs.iter().all(|e| e.mlm_loss.is_some() && e.mean_loss.is_finite()));
    }

    #[test]
    fn mismatched_or_empty_data_rejected() {
        let mut m = model();
        let empty = StageData::Triplets(Vec::new());
        assert!(run_stage(&mut m, &quick(Stage::TargetFt), &empty, None).is_err());
        let trip = StageData::Triplets(triplets());
        assert!(run_stage(&mut m, &quick(Stage::Pretrain), &trip, None).is_err());
    }

    #[test]
    fn pipeline_order_enforced() {
        let mut m = model();
        assert!(train_pipeline(&mut m, &[], None).is_err());
        let t = || StageData::Triplets(triplets());
        let bad = [(quick(Stage::TargetFt), t()), (quick(Stage::IntermediateFt), t())];
        assert!(train_pipeline(&mut m, &bad, None).is_err());
        let good = [(quick(Stage::IntermediateFt), t()), (quick(Stage::TargetFt), t())];
        assert_eq!(train_pipeline(&mut m, &good, None).unwrap().stages.len(), 2);
    }

    #[test]
    fn validation_metrics() {
        let m = model();
        let docs: Vec<TokenSequence> = (0..12u32).map(|i| seq(&[4 + i % 12])).collect();
        let v = ValidationSet {
            doc_ids: (0..12).collect(),
            docs,
            queries: vec![ValidationQuery {
                query_id: 0,
                seq: seq(&[4, 5]),
                relevant: (0..12).collect(),
                judged: vec![(0, 2.0), (1, 1.0), (2, 0.0)],
            }],
            k: 10,
        };
        let r = v.evaluate(&m).unwrap();
        assert_eq!(r.recall_at_10, 1.0);
        assert!(r.pnr >= 0.0);
    }
}
