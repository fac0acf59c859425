//! Run configuration: built-in defaults, overridden by a TOML file, overridden
//! by command-line flags. The resolved result is written next to each
//! command's outputs and can be fed back with `--config`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use polyret::encoder::EncoderConfig;
use polyret::evalmetrics::{ClickModel, DwellSigmoid, Gain, DEFAULT_PNR_CAP};
use polyret::index::AnnParams;
use polyret::retrieval::{RankerTrainConfig, DEFAULT_K_SEM, DEFAULT_K_TEXT, DEFAULT_N_OUT};
use polyret::synth::{Split, SyntheticCorpusSpec};
use polyret::training::{Stage, StageConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness; every component seed is derived from it.
    pub seed: u64,
    pub workdir: PathBuf,
    pub vocab_capacity: usize,
    pub data: SyntheticCorpusSpec,
    pub encoder: EncoderConfig,
    pub stages: Vec<StageConfig>,
    pub index: AnnParams,
    pub ranker: RankerTrainConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_sem: usize,
    pub k_text: usize,
    pub n_out: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_sem: DEFAULT_K_SEM,
            k_text: DEFAULT_K_TEXT,
            n_out: DEFAULT_N_OUT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub pnr_cap: f64,
    pub dcg_k: usize,
    pub gain: Gain,
    pub click_model: ClickModel,
    pub dwell: DwellSigmoid,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            pnr_cap: DEFAULT_PNR_CAP,
            dcg_k: 4,
            gain: Gain::Raw,
            click_model: ClickModel::default(),
            dwell: DwellSigmoid::default(),
        }
    }
}

/// The four-stage schedule the desk benchmark is tuned for.
pub fn default_stages() -> Vec<StageConfig> {
    let epochs = [1, 1, 8, 2];
    let lr = [1e-3, 1e-3, 1e-3, 1e-4];
    Stage::ALL
        .iter()
        .enumerate()
        .map(|(i, &s)| StageConfig {
            epochs: epochs[i],
            learning_rate: lr[i],
            ..StageConfig::desk(s)
        })
        .collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workdir: PathBuf::from("run"),
            vocab_capacity: 1024,
            data: SyntheticCorpusSpec::default(),
            encoder: EncoderConfig::default(),
            stages: default_stages(),
            index: AnnParams::default(),
            ranker: RankerTrainConfig::default(),
            retrieval: RetrievalConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Pushes the top-level seed into every component and checks each section.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.seed = self.seed;
        self.index.seed = self.seed;
        for s in &mut self.stages {
            s.seed = self.seed.wrapping_mul(31).wrapping_add(s.stage.number() as u64);
        }
        self.data.validate().context("invalid [data] section")?;
        self.encoder.validate().context("invalid [encoder] section")?;
        for s in &self.stages {
            s.validate().with_context(|| format!("invalid stage {}", s.stage))?;
        }
        if self.stages.windows(2).any(|w| w[0].stage >= w[1].stage) {
            bail!("stages must be listed in paradigm order without repeats");
        }
        if self.vocab_capacity <= polyret::encoder::FIRST_WORD_ID as usize {
            bail!("vocab_capacity must leave room for words after the reserved ids");
        }
        if self.retrieval.k_sem == 0 && self.retrieval.k_text == 0 {
            bail!("retrieval.k_sem and retrieval.k_text cannot both be 0");
        }
        if self.retrieval.n_out == 0 {
            bail!("retrieval.n_out must be at least 1");
        }
        if self.index.n_clusters == 0 || self.index.n_probe == 0 {
            bail!("index.n_clusters and index.n_probe must be at least 1");
        }
        if self.eval.dcg_k == 0 || !(self.eval.pnr_cap > 0.0) {
            bail!("eval.dcg_k and eval.pnr_cap must be positive");
        }
        Ok(self)
    }

    /// Keeps only the listed stages (numbers 1 to 4), in paradigm order.
    pub fn select_stages(&mut self, numbers: &[usize]) -> Result<()> {
        let mut wanted = Vec::new();
        for &n in numbers {
            let stage = Stage::from_number(n)?;
            let cfg = self
                .stages
                .iter()
                .find(|c| c.stage == stage)
                .cloned()
                .unwrap_or_else(|| StageConfig::desk(stage));
            wanted.push(cfg);
        }
        wanted.sort_by_key(|c| c.stage);
        wanted.dedup_by_key(|c| c.stage);
        if wanted.is_empty() {
            bail!("no stages selected");
        }
        self.stages = wanted;
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.workdir.join("data")
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    /// Writes the resolved config as `<command>.config.toml` in the workdir.
    pub fn write_resolved(&self, command: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.workdir)?;
        let path = self.path(&format!("{}.config.toml", command));
        std::fs::write(&path, toml::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Parses `1,2,3` into stage numbers.
pub fn parse_stage_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad stage number {:?}", p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_of_defaults() {
        let cfg = RunConfig::default().resolve().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fall_back_to_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[retrieval]\nk_text = 0\n").unwrap();
        let cfg = cfg.resolve().unwrap();
        assert_eq!(cfg.retrieval.k_text, 0);
        assert_eq!(cfg.retrieval.k_sem, DEFAULT_K_SEM);
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.index.seed, 9);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn stage_selection() {
        let mut cfg = RunConfig::default();
        cfg.select_stages(&parse_stage_list("4, 3").unwrap()).unwrap();
        let stages: Vec<Stage> = cfg.stages.iter().map(|s| s.stage).collect();
        assert_eq!(stages, vec![Stage::IntermediateFt, Stage::TargetFt]);
        assert_eq!(cfg.stages[1].learning_rate, 1e-4);
        assert!(cfg.select_stages(&[5]).is_err());
        assert!(parse_stage_list("1,x").is_err());
    }
}
