use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SynthConfig;
use crate::detector::DetectorConfig;
use crate::dualview::{DualViewConfig, LossConfig};
use crate::error::{Error, Result};
use crate::fsio;
use crate::injector::InjectionKnobs;
use crate::numkit::SeededRng;
use crate::optim::TrainConfig;
use crate::rectifier::{InfluenceConfig, RectifyConfig};
use crate::seqrec::ModelConfig;

/// Where interactions and semantic embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synth(SynthSource),
    File(FileSource),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth(SynthSource::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSource {
    pub corpus: SynthConfig,
    pub semantic_dim: usize,
    pub semantic_noise: f64,
}

impl Default for SynthSource {
    fn default() -> Self {
        SynthSource {
            corpus: SynthConfig::default(),
            semantic_dim: 64,
            semantic_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSource {
    /// `user<TAB>item<TAB>timestamp` lines.
    pub interactions: PathBuf,
    /// `item<TAB>v1<TAB>...` lines, one per kept item.
    pub semantics: PathBuf,
    #[serde(default = "five")]
    pub min_user: usize,
    #[serde(default = "five")]
    pub min_item: usize,
}

fn five() -> usize {
    5
}

/// The deployed recommender: architecture plus training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetSpec {
    pub hidden: usize,
    pub max_len: usize,
    pub init_scale: f64,
    pub train: TrainConfig,
}

impl Default for TargetSpec {
    fn default() -> Self {
        let m = ModelConfig::default();
        TargetSpec {
            hidden: m.hidden,
            max_len: m.max_len,
            init_scale: m.init_scale,
            train: TrainConfig::default(),
        }
    }
}

impl TargetSpec {
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            hidden: self.hidden,
            max_len: self.max_len,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualViewSpec {
    pub hidden: usize,
    pub max_len: usize,
    pub lambda1: f64,
    pub init_scale: f64,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for DualViewSpec {
    fn default() -> Self {
        let m = DualViewConfig::default();
        DualViewSpec {
            hidden: m.hidden,
            max_len: m.max_len,
            lambda1: m.lambda1,
            init_scale: m.init_scale,
            loss: LossConfig::default(),
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
        }
    }
}

impl DualViewSpec {
    pub fn model_config(&self, vocab: usize) -> DualViewConfig {
        DualViewConfig {
            vocab,
            hidden: self.hidden,
            max_len: self.max_len,
            lambda1: self.lambda1,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub negatives: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![10, 20],
            negatives: 100,
        }
    }
}

/// Variants of the fake-order effect study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    /// One repetitive-only variant per run length.
    pub repeat_lengths: Vec<usize>,
    pub semantic: bool,
    pub sequential: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seeds: vec![42, 43],
            repeat_lengths: vec![3],
            semantic: true,
            sequential: true,
        }
    }
}

/// One JSON document describing a whole experiment. Every stochastic stage
/// draws from `SeededRng::new(seed).derive(<stage label>)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    /// `user_ratio = 0` or `intensity = 0` disables injection.
    pub injection: InjectionKnobs,
    pub target: TargetSpec,
    pub dual_view: DualViewSpec,
    pub detector: DetectorConfig,
    pub influence: InfluenceConfig,
    pub rectify: RectifyConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            dataset: DatasetSource::default(),
            injection: InjectionKnobs::default(),
            target: TargetSpec::default(),
            dual_view: DualViewSpec::default(),
            detector: DetectorConfig::default(),
            influence: InfluenceConfig::default(),
            rectify: RectifyConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = fsio::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn injection_enabled(&self) -> bool {
        self.injection.user_ratio > 0.0 && self.injection.intensity > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.injection_enabled() {
            self.injection.validate()?;
        } else if self.injection.user_ratio < 0.0 || self.injection.intensity < 0.0 {
            return Err(Error::invalid("injection ratios must be non-negative"));
        }
        self.target.model_config(2).validate()?;
        self.dual_view.loss.validate()?;
        self.detector.validate()?;
        self.influence.validate()?;
        self.rectify.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::invalid("eval.ks must be non-empty and positive"));
        }
        if !self.eval.ks.contains(&10) {
            return Err(Error::invalid(
                "eval.ks must include 10 (rectification monitors NDCG@10)",
            ));
        }
        if let DatasetSource::Synth(s) = &self.dataset {
            if s.semantic_dim < self.dual_view.hidden {
                return Err(Error::invalid(format!(
                    "semantic_dim {} is below the dual-view width {}",
                    s.semantic_dim, self.dual_view.hidden
                )));
            }
        }
        Ok(())
    }

    pub fn root_rng(&self) -> SeededRng {
        SeededRng::new(self.seed)
    }

    pub fn stage_rng(&self, label: &str) -> SeededRng {
        self.root_rng().derive(label)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
