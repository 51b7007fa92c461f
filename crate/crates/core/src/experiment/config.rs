use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::noise::NoiseSpec;
use crate::train::{PretrainConfig, TrainConfig};

/// Version of the config document and of every CSV header written from it.
pub const SCHEMA_VERSION: u32 = 1;

/// Inference and training noise levels evaluated by default.
pub const ETA_GRID: [f64; 5] = [0.02, 0.04, 0.057, 0.073, 0.11];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: u32,
    #[serde(default = "default_calibration_batches")]
    pub calibration_batches: usize,
}

fn default_calibration_batches() -> usize {
    10
}

/// Fluctuations applied at inference; η comes from the grids and the noise
/// seed from the experiment seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceNoise {
    pub temporal_frac: f32,
    pub spatial_frac: f32,
}

impl InferenceNoise {
    pub fn spec(&self, eta: f64, seed: u64) -> NoiseSpec {
        NoiseSpec {
            eta: eta as f32,
            temporal_frac: self.temporal_frac,
            spatial_frac: self.spatial_frac,
            master_seed: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub eta_grid: Vec<f64>,
    pub runs: usize,
    /// Grid entries are multiples of each checkpoint's training η.
    pub relative: bool,
    /// Checkpoints to evaluate; empty means the run's own final checkpoint.
    pub checkpoints: Vec<PathBuf>,
    /// Test images used; 0 uses the whole test set.
    pub test_subset: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eta_grid: ETA_GRID.to_vec(),
            runs: 50,
            relative: false,
            checkpoints: Vec::new(),
            test_subset: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BvReference {
    /// `σ_N = η·σ_W` per layer: grid values are noise-to-weight std ratios.
    WeightStd,
    /// `σ_N = η·(W_max − W_min)`.
    Range,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BvConfig {
    pub grid: Vec<f64>,
    pub instances: usize,
    pub reference: BvReference,
    pub checkpoint: Option<PathBuf>,
    pub test_subset: usize,
}

impl Default for BvConfig {
    fn default() -> Self {
        Self {
            grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            instances: 100,
            reference: BvReference::WeightStd,
            checkpoint: None,
            test_subset: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiConfig {
    pub eta_grid: Vec<f64>,
    pub subset: usize,
    pub repeats: usize,
    pub bins: usize,
    /// Independent estimates (subset draw and noise) per checkpoint.
    pub seeds: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl Default for MiConfig {
    fn default() -> Self {
        let mut eta_grid = vec![0.0];
        eta_grid.extend(ETA_GRID);
        Self {
            eta_grid,
            subset: 200,
            repeats: 100,
            bins: 4,
            seeds: 3,
            checkpoints: Vec::new(),
        }
    }
}

/// One experiment. Sections not used by a subcommand are ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetKind,
    /// Dataset root; falls back to the `NOISY_NN_DATA` environment variable.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub retrain: Option<TrainConfig>,
    /// Soft-target source for retraining.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    /// Warm-start checkpoint; retraining defaults to the teacher, finetuning
    /// to this run's pretrained checkpoint.
    #[serde(default)]
    pub init: Option<PathBuf>,
    /// Non-ideal inference noise for `eval-noise`.
    #[serde(default)]
    pub noise: InferenceNoise,
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub bv: BvConfig,
    #[serde(default)]
    pub mi: MiConfig,
    /// Test images scored after every training epoch; 0 disables.
    #[serde(default)]
    pub monitor_subset: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self) -> String {
        self.hash()[..12].to_string()
    }

    /// Replaces the master seed everywhere it feeds randomness.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let Some(p) = &mut self.pretrain {
            p.train.seed = seed;
            p.finetune.seed = seed;
        }
        if let Some(r) = &mut self.retrain {
            r.seed = seed;
            r.noise.master_seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.noise.spec(0.0, self.seed).validate()?;
        if let Some(p) = &self.pretrain {
            p.train.validate()?;
            p.finetune.validate()?;
        }
        if let Some(r) = &self.retrain {
            r.validate()?;
        }
        if let Some(q) = &self.quant {
            if !(2..=16).contains(&q.bits) {
                return Err(Error::Config(format!("quant.bits must be in 2..=16, got {}", q.bits)));
            }
        }
        if self.eval.eta_grid.iter().chain(&self.mi.eta_grid).chain(&self.bv.grid).any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::Config("noise grids must hold finite non-negative values".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}
