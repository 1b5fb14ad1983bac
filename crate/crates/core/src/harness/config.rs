//! The experiment configuration document and its command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoise::DiffusionParams;
use crate::error::{Error, Result};
use crate::nn::{OptimizerKind, TrainConfig, ViTConfig};
use crate::rng::derive_seed;
use crate::smote::{SmoteParams, Target};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "NEUROSCAN_SEED";
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    #[default]
    MiniCnn,
    ToyVit,
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini_cnn" => Ok(ArchKind::MiniCnn),
            "toy_vit" => Ok(ArchKind::ToyVit),
            other => Err(Error::Config(format!(
                "architecture must be mini_cnn or toy_vit, got {other:?}"
            ))),
        }
    }
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::MiniCnn => "mini_cnn",
            ArchKind::ToyVit => "toy_vit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train_fraction: 0.8 }
    }
}

/// Square side each architecture's inputs are resized to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResizeSection {
    pub mini_cnn: usize,
    pub toy_vit: usize,
}

impl Default for ResizeSection {
    fn default() -> Self {
        ResizeSection {
            mini_cnn: 224,
            toy_vit: 72,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoteSection {
    pub k_neighbors: usize,
    pub target_per_class: Target,
}

impl Default for SmoteSection {
    fn default() -> Self {
        let p = SmoteParams::default();
        SmoteSection {
            k_neighbors: p.k_neighbors,
            target_per_class: p.target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
        }
    }
}

/// One experiment. Every field has a default, so `{"schema_version": 1}`
/// is a complete document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub split: SplitSection,
    pub diffusion: DiffusionParams,
    pub resize: ResizeSection,
    pub smote: SmoteSection,
    pub arch: ArchKind,
    pub vit: ViTConfig,
    pub train: TrainSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset_root: None,
            output_dir: PathBuf::from("out"),
            seed: None,
            split: SplitSection::default(),
            diffusion: DiffusionParams::default(),
            resize: ResizeSection::default(),
            smote: SmoteSection::default(),
            arch: ArchKind::default(),
            vit: ViTConfig::default(),
            train: TrainSection::default(),
        }
    }
}

/// Values given on the command line; each replaces the matching config field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dataset_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub arch: Option<ArchKind>,
    pub iterations: Option<usize>,
    pub kappa: Option<f64>,
    pub lambda: Option<f64>,
    pub k_neighbors: Option<usize>,
    pub target: Option<Target>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

/// Per-stage seeds fanned out from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub experiment: u64,
    pub split: u64,
    pub smote: u64,
    pub init: u64,
    pub train: u64,
}

impl StageSeeds {
    pub fn from_experiment(seed: u64) -> Self {
        StageSeeds {
            experiment: seed,
            split: derive_seed(seed, "split"),
            smote: derive_seed(seed, "smote"),
            init: derive_seed(seed, "init"),
            train: derive_seed(seed, "train"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = Some(v);
        }
        if let Some(v) = &o.dataset_root {
            self.dataset_root = Some(v.clone());
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.arch {
            self.arch = v;
        }
        if let Some(v) = o.iterations {
            self.diffusion.iterations = v;
        }
        if let Some(v) = o.kappa {
            self.diffusion.kappa = v;
        }
        if let Some(v) = o.lambda {
            self.diffusion.lambda = v;
        }
        if let Some(v) = o.k_neighbors {
            self.smote.k_neighbors = v;
        }
        if let Some(v) = o.target {
            self.smote.target_per_class = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
    }

    /// Config seed, else `env_seed` (the value of `NEUROSCAN_SEED`), else 0.
    /// A `--seed` flag reaches here already folded into `self.seed`.
    pub fn resolve_seed(&self, env_seed: Option<&str>) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match env_seed {
            Some(v) => v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))
            }),
            None => Ok(DEFAULT_SEED),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("split.train_fraction must lie in (0, 1), got {f}")));
        }
        self.diffusion
            .validate()
            .map_err(|e| Error::Config(format!("diffusion: {e}")))?;
        if self.smote.k_neighbors == 0 {
            return Err(Error::Config("smote.k_neighbors must be at least 1".into()));
        }
        if self.resize.mini_cnn < 4 || self.resize.toy_vit == 0 {
            return Err(Error::Config("resize targets are too small".into()));
        }
        if self.arch == ArchKind::ToyVit && self.resize.toy_vit != self.vit.image_size {
            return Err(Error::Config(format!(
                "resize.toy_vit ({}) must equal vit.image_size ({})",
                self.resize.toy_vit, self.vit.image_size
            )));
        }
        self.vit.validate().map_err(|e| Error::Config(format!("vit: {e}")))?;
        self.train_config(0)
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        Ok(())
    }

    /// Input side for the selected architecture.
    pub fn input_size(&self) -> usize {
        match self.arch {
            ArchKind::MiniCnn => self.resize.mini_cnn,
            ArchKind::ToyVit => self.resize.toy_vit,
        }
    }

    pub fn smote_params(&self, seed: u64) -> SmoteParams {
        SmoteParams {
            k_neighbors: self.smote.k_neighbors,
            target: self.smote.target_per_class,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            optimizer: self.train.optimizer,
            seed,
        }
    }
}
