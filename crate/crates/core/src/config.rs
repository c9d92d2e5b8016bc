//! Run configuration: one JSON document with `arch`, `train`, `sampler`,
//! `mask`, and `data` sections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataKind;
use crate::error::{Error, Result};
use crate::net::ArchConfig;
use crate::rng::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubnetMechanism {
    /// Sub-nets execute a per-stage prefix of blocks.
    #[default]
    Truncation,
    /// Sub-nets are selected by the learned Gumbel top-k mask.
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    /// Full objective: two teammates with self- and interactive learning,
    /// plus a label-only leader guiding their full-size outputs.
    #[default]
    Cooperative,
    /// Two teammates, self- and interactive learning, no leader.
    Mutual,
    /// One network; sub-nets distill from the full net with 1/s weights.
    SelfDistill,
    /// One network trained by cross-entropy at every sampled factor.
    CeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Learning rate for epoch 0 only.
    pub warmup_lr: f64,
    /// Piecewise-constant rates; `boundaries[i]` is the first epoch of
    /// `rates[i + 1]` (boundary-inclusive).
    pub rates: [f64; 4],
    pub boundaries: [usize; 3],
    pub momentum: f64,
    pub weight_decay: f64,
    pub mechanism: SubnetMechanism,
    pub variant: TrainVariant,
    /// Factors evaluated and logged every epoch.
    pub eval_factors: Vec<f64>,
    /// Save a checkpoint every N epochs (0 = final epoch only).
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 200,
            batch_size: 64,
            seed: 1,
            warmup_lr: 1e-2,
            rates: [1e-1, 1e-2, 1e-3, 1e-4],
            boundaries: [75, 130, 180],
            momentum: 0.9,
            weight_decay: 5e-4,
            mechanism: SubnetMechanism::Truncation,
            variant: TrainVariant::Cooperative,
            eval_factors: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            checkpoint_every: 0,
        }
    }
}

impl TrainSettings {
    /// Shrink or stretch the 200-epoch schedule to a new horizon, scaling the
    /// boundary epochs proportionally (kept strictly increasing for very
    /// short horizons).
    pub fn scaled_to(mut self, epochs: usize) -> TrainSettings {
        let scale = epochs as f64 / 200.0;
        let mut prev = 0usize;
        self.boundaries = self.boundaries.map(|b| {
            let scaled = ((b as f64 * scale).round() as usize).max(prev + 1);
            prev = scaled;
            scaled
        });
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(cfg_err("train.epochs", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(cfg_err("train.batch_size", "must be >= 2 for batch norm"));
        }
        if !(self.warmup_lr > 0.0) || self.rates.iter().any(|&r| !(r > 0.0)) {
            return Err(cfg_err("train.rates", "all learning rates must be positive"));
        }
        if !(self.boundaries[0] < self.boundaries[1] && self.boundaries[1] < self.boundaries[2]) {
            return Err(cfg_err("train.boundaries", "must be strictly increasing"));
        }
        if self.eval_factors.is_empty()
            || self.eval_factors.iter().any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(cfg_err("train.eval_factors", "factors must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(cfg_err("train.momentum", "must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(cfg_err("train.weight_decay", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Random,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Factors used verbatim each epoch by the static sampler.
    pub static_factors: Vec<f64>,
    /// Always-included endpoints of the random sampler.
    pub endpoints: [f64; 2],
    /// Pool the random sampler draws from.
    pub pool: Vec<f64>,
    /// Number of pool draws per epoch (with replacement).
    pub draws: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Random,
            static_factors: vec![1.0, 0.7, 0.4, 0.2],
            endpoints: [0.2, 1.0],
            pool: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            draws: 2,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .static_factors
            .iter()
            .chain(self.endpoints.iter())
            .chain(self.pool.iter());
        for &f in all {
            if !(f > 0.0 && f <= 1.0) {
                return Err(cfg_err("sampler", "factors must be in (0, 1]"));
            }
        }
        match self.kind {
            SamplerKind::Static => {
                if !self.static_factors.contains(&1.0) {
                    return Err(cfg_err("sampler.static_factors", "must include 1.0"));
                }
            }
            SamplerKind::Random => {
                if self.pool.is_empty() {
                    return Err(cfg_err("sampler.pool", "must be nonempty"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Gumbel-softmax temperature in (0, 1].
    pub temperature: f64,
    /// Weight of the optional selection-entropy penalty; 0 disables it and
    /// the scores then learn only through the task and distillation losses.
    pub entropy_reg_weight: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            temperature: crate::mask::DEFAULT_GUMBEL_TEMPERATURE,
            entropy_reg_weight: 0.0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(cfg_err("mask.temperature", "must be in (0, 1]"));
        }
        if self.entropy_reg_weight < 0.0 {
            return Err(cfg_err("mask.entropy_reg_weight", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub n: usize,
    pub noise: f64,
    pub classes: usize,
    pub seed: u64,
    /// Rasterize onto a `grid x grid` single-channel image (conv stems).
    pub grid: Option<usize>,
    /// Load from file instead of generating.
    pub path: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Spirals,
            n: 3000,
            noise: 0.04,
            classes: 3,
            seed: 7,
            grid: None,
            path: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(cfg_err("data.n", "must be >= 1"));
        }
        if self.classes < 2 {
            return Err(cfg_err("data.classes", "must be >= 2"));
        }
        if self.noise < 0.0 {
            return Err(cfg_err("data.noise", "must be nonnegative"));
        }
        Ok(())
    }

    /// Generate (or load) the dataset this config describes.
    pub fn realize(&self) -> Result<crate::data::Dataset> {
        self.validate()?;
        if let Some(path) = &self.path {
            let p = Path::new(path);
            return if self.grid.is_some() {
                crate::data::Dataset::load_grid(p)
            } else {
                crate::data::Dataset::load_csv(p, self.classes, "train")
            };
        }
        let ds = crate::data::gen_data(self.kind, self.n, self.noise, self.classes, self.seed)?;
        match self.grid {
            Some(g) => crate::data::rasterize(&ds, g),
            None => Ok(ds),
        }
    }
}

/// Everything one run needs, as persisted in configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.mask.validate()?;
        self.data.validate()?;
        if self.data.classes != self.arch.num_classes {
            return Err(cfg_err(
                "data.classes",
                "must match arch.num_classes",
            ));
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
            key: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable hash of the canonical JSON encoding; checkpoints refuse to load
    /// under a different hash.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a(json.as_bytes())
    }

    /// Desk-scale cooperative preset: a two-stage MLP-residual net on seeded
    /// 3-class spirals, the 200-epoch schedule compressed to 60 epochs, and
    /// the rate ladder divided by ten (the published rates destabilize the
    /// scale-weighted distillation at this problem size; the ladder shape,
    /// warmup epoch, momentum, and weight decay are unchanged).
    pub fn desk_preset() -> RunConfig {
        use crate::net::{BlockKind, StageConfig, StemKind};
        let mut train = TrainSettings::default().scaled_to(60);
        train.warmup_lr = 1e-3;
        train.rates = [1e-2, 1e-3, 1e-4, 1e-5];
        train.seed = 7;
        RunConfig {
            arch: ArchConfig {
                stem: StemKind::Linear { in_features: 2 },
                block: BlockKind::Mlp,
                stages: vec![
                    StageConfig { repeats: 4, channels: 64 },
                    StageConfig { repeats: 4, channels: 64 },
                ],
                num_classes: 3,
                rounding: crate::net::RoundingRule::Calibrated,
            },
            train,
            sampler: SamplerConfig::default(),
            mask: MaskConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn cfg_err(key: &str, message: &str) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.to_string(),
    }
}
