//! Run configuration, stored as TOML in every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slimcae::data::{make_synthetic, read_manifest, split_paths, Dataset, SyntheticKind};
use slimcae::model::SlimCaeConfig;
use slimcae::training::{AdamConfig, ScheduleParams};
use slimcae::{Error, Result, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Naive,
    Estimated,
    Scheduled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub regime: Regime,
    /// Shared tradeoff (naive) or tradeoff of the widest level.
    pub lambda: f64,
    /// Naive-phase steps (all steps for the naive regime).
    pub iterations: usize,
    /// Steps with the final tradeoffs fixed.
    pub finetune_iterations: usize,
    pub kappa: f64,
    pub schedule_iterations: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub entropy_lr: f64,
    /// Relative distortion gap that marks where two fixed-width curves part.
    pub delta: f64,
    /// Fixed-width curves for the estimated regime; swept when absent.
    pub curves: Option<PathBuf>,
    pub sweep_lambdas: Vec<f64>,
    pub sweep_iterations: usize,
    pub log_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            regime: Regime::Scheduled,
            lambda: 0.01,
            iterations: 1500,
            finetune_iterations: 500,
            kappa: 1.25,
            schedule_iterations: 200,
            max_steps: 7,
            lr: 3e-3,
            entropy_lr: 3e-2,
            delta: 0.05,
            curves: None,
            sweep_lambdas: vec![0.002, 0.005, 0.01, 0.02, 0.05, 0.1],
            sweep_iterations: 1500,
            log_every: 50,
        }
    }
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, entropy_lr: self.entropy_lr, ..AdamConfig::default() }
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams {
            lambda_top: self.lambda,
            kappa: self.kappa,
            iterations: self.schedule_iterations,
            max_steps: self.max_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config("training.lambda must be a finite non-negative number".into()));
        }
        self.adam().validate()?;
        if self.regime == Regime::Scheduled {
            self.schedule().validate().map_err(|e| Error::Config(format!("training: {e}")))?;
        }
        if self.regime == Regime::Estimated {
            if !(self.delta > 0.0) {
                return Err(Error::Config("training.delta must be positive".into()));
            }
            if self.curves.is_none() && self.sweep_lambdas.len() < 3 {
                return Err(Error::Config("training.sweep_lambdas needs at least 3 values".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic kind, e.g. `gaussian_blobs` or `band_limited_noise:0.2`.
    pub synthetic: Option<String>,
    /// Newline-separated image paths; used when `synthetic` is unset.
    pub manifest: Option<PathBuf>,
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub crop: usize,
    pub batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: Some("gaussian_blobs".into()),
            manifest: None,
            train_images: 256,
            val_images: 10,
            image_size: 24,
            val_fraction: 0.1,
            split_seed: 0,
            crop: 24,
            batch: 8,
        }
    }
}

impl DataConfig {
    pub fn synthetic_kind(&self) -> Result<Option<SyntheticKind>> {
        self.synthetic.as_deref().map(str::parse).transpose()
    }

    /// Training set and validation images.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Vec<Tensor4<f64>>)> {
        if let Some(kind) = self.synthetic_kind()? {
            let mut images = make_synthetic(kind, self.train_images + self.val_images, self.image_size, seed);
            let val = images.split_off(self.train_images);
            return Ok((Dataset::new(images, self.crop, self.batch, seed)?, val));
        }
        let manifest = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("data: set either synthetic or manifest".into()))?;
        let paths = read_manifest(manifest)?;
        let (train, val) = split_paths(&paths, self.split_seed, self.val_fraction);
        if val.is_empty() {
            return Err(Error::Data("validation split is empty; raise data.val_fraction".into()));
        }
        let val = val.iter().map(|p| slimcae::data::load_image(p)).collect::<Result<Vec<_>>>()?;
        Ok((Dataset::from_paths(&train, self.crop, self.batch, seed)?, val))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: SlimCaeConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: SlimCaeConfig::desk(),
            training: TrainingConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.data.synthetic_kind()?;
        if self.data.crop == 0 || self.data.batch == 0 {
            return Err(Error::Config("data.crop and data.batch must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
