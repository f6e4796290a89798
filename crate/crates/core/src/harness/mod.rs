//! Training, evaluation, inference, benchmarking and plotting.

mod bench;
mod eval;
mod infer;
mod plot;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{BerHuParams, DiscriminativeParams, TaskWeights};
use crate::network::NetworkConfig;

pub use bench::{benchmark_speed, hardware_descriptor, BenchReport, BenchTiming};
pub use eval::{evaluate, recorded_bandwidth, DepthProtocol, EvalOptions, EvalReport, ForegroundSource};
pub use infer::{depth_to_millimeters, infer, infer_file, predict_sample, InferOutputs, InferSettings, Prediction};
pub use plot::{emit_scatter, read_car_pairs, scatter_svg};
pub use train::{dataset_metadata, hash_groups, train, LossLogRow, TrainOutcome, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkPreset {
    Enet,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 5e-4,
            batch_size: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub discriminative: DiscriminativeParams,
    pub berhu: BerHuParams,
    /// Weight the cross-entropy by inverse log class frequency.
    pub class_weighting: Option<bool>,
}

impl LossConfig {
    pub fn class_weighting(&self) -> bool {
        self.class_weighting.unwrap_or(true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 0,
            shuffle: 1,
            dropout: 2,
        }
    }
}

/// Everything a training run needs. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default)]
    pub val_split: Option<String>,
    #[serde(default = "default_preset")]
    pub preset: NetworkPreset,
    /// Full network description; overrides `preset` when given.
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Expected `[height, width]` of the training images.
    #[serde(default)]
    pub resolution: Option<[usize; 2]>,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_val_every")]
    pub val_every: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub pretrained_encoder: Option<PathBuf>,
    #[serde(default)]
    pub init_stage3_from_pretrained: bool,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub task_weights: TaskWeights,
    #[serde(default = "default_true")]
    pub freeze_batchnorm: bool,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f32,
    /// Training images used to re-estimate batch-norm statistics before
    /// each validation when batch norm is trained. Zero disables it.
    #[serde(default = "default_recalibration_images")]
    pub recalibration_images: usize,
    /// Clustering bandwidth recorded with the checkpoint; `delta_v` when
    /// unset.
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

fn default_train_split() -> String {
    "train".into()
}
fn default_preset() -> NetworkPreset {
    NetworkPreset::Enet
}
fn default_iterations() -> u64 {
    500
}
fn default_val_every() -> u64 {
    100
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}
fn default_true() -> bool {
    true
}
fn default_bn_momentum() -> f32 {
    0.1
}
fn default_recalibration_images() -> usize {
    100
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            train_split: default_train_split(),
            val_split: None,
            preset: default_preset(),
            network: None,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            resolution: None,
            iterations: default_iterations(),
            val_every: default_val_every(),
            out_dir: out_dir.into(),
            pretrained_encoder: None,
            init_stage3_from_pretrained: false,
            seeds: Seeds::default(),
            task_weights: TaskWeights::default(),
            freeze_batchnorm: true,
            bn_momentum: default_bn_momentum(),
            recalibration_images: default_recalibration_images(),
            bandwidth: None,
        }
    }

    /// Overfitting recipe for small synthetic sets: toy network, trained
    /// batch norm, a large step size and full-set batches. The pull margin
    /// is half the clustering bandwidth, so a converged instance has a
    /// diameter below the bandwidth and is claimed whole from any center.
    pub fn toy(dataset: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, batch_size: usize) -> Self {
        let mut cfg = Self::new(dataset, out_dir);
        cfg.preset = NetworkPreset::Toy;
        cfg.freeze_batchnorm = false;
        cfg.loss.discriminative.delta_v = 0.25;
        cfg.bandwidth = Some(0.5);
        cfg.optimizer.learning_rate = 2e-2;
        cfg.optimizer.batch_size = batch_size;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        resolve(&mut cfg.out_dir);
        if let Some(p) = cfg.pretrained_encoder.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        let w = &self.task_weights;
        if [w.semantic, w.instance, w.depth].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("task weights must be finite and non-negative".into()));
        }
        self.loss.discriminative.validate()?;
        if let Some(b) = self.bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config("bandwidth must be positive".into()));
            }
        }
        BerHuParams::new(self.loss.berhu.c_fraction)?;
        if let Some(n) = &self.network {
            n.validate()?;
        }
        Ok(())
    }

    pub fn network_config(&self, num_classes: usize) -> NetworkConfig {
        match &self.network {
            Some(n) => n.clone(),
            None => match self.preset {
                NetworkPreset::Enet => NetworkConfig::enet(num_classes),
                NetworkPreset::Toy => NetworkConfig::toy(num_classes),
            },
        }
    }
}
