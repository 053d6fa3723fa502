//! Run configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSceneConfig;
use crate::dpr::DprConfig;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_ECE_BINS;
use crate::model::ModelConfig;
use crate::nn::OptimizerKind;
use crate::vpir::VpirConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Class ids run from 0 to `num_classes - 1`.
    pub num_classes: usize,
    /// Held out from training; every other class is a base class.
    pub novel_classes: Vec<i64>,
    pub classes_per_scene: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SyntheticSceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 3,
            novel_classes: vec![0, 1, 2],
            classes_per_scene: 3,
            train_scenes: 60,
            test_scenes: 40,
            scene: SyntheticSceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub beta_max: f64,
    /// Defaults to 20% of `epochs`.
    pub warmup_epochs: Option<usize>,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub n_way: usize,
    pub k_shot: usize,
    /// Episodes whose gradients are summed into one update.
    pub parallel_episodes: usize,
    /// Episode target classes; defaults to the base classes.
    pub classes: Option<Vec<i64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            episodes_per_epoch: 20,
            beta_max: 0.1,
            warmup_epochs: None,
            learning_rate: 3e-3,
            optimizer: OptimizerKind::Adam,
            n_way: 1,
            k_shot: 1,
            parallel_episodes: 1,
            classes: None,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| (self.epochs as f64 * 0.2).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub samples: Vec<usize>,
    pub ece_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_way: 1,
            k_shot: 1,
            episodes: 50,
            samples: vec![1, 8],
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub dpr: DprConfig,
    pub vpir: VpirConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            dpr: DprConfig::default(),
            vpir: VpirConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if d.num_classes == 0 || d.classes_per_scene == 0 || d.classes_per_scene > d.num_classes {
            return bad("data.classes_per_scene must be in [1, data.num_classes]");
        }
        if d.novel_classes.iter().any(|&c| c < 0 || c as usize >= d.num_classes) {
            return bad("data.novel_classes must lie in [0, data.num_classes)");
        }
        if d.scene.points_per_object == 0 || d.scene.objects_per_scene == 0 {
            return bad("data.scene counts must be >= 1");
        }
        if d.scene.intra_class_jitter < 0.0 || d.scene.inter_class_gap < 0.0 {
            return bad("data.scene jitter and gap must be >= 0");
        }
        let t = &self.train;
        if t.episodes_per_epoch == 0 || t.n_way == 0 || t.k_shot == 0 || t.parallel_episodes == 0 {
            return bad("train.episodes_per_epoch, n_way, k_shot and parallel_episodes must be >= 1");
        }
        if t.warmup() > t.epochs {
            return bad("train.warmup_epochs must not exceed train.epochs");
        }
        if !(t.learning_rate > 0.0) || t.beta_max < 0.0 {
            return bad("train.learning_rate must be positive and train.beta_max >= 0");
        }
        if self.train_classes().len() < t.n_way {
            return bad("fewer training classes than train.n_way");
        }
        let e = &self.eval;
        if e.n_way == 0 || e.k_shot == 0 || e.ece_bins == 0 || e.samples.iter().any(|&s| s == 0) {
            return bad("eval.n_way, k_shot, ece_bins and samples must be >= 1");
        }
        if e.n_way > d.novel_classes.len() {
            return bad("eval.n_way exceeds the number of novel classes");
        }
        Ok(())
    }

    pub fn base_classes(&self) -> Vec<i64> {
        (0..self.data.num_classes as i64)
            .filter(|c| !self.data.novel_classes.contains(c))
            .collect()
    }

    pub fn train_classes(&self) -> Vec<i64> {
        match &self.train.classes {
            Some(c) => c.clone(),
            // Without base classes, training episodes draw the novel classes
            // from the training scenes only.
            None if self.base_classes().is_empty() => self.data.novel_classes.clone(),
            None => self.base_classes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        if self.data.scene.with_color {
            6
        } else {
            3
        }
    }
}
