//! Run configuration: one flat TOML file with a section per subsystem.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::aulm::EraseConfig;
use crate::datagen::DatasetSpec;
use crate::error::{HliError, Result};
use crate::losses::LossWeights;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs_pretrain: usize,
    pub epochs_adapt: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// (epoch, multiplier) pairs; the multiplier applies from that pretrain
    /// epoch on. Adaptation keeps a fixed learning rate.
    pub lr_schedule: Vec<(usize, f64)>,
    pub p: usize,
    pub k: usize,
    pub m_t: usize,
    pub momentum_ema: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs_pretrain: 15,
            epochs_adapt: 8,
            steps_per_epoch: 20,
            learning_rate: 0.003,
            weight_decay: 0.0005,
            lr_schedule: vec![(10, 0.1)],
            p: 8,
            k: 4,
            m_t: 16,
            momentum_ema: 0.999,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub lambda_id_t: f64,
    pub lambda_tri_t: f64,
    pub lambda_imi_t: f64,
    pub lambda_sd_t: f64,
    pub alpha: f64,
    pub beta: f64,
    pub triplet_margin: f64,
    /// Clamp on the exploitation repulsion term; <= 0 disables the clamp.
    pub repulsion_clamp: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_id_t: w.lambda_id_t,
            lambda_tri_t: w.lambda_tri_t,
            lambda_imi_t: w.lambda_imi_t,
            lambda_sd_t: w.lambda_sd_t,
            alpha: w.alpha,
            beta: w.beta,
            triplet_margin: 0.3,
            repulsion_clamp: 4.0,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_id_t: self.lambda_id_t,
            lambda_tri_t: self.lambda_tri_t,
            lambda_imi_t: self.lambda_imi_t,
            lambda_sd_t: self.lambda_sd_t,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn clamp_value(&self) -> f64 {
        if self.repulsion_clamp <= 0.0 {
            f64::INFINITY
        } else {
            self.repulsion_clamp
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub block_channels: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            block_channels: vec![8, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub erase: EraseConfig,
    /// Replace CAM points with uniform-random points (the non-adaptive arm
    /// of the material-update comparison).
    pub random_erase_points: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            erase: EraseConfig::default(),
            random_erase_points: false,
        }
    }
}

impl RunConfig {
    /// The calibrated benchmark protocol used by the adaptation-gain and
    /// ablation experiments: a longer adaptation budget, a faster teacher
    /// (momentum 0.99 — at ~500 optimizer steps a 0.999 teacher still carries
    /// most of its initial weights), and over-clustering (M_t above the true
    /// identity count).
    /// The dataset seed stays fixed so seeds vary only initialization and
    /// batch order, as in a multi-seed run on a real benchmark.
    pub fn benchmark(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.seed = seed;
        cfg.train.epochs_adapt = 24;
        cfg.train.momentum_ema = 0.99;
        cfg.train.m_t = 24;
        cfg
    }

    /// The calibrated reduced-scale config for the component-ladder and
    /// erase-probability studies: a smaller dataset and model keep a
    /// 4-rung x n-seed grid tractable on one CPU core, while the re-balanced
    /// weights (a faster teacher, a softer structure-distillation pull, and a
    /// hard/soft triplet mix) keep each component's contribution visible at
    /// this scale.
    pub fn ablation() -> Self {
        let mut cfg = Self::default();
        cfg.dataset.n_identities_source = 8;
        cfg.dataset.n_identities_target = 8;
        cfg.dataset.samples_per_identity = 6;
        cfg.dataset.image_height = 32;
        cfg.dataset.image_width = 16;
        cfg.model.block_channels = vec![6, 12, 24];
        cfg.train.epochs_pretrain = 30;
        cfg.train.epochs_adapt = 10;
        cfg.train.steps_per_epoch = 10;
        cfg.train.p = 4;
        cfg.train.k = 3;
        cfg.train.m_t = 12;
        cfg.train.momentum_ema = 0.95;
        cfg.erase.erase_h = 8;
        cfg.erase.erase_w = 4;
        cfg.erase.prob = 0.5;
        cfg.loss.lambda_sd_t = 0.3;
        cfg.loss.lambda_tri_t = 0.7;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| HliError::Config {
            field: "file".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset
            .validate()
            .map_err(|e| HliError::Config {
                field: "dataset".into(),
                reason: e.to_string(),
            })?;
        let t = &self.train;
        if t.learning_rate <= 0.0 || !t.learning_rate.is_finite() {
            return Err(HliError::Config {
                field: "train.learning_rate".into(),
                reason: format!("must be a positive finite real, got {}", t.learning_rate),
            });
        }
        if t.weight_decay < 0.0 || !t.weight_decay.is_finite() {
            return Err(HliError::Config {
                field: "train.weight_decay".into(),
                reason: format!("must be a non-negative finite real, got {}", t.weight_decay),
            });
        }
        if t.epochs_pretrain == 0 || t.steps_per_epoch == 0 {
            return Err(HliError::Config {
                field: "train.epochs_pretrain/steps_per_epoch".into(),
                reason: "must be positive".into(),
            });
        }
        if t.p < 2 || t.k < 2 {
            return Err(HliError::Config {
                field: "train.p/train.k".into(),
                reason: "PK batching requires P >= 2 and K >= 2".into(),
            });
        }
        if t.m_t == 0 {
            return Err(HliError::Config {
                field: "train.m_t".into(),
                reason: "must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&t.momentum_ema) {
            return Err(HliError::Config {
                field: "train.momentum_ema".into(),
                reason: format!("must be in [0,1], got {}", t.momentum_ema),
            });
        }
        let mut last = None;
        for &(epoch, mult) in &t.lr_schedule {
            if let Some(prev) = last {
                if epoch <= prev {
                    return Err(HliError::Config {
                        field: "train.lr_schedule".into(),
                        reason: "epochs must be strictly increasing".into(),
                    });
                }
            }
            if mult <= 0.0 {
                return Err(HliError::Config {
                    field: "train.lr_schedule".into(),
                    reason: "multipliers must be positive".into(),
                });
            }
            last = Some(epoch);
        }
        self.loss.weights().validate()?;
        if self.loss.triplet_margin < 0.0 {
            return Err(HliError::Config {
                field: "loss.triplet_margin".into(),
                reason: "must be >= 0".into(),
            });
        }
        self.erase
            .validate(self.dataset.image_height, self.dataset.image_width)?;
        Ok(())
    }

    /// Learning-rate multiplier in effect at a given pretrain epoch (1-based).
    pub fn lr_multiplier(&self, epoch: usize) -> f64 {
        let mut m = 1.0;
        for &(e, mult) in &self.train.lr_schedule {
            if epoch >= e {
                m = mult;
            }
        }
        m
    }

    pub fn model_config(&self, num_classes: usize) -> crate::model::ModelConfig {
        crate::model::ModelConfig {
            input_h: self.dataset.image_height,
            input_w: self.dataset.image_width,
            in_channels: 3,
            block_channels: self.model.block_channels.clone(),
            num_classes,
        }
    }
}
