//! Per-dataset hyperparameters. Explicit flags always win over a preset.

use std::fmt;

use clap::ValueEnum;
use lgd_core::graph::ConstructionRule;
use lgd_core::model::{GcnConfig, ModelConfig};
use lgd_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Cora,
    Citeseer,
    Synth4,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cora => "cora",
            Self::Citeseer => "citeseer",
            Self::Synth4 => "synth4",
        })
    }
}

/// Resolved defaults for one preset.
#[derive(Clone, Debug)]
pub struct PresetValues {
    pub lgd: ModelConfig,
    pub gcn: GcnConfig,
    pub lgd_train: TrainConfig,
    pub gcn_train: TrainConfig,
}

/// Values used when no preset is given: the generic defaults of each config.
pub fn base() -> PresetValues {
    PresetValues {
        lgd: ModelConfig::default(),
        gcn: GcnConfig::default(),
        lgd_train: TrainConfig::default(),
        gcn_train: TrainConfig::default(),
    }
}

pub fn values(preset: Preset) -> PresetValues {
    match preset {
        Preset::Cora | Preset::Citeseer => {
            let lgd = ModelConfig {
                channels: 4,
                layers: 2,
                k: 4,
                rule: ConstructionRule::Cknn,
                dropout: 0.5,
                ..ModelConfig::default()
            };
            let lgd_train = TrainConfig {
                lr: 0.01,
                weight_decay: 5e-4,
                lambda_space: 0.3,
                lambda_div: 0.01,
                ..TrainConfig::default()
            };
            PresetValues {
                lgd,
                gcn: GcnConfig::default(),
                lgd_train,
                gcn_train: TrainConfig::default(),
            }
        }
        Preset::Synth4 => {
            // tuned on seed 1 of the 4-factor graph: one sharp routing pass and
            // a 1-NN latent graph; dropout and stronger regularizers hurt here
            let lgd = ModelConfig {
                channels: 4,
                iterations: 1,
                layers: 1,
                k: 1,
                rule: ConstructionRule::Knn,
                dropout: 0.0,
                ..ModelConfig::default()
            };
            let lgd_train = TrainConfig {
                epochs: 600,
                patience: 150,
                lr: 0.01,
                weight_decay: 0.0,
                update_rate: 0.9,
                lambda_space: 0.001,
                lambda_div: 0.001,
                ..TrainConfig::default()
            };
            let gcn_train = TrainConfig {
                epochs: 1000,
                patience: 100,
                lr: 0.01,
                weight_decay: 5e-4,
                ..TrainConfig::default()
            };
            PresetValues {
                lgd,
                gcn: GcnConfig::default(),
                lgd_train,
                gcn_train,
            }
        }
    }
}
