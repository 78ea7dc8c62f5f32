//! Shipped configurations. Desk-scale thresholds were fixed from pilot runs.

use std::path::PathBuf;

use super::{AttackSuite, ExperimentConfig, ExperimentError, ModelConfig};
use crate::attack::{AttackConfig, AttackView};
use crate::data::{DatasetConfig, SyntheticConfig};
use crate::fl::{Defense, FlConfig};
use crate::quant::{BitWidth, PolicyConfig, QuantMode};

const NAMES: [&str; 5] = ["table1-desk", "comm-report", "mode-mismatch", "attack-desk", "mnist-full"];

pub fn preset_names() -> &'static [&'static str] {
    &NAMES
}

/// 10-class Gaussian blobs on 8x8 inputs. Noise 0.5 keeps accuracy below 100%.
fn desk_data() -> DatasetConfig {
    DatasetConfig::Synthetic(SyntheticConfig {
        classes: 10,
        dim: 64,
        train: 2000,
        test: 500,
        noise: 0.5,
        seed: 0,
    })
}

fn desk_fl() -> FlConfig {
    FlConfig {
        clients: 4,
        sampled: 4,
        local_epochs: 1,
        batch_size: 32,
        learning_rate: 0.1,
        rounds: 20,
        ..FlConfig::default()
    }
}

fn base(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        preset: Some(name.to_string()),
        seed: 0,
        dataset: desk_data(),
        model: ModelConfig::MlpTiny,
        fl: desk_fl(),
        defenses: Vec::new(),
        attack: None,
        search_modes: None,
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = base(name);
    match name {
        "table1-desk" => cfg.defenses = Defense::ALL.to_vec(),
        "comm-report" => {
            cfg.fl.rounds = 2;
            cfg.fl.policy = PolicyConfig::Uniform {
                bits: BitWidth::Int8,
                mode: QuantMode::Scaled,
            };
            cfg.defenses = vec![Defense::None, Defense::Quantize];
        }
        "mode-mismatch" => {
            cfg.attack = Some(AttackSuite {
                views: vec![AttackView::DequantizedCorrect, AttackView::DequantizedWrongMode],
                trials: 20,
                config: AttackConfig::default(),
            })
        }
        "attack-desk" => {
            cfg.attack = Some(AttackSuite {
                views: AttackView::ALL.to_vec(),
                trials: 20,
                config: AttackConfig {
                    max_iterations: 450,
                    ..AttackConfig::default()
                },
            })
        }
        "mnist-full" => {
            cfg.dataset = DatasetConfig::Idx {
                dir: PathBuf::from("data/mnist"),
                train_limit: None,
                test_limit: None,
            };
            cfg.model = ModelConfig::LenetSmall;
            cfg.fl = FlConfig {
                clients: 15,
                sampled: 15,
                local_epochs: 1,
                batch_size: 32,
                learning_rate: 0.05,
                rounds: 20,
                ..FlConfig::default()
            };
            cfg.defenses = Defense::ALL.to_vec();
        }
        other => return Err(ExperimentError::UnknownPreset(other.to_string())),
    }
    Ok(cfg)
}
