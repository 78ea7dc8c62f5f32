//! Experiment configuration, orchestration and the run manifest.
//!
//! A run trains one federated model per requested defense, then runs the
//! attack suite, and writes `metrics.csv`, `attack.csv`, PGM images and finally
//! `manifest.json` into the output directory. The manifest is written last
//! through a rename, so a failed run never leaves one behind.

mod output;
mod presets;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{self, AttackConfig, AttackError, AttackView};
use crate::data::{self, DataError, Dataset, DatasetConfig};
use crate::fl::{self, Defense, FlConfig, FlError, RoundRecord};
use crate::nn::{self, Batch, ModelSpec, NnError};
use crate::quant::{self, CodecError, QuantMode, QuantPolicy};
use crate::rng;

pub use output::{attack_csv, metrics_csv, pgm, ATTACK_CSV_HEADER, METRICS_CSV_HEADER};
pub use presets::{preset, preset_names};
pub use report::report;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ATTACK_FILE: &str = "attack.csv";

const TAG_ATTACK_PARAMS: u64 = 0x0A77_0001;
const TAG_ATTACK_SEED: u64 = 0x0A77_0002;
/// Trials for which recovered images are written.
const IMAGE_TRIALS: usize = 3;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    /// One hidden layer of 32 ReLU units on flattened inputs.
    MlpTiny,
    Mlp { hidden: Vec<usize> },
    LenetSmall,
}

/// Gradient-inversion trials run against the model at initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSuite {
    pub views: Vec<AttackView>,
    pub trials: usize,
    /// Per-trial settings; `view` and `seed` are overridden per trial.
    #[serde(default)]
    pub config: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub preset: Option<String>,
    /// Master seed; overrides `fl.seed` and derives all attack seeds.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub fl: FlConfig,
    /// One training run per entry; `fl.defense` is ignored.
    #[serde(default)]
    pub defenses: Vec<Defense>,
    #[serde(default)]
    pub attack: Option<AttackSuite>,
    /// Modes an attacker has to consider per layer; defaults to every codec mode.
    #[serde(default)]
    pub search_modes: Option<u32>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|source| ExperimentError::Json {
            context: "experiment config".into(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.defenses.is_empty() && self.attack.is_none() {
            return Err(ExperimentError::Config("nothing to run: no defenses and no attack".into()));
        }
        if !self.defenses.is_empty() {
            self.fl.validate()?;
        }
        if let Some(a) = &self.attack {
            if a.views.is_empty() || a.trials == 0 {
                return Err(ExperimentError::Config("attack needs at least one view and one trial".into()));
            }
            a.config.validate()?;
        }
        Ok(())
    }
}

/// Builds the model for `ds`, reshaping the data to what the model expects.
pub fn build_model(model: &ModelConfig, ds: &Dataset) -> Result<(ModelSpec, Dataset), ExperimentError> {
    match model {
        ModelConfig::MlpTiny => {
            let flat = ds.flattened();
            Ok((ModelSpec::mlp(flat.input_shape[0], &[32], ds.classes), flat))
        }
        ModelConfig::Mlp { hidden } => {
            let flat = ds.flattened();
            Ok((ModelSpec::mlp(flat.input_shape[0], hidden, ds.classes), flat))
        }
        ModelConfig::LenetSmall => {
            let image = as_image(ds)?;
            let shape: [usize; 3] = image.input_shape.clone().try_into().expect("three dims");
            Ok((ModelSpec::lenet_small(shape, ds.classes)?, image))
        }
    }
}

/// Views flat square inputs as one-channel images.
fn as_image(ds: &Dataset) -> Result<Dataset, ExperimentError> {
    let shape = match ds.input_shape.as_slice() {
        [_, _, _] => return Ok(ds.clone()),
        [d] if square_side(*d).is_some() => {
            let s = square_side(*d).expect("square");
            vec![1, s, s]
        }
        other => {
            return Err(ExperimentError::Config(format!(
                "lenet-small needs image inputs, got shape {other:?}"
            )))
        }
    };
    let reshape = |b: &Batch| {
        let mut full = vec![b.len()];
        full.extend(&shape);
        Batch {
            inputs: b.inputs.clone().reshape(full).expect("same element count"),
            labels: b.labels.clone(),
        }
    };
    Ok(Dataset {
        name: ds.name.clone(),
        train: reshape(&ds.train),
        test: reshape(&ds.test),
        input_shape: shape,
        classes: ds.classes,
    })
}

pub(crate) fn square_side(d: usize) -> Option<usize> {
    let s = (d as f64).sqrt().round() as usize;
    (s * s == d).then_some(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRun {
    pub defense: Defense,
    pub records: Vec<RoundRecord>,
    pub wall_time_ms: Vec<f64>,
}

impl DefenseRun {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrial {
    pub view: AttackView,
    pub trial: usize,
    pub sample_index: usize,
    pub iterations: usize,
    pub final_match_loss: f64,
    pub final_mse: f64,
    pub final_psnr: f64,
    pub success_iteration: Option<usize>,
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub modes: u32,
    pub layers: u32,
    /// Decimal `modes^layers`.
    pub combinations: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub dataset: String,
    pub model: ModelSpec,
    pub policy: QuantPolicy,
    pub search_space: SearchSpace,
    pub runs: Vec<DefenseRun>,
    pub attacks: Vec<AttackTrial>,
    pub files: Vec<String>,
}

impl ExperimentManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|source| ExperimentError::Json {
            context: "manifest".into(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn run(&self, defense: Defense) -> Option<&DefenseRun> {
        self.runs.iter().find(|r| r.defense == defense)
    }

    pub fn trials(&self, view: AttackView) -> impl Iterator<Item = &AttackTrial> {
        self.attacks.iter().filter(move |t| t.view == view)
    }

    /// Median final MSE over the trials of `view`.
    pub fn median_mse(&self, view: AttackView) -> Option<f64> {
        median(self.trials(view).map(|t| t.final_mse).collect())
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Runs every configured training run and the attack suite, writing outputs under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentManifest, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(io_err(&manifest_path))?;
    }

    let raw = data::load_dataset(&cfg.dataset)?;
    let (spec, ds) = build_model(&cfg.model, &raw)?;
    let policy = cfg.fl.policy.resolve(&spec)?;
    policy.check_covers(&nn::init_params(&spec, 0))?;
    let modes = cfg.search_modes.unwrap_or(QuantMode::ALL.len() as u32);
    let layers = spec.param_layers() as u32;
    let search_space = SearchSpace {
        modes,
        layers,
        combinations: quant::attack_search_space(modes, layers)?.to_string(),
    };

    let mut files = Vec::new();
    let mut runs = Vec::new();
    for &defense in &cfg.defenses {
        let fl_cfg = FlConfig {
            defense,
            seed: cfg.seed,
            ..cfg.fl.clone()
        };
        let run = fl::run_training(&spec, &fl_cfg, &ds.train, &ds.test)?;
        runs.push(DefenseRun {
            defense,
            records: run.records,
            wall_time_ms: run.wall_time_ms,
        });
    }
    if !runs.is_empty() {
        write_file(&out_dir.join(METRICS_FILE), metrics_csv(&runs).as_bytes())?;
        files.push(METRICS_FILE.to_string());
    }

    let mut attacks = Vec::new();
    if let Some(suite) = &cfg.attack {
        let image_dir = out_dir.join("images");
        fs::create_dir_all(&image_dir).map_err(io_err(&image_dir))?;
        let mut curves = Vec::new();
        for trial in 0..suite.trials {
            let params = nn::init_params(&spec, rng::derive_seed(cfg.seed, &[TAG_ATTACK_PARAMS, trial as u64]));
            let sample_index = trial % ds.train.len();
            let truth = ds.train.select(&[sample_index]);
            if trial < IMAGE_TRIALS {
                let name = format!("images/truth_trial{trial}.pgm");
                write_file(&out_dir.join(&name), &pgm(&truth.inputs, spec.input_shape()))?;
                files.push(name);
            }
            for &view in &suite.views {
                let observed = attack::observe(&spec, &params, &truth, view, &policy)?;
                let acfg = AttackConfig {
                    view,
                    seed: rng::derive_seed(cfg.seed, &[TAG_ATTACK_SEED, trial as u64]),
                    ..suite.config.clone()
                };
                let result = attack::run_attack(&spec, &params, &observed, &truth, &acfg)?;
                let last = *result.curve.last().expect("initial record");
                if trial < IMAGE_TRIALS {
                    let name = format!("images/{}_trial{trial}.pgm", view.name());
                    write_file(&out_dir.join(&name), &pgm(&result.recovered, spec.input_shape()))?;
                    files.push(name);
                }
                attacks.push(AttackTrial {
                    view,
                    trial,
                    sample_index,
                    iterations: last.iteration,
                    final_match_loss: last.match_loss,
                    final_mse: result.final_mse,
                    final_psnr: result.final_psnr,
                    success_iteration: result.success_iteration,
                    restarts: result.restarts,
                });
                curves.push((view, trial, result.curve));
            }
        }
        write_file(&out_dir.join(ATTACK_FILE), attack_csv(&curves).as_bytes())?;
        files.push(ATTACK_FILE.to_string());
    }
    files.sort();

    let manifest = ExperimentManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        seed: cfg.seed,
        dataset: ds.name.clone(),
        model: spec,
        policy,
        search_space,
        runs,
        attacks,
        files,
    };
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    write_file(&tmp, manifest.to_json().as_bytes())?;
    fs::rename(&tmp, &manifest_path).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}
