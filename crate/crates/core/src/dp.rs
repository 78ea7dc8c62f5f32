//! Gaussian-mechanism baseline: clip each client update to a global L2 norm and
//! add calibrated i.i.d. Gaussian noise before transmission.
//!
//! The guarantee is per release; there is no accountant composing rounds.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::GradSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("invalid DP configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

fn default_clip() -> f64 {
    1.0
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 1e-5,
            clip_norm: 1.0,
        }
    }
}

impl DpConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.epsilon > 0.0) {
            return Err(DpError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(DpError::Config(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(DpError::Config(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// `sigma = C * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn gaussian_sigma(cfg: &DpConfig) -> Result<f64, DpError> {
    cfg.validate()?;
    Ok(cfg.clip_norm * (2.0 * (1.25 / cfg.delta).ln()).sqrt() / cfg.epsilon)
}

/// Scales `update` by `min(1, clip / ||update||_2)`, the norm taken over all tensors.
pub fn clip(update: &GradSet, clip_norm: f64) -> GradSet {
    let norm = update.l2_norm();
    if norm <= clip_norm || norm == 0.0 {
        return update.clone();
    }
    update.scaled((clip_norm / norm) as f32)
}

/// Clip then add `N(0, sigma^2)` to every coordinate. Noise draws do not depend on the update.
pub fn privatize<R: Rng + ?Sized>(update: &GradSet, cfg: &DpConfig, rng: &mut R) -> Result<GradSet, DpError> {
    let sigma = gaussian_sigma(cfg)?;
    let mut out = clip(update, cfg.clip_norm);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| DpError::Config(e.to_string()))?;
        for entry in out.iter_mut() {
            for v in entry.tensor.data_mut() {
                *v += normal.sample(rng) as f32;
            }
        }
    }
    Ok(out)
}
