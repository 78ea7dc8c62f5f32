//! Gradient-inversion attacker: optimise dummy inputs until their gradients
//! match an observed gradient, under several views of what the adversary sees.

mod optimize;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Batch, GradSet, ModelSpec, NnError, ParamEntry, ParamSet};
use crate::quant::{self, CodecError, QuantPolicy};
use crate::rng;
use crate::tensor::Tensor;

pub use optimize::run_attack;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("recovered shape {recovered:?} does not match truth shape {truth:?}")]
    Shape { recovered: Vec<usize>, truth: Vec<usize> },
    #[error("attack diverged in all {attempts} attempts")]
    Diverged { attempts: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// What the adversary intercepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackView {
    /// The float gradient itself.
    RawFloat,
    /// Integer payload taken at face value; no ranges, no mode.
    IntPayloadAsFloat,
    /// Payload decoded with its own mode and stored ranges.
    DequantizedCorrect,
    /// Payload decoded with the other mode's formula and the true float range.
    DequantizedWrongMode,
}

impl AttackView {
    pub const ALL: [AttackView; 4] = [
        AttackView::RawFloat,
        AttackView::IntPayloadAsFloat,
        AttackView::DequantizedCorrect,
        AttackView::DequantizedWrongMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackView::RawFloat => "raw_float",
            AttackView::IntPayloadAsFloat => "int_payload_as_float",
            AttackView::DequantizedCorrect => "dequantized_correct",
            AttackView::DequantizedWrongMode => "dequantized_wrong_mode",
        }
    }
}

impl std::fmt::Display for AttackView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// The attacker is handed the true labels.
    Known,
    /// Soft labels are optimised jointly with the inputs.
    Optimized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Gradient descent with Armijo backtracking; the accepted loss never increases.
    Backtracking,
    Adam { learning_rate: f64 },
}

/// How the derivative of the match loss with respect to the dummy pixels is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientMethod {
    /// Forward-over-reverse: `2 * D_x <grad_theta L, residual>`.
    Analytic,
    /// Central differences, two backward passes per pixel.
    FiniteDifference { h: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub max_iterations: usize,
    /// Initial step; backtracking adapts it from there.
    pub step_size: f64,
    /// Fresh attempts allowed after a divergence.
    pub restarts: usize,
    pub label_mode: LabelMode,
    pub view: AttackView,
    pub mse_max: f64,
    pub psnr_min: f64,
    pub optimizer: Optimizer,
    pub gradient: GradientMethod,
    /// Project dummy pixels onto `[0, 1]` after every step.
    pub clamp_pixels: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            step_size: 1.0,
            restarts: 3,
            label_mode: LabelMode::Known,
            view: AttackView::RawFloat,
            mse_max: 0.01,
            psnr_min: 20.0,
            optimizer: Optimizer::Backtracking,
            gradient: GradientMethod::Analytic,
            clamp_pixels: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.max_iterations == 0 {
            return Err(AttackError::Config("max_iterations must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(AttackError::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if !(self.mse_max > 0.0 && self.psnr_min > 0.0) {
            return Err(AttackError::Config("success thresholds must be positive".into()));
        }
        if let GradientMethod::FiniteDifference { h } = self.gradient {
            if !(h > 0.0 && h.is_finite()) {
                return Err(AttackError::Config(format!("finite-difference step must be > 0, got {h}")));
            }
        }
        if let Optimizer::Adam { learning_rate } = self.optimizer {
            if !(learning_rate > 0.0 && learning_rate.is_finite()) {
                return Err(AttackError::Config(format!("adam learning rate must be > 0, got {learning_rate}")));
            }
        }
        Ok(())
    }
}

/// Metrics after one optimiser iteration (iteration 0 is the initial dummy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub match_loss: f64,
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub recovered: Tensor,
    /// Soft labels in optimised-label mode, one row per sample.
    pub recovered_labels: Option<Vec<f32>>,
    pub curve: Vec<IterationRecord>,
    pub final_mse: f64,
    pub final_psnr: f64,
    pub success_iteration: Option<usize>,
    pub view: AttackView,
    /// Attempts discarded because the loss became non-finite.
    pub restarts: usize,
}

/// Mean squared pixel error and `10 log10(1 / mse)` for pixels in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn reconstruction_metrics(recovered: &Tensor, truth: &Tensor) -> Result<(f64, f64), AttackError> {
    if recovered.shape() != truth.shape() {
        return Err(AttackError::Shape {
            recovered: recovered.shape().to_vec(),
            truth: truth.shape().to_vec(),
        });
    }
    let mse = recovered
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        / truth.len() as f64;
    Ok((mse, psnr(mse)))
}

fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// The gradient of `truth` as the adversary sees it under `view`.
///
/// Quantized views use `policy`; the wrong-mode view decodes each tensor with the
/// other mode and that tensor's true float range.
pub fn observe(
    spec: &ModelSpec,
    params: &ParamSet,
    truth: &Batch,
    view: AttackView,
    policy: &QuantPolicy,
) -> Result<GradSet, AttackError> {
    let g = nn::backward(spec, params, truth)?;
    apply_view(&g, view, policy)
}

/// Transforms a float gradient into what `view` exposes.
pub fn apply_view(g: &GradSet, view: AttackView, policy: &QuantPolicy) -> Result<GradSet, AttackError> {
    if view == AttackView::RawFloat {
        return Ok(g.clone());
    }
    let q = quant::quantize_set(g, policy)?;
    Ok(match view {
        AttackView::RawFloat => unreachable!(),
        AttackView::DequantizedCorrect => quant::dequantize_set(&q)?,
        AttackView::IntPayloadAsFloat => {
            let entries = q
                .iter()
                .map(|e| ParamEntry {
                    layer_index: e.layer_index,
                    role: e.role,
                    tensor: Tensor::new(e.tensor.shape.clone(), e.tensor.payload.iter().map(|&v| v as f32).collect())
                        .expect("payload matches shape"),
                })
                .collect();
            ParamSet::new(entries)
        }
        AttackView::DequantizedWrongMode => {
            let entries = q
                .iter()
                .zip(g.iter())
                .map(|(e, raw)| {
                    let (lo, hi) = raw.tensor.min_max();
                    Ok(ParamEntry {
                        layer_index: e.layer_index,
                        role: e.role,
                        tensor: quant::dequantize_as(&e.tensor, e.tensor.mode.other(), lo, hi)?,
                    })
                })
                .collect::<Result<_, AttackError>>()?;
            ParamSet::new(entries)
        }
    })
}

fn match_loss(g: &GradSet, target: &GradSet) -> f64 {
    g.iter()
        .zip(target.iter())
        .flat_map(|(a, b)| a.tensor.data().iter().zip(b.tensor.data()))
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum()
}

/// `sum over tensors of ||backward(dummy) - target||^2`.
pub fn gradient_match_loss(
    spec: &ModelSpec,
    params: &ParamSet,
    dummy: &Batch,
    target: &GradSet,
) -> Result<f64, AttackError> {
    params.check_layout(target)?;
    Ok(match_loss(&nn::backward(spec, params, dummy)?, target))
}

/// Match loss against soft targets (rows of `targets` are label distributions).
pub(crate) fn soft_match_loss(
    spec: &ModelSpec,
    params: &ParamSet,
    inputs: &Tensor,
    targets: &[f32],
    target: &GradSet,
) -> Result<f64, AttackError> {
    let g = nn::soft_target_gradients(spec, params, inputs, targets)?;
    Ok(match_loss(&g.params, target))
}

/// Derivative of the soft-target match loss with respect to the dummy pixels, plus the loss.
pub(crate) fn soft_attack_gradient(
    spec: &ModelSpec,
    params: &ParamSet,
    inputs: &Tensor,
    targets: &[f32],
    target: &GradSet,
    method: GradientMethod,
) -> Result<(f64, Tensor), AttackError> {
    params.check_layout(target)?;
    let g = nn::soft_target_gradients(spec, params, inputs, targets)?;
    let loss = match_loss(&g.params, target);
    let grad = match method {
        GradientMethod::Analytic => {
            let residual = g.params.difference(target)?;
            nn::mixed_input_gradient(spec, params, inputs, targets, &residual)?.map(|v| 2.0 * v)
        }
        GradientMethod::FiniteDifference { h } => {
            let mut x = inputs.clone();
            let mut out = vec![0.0f32; x.len()];
            for (i, o) in out.iter_mut().enumerate() {
                let orig = x.data()[i];
                x.data_mut()[i] = orig + h;
                let plus = soft_match_loss(spec, params, &x, targets, target)?;
                x.data_mut()[i] = orig - h;
                let minus = soft_match_loss(spec, params, &x, targets, target)?;
                x.data_mut()[i] = orig;
                *o = ((plus - minus) / (2.0 * f64::from(h))) as f32;
            }
            Tensor::new(inputs.shape().to_vec(), out)?
        }
    };
    Ok((loss, grad))
}

/// `d gradient_match_loss / d dummy.inputs`.
pub fn attack_gradient(
    spec: &ModelSpec,
    params: &ParamSet,
    dummy: &Batch,
    target: &GradSet,
    method: GradientMethod,
) -> Result<Tensor, AttackError> {
    let targets = nn::one_hot(&dummy.labels, spec.classes());
    if let Some(&label) = dummy.labels.iter().find(|&&l| l >= spec.classes()) {
        return Err(NnError::Label {
            label,
            classes: spec.classes(),
        }
        .into());
    }
    Ok(soft_attack_gradient(spec, params, &dummy.inputs, &targets, target, method)?.1)
}

/// Uniform `[0, 1)` dummy pixels shaped like `truth.inputs`.
pub fn initial_dummy<R: Rng + ?Sized>(truth: &Tensor, rng: &mut R) -> Tensor {
    let data = (0..truth.len()).map(|_| rng.random::<f32>()).collect();
    Tensor::new(truth.shape().to_vec(), data).expect("same shape")
}

/// Seed of attempt `k` for a configured base seed.
pub(crate) fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    rng::derive_seed(seed, &[0xA77A, attempt as u64])
}
