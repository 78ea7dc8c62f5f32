//! Quantize/dequantize for the two modes.
//!
//! Scale computations run in `f64` and the stored ranges are rounded to `f32`;
//! the payload is always clamped to the target type bounds.

use super::{BitWidth, CodecError, QuantMode, QuantPolicy, QuantizedEntry, QuantizedGradSet, QuantizedTensor};
use crate::nn::{GradSet, ParamEntry, ParamSet};
use crate::tensor::Tensor;

/// Sentinel scale used when a range bound has the wrong sign for its type bound.
const MAX_FLOAT: f64 = f32::MAX as f64;

fn check_input(x: &Tensor, in_min: f32, in_max: f32) -> Result<(), CodecError> {
    if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(CodecError::NonFinite { index, value });
    }
    if !(in_min.is_finite() && in_max.is_finite() && in_min <= in_max) {
        return Err(CodecError::InvalidRange {
            min: in_min,
            max: in_max,
        });
    }
    Ok(())
}

/// Scale factor of the SCALED mode for an input range.
fn scaled_factor(bits: BitWidth, in_min: f64, in_max: f64) -> f64 {
    if in_min == 0.0 && in_max == 0.0 {
        return 1.0;
    }
    let (min_t, max_t) = (f64::from(bits.min_t()), f64::from(bits.max_t()));
    let min_sf = if min_t * in_min > 0.0 { min_t / in_min } else { MAX_FLOAT };
    let max_sf = if max_t * in_max > 0.0 { max_t / in_max } else { MAX_FLOAT };
    min_sf.min(max_sf).min(MAX_FLOAT)
}

/// Range a quantizer in `mode` stores for the input range `[in_min, in_max]`.
pub fn stored_range(bits: BitWidth, mode: QuantMode, in_min: f32, in_max: f32) -> (f32, f32) {
    match mode {
        QuantMode::Scaled => {
            let s = scaled_factor(bits, f64::from(in_min), f64::from(in_max));
            (
                (f64::from(bits.min_t()) / s) as f32,
                (f64::from(bits.max_t()) / s) as f32,
            )
        }
        QuantMode::MinCombined => (in_min, in_max),
    }
}

fn clamp_to_type(v: f64, bits: BitWidth) -> i32 {
    v.clamp(f64::from(bits.min_t()), f64::from(bits.max_t())) as i32
}

/// Quantizes `x` against the input range `[in_min, in_max]`.
///
/// Values outside the range are clamped. Rounding is half-to-even.
pub fn quantize(
    x: &Tensor,
    bits: BitWidth,
    mode: QuantMode,
    in_min: f32,
    in_max: f32,
) -> Result<QuantizedTensor, CodecError> {
    check_input(x, in_min, in_max)?;
    let (lo, hi) = (f64::from(in_min), f64::from(in_max));
    let (min_t, max_t) = (f64::from(bits.min_t()), f64::from(bits.max_t()));
    let (payload, min_range, max_range) = match mode {
        QuantMode::Scaled => {
            let s = scaled_factor(bits, lo, hi);
            let (min_r, max_r) = (min_t / s, max_t / s);
            let payload = x
                .data()
                .iter()
                .map(|&v| clamp_to_type((f64::from(v).clamp(min_r, max_r) * s).round_ties_even(), bits))
                .collect();
            (payload, min_r as f32, max_r as f32)
        }
        QuantMode::MinCombined => {
            let span = hi - lo;
            let payload = if span == 0.0 {
                vec![0; x.len()]
            } else {
                x.data()
                    .iter()
                    .map(|&v| {
                        let unit = (f64::from(v).clamp(lo, hi) - lo) / span;
                        clamp_to_type((unit * (max_t - min_t)).round_ties_even() + min_t, bits)
                    })
                    .collect()
            };
            (payload, in_min, in_max)
        }
    };
    Ok(QuantizedTensor {
        bits,
        mode,
        min_range,
        max_range,
        shape: x.shape().to_vec(),
        payload,
    })
}

/// [`quantize`] with the tensor's own `(min, max)` as input range.
pub fn quantize_full_range(x: &Tensor, bits: BitWidth, mode: QuantMode) -> Result<QuantizedTensor, CodecError> {
    let (lo, hi) = x.min_max();
    quantize(x, bits, mode, lo, hi)
}

fn decode_values(payload: &[i32], bits: BitWidth, mode: QuantMode, min_range: f32, max_range: f32) -> Vec<f32> {
    let (min_t, max_t) = (f64::from(bits.min_t()), f64::from(bits.max_t()));
    let (lo, hi) = (f64::from(min_range), f64::from(max_range));
    match mode {
        QuantMode::Scaled => {
            // Signed targets only: the unsigned `min(T) == 0` branch never applies.
            let s = (lo / min_t).max(hi / max_t);
            payload.iter().map(|&q| (f64::from(q) * s) as f32).collect()
        }
        QuantMode::MinCombined => {
            let step = (hi - lo) / (max_t - min_t);
            payload
                .iter()
                .map(|&q| ((f64::from(q) - min_t) * step + lo) as f32)
                .collect()
        }
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor, CodecError> {
    q.validate()?;
    let values = decode_values(&q.payload, q.bits, q.mode, q.min_range, q.max_range);
    Ok(Tensor::new(q.shape.clone(), values)?)
}

/// Dequantizes the payload as if it had been produced in `mode` from the float
/// range `[in_min, in_max]`, ignoring the mode and ranges carried by `q`.
///
/// This is what an adversary who knows the float range but has to guess the mode
/// can compute. With the true mode and range it equals [`dequantize`].
pub fn dequantize_as(q: &QuantizedTensor, mode: QuantMode, in_min: f32, in_max: f32) -> Result<Tensor, CodecError> {
    q.validate()?;
    if !(in_min.is_finite() && in_max.is_finite() && in_min <= in_max) {
        return Err(CodecError::InvalidRange {
            min: in_min,
            max: in_max,
        });
    }
    let (lo, hi) = stored_range(q.bits, mode, in_min, in_max);
    let values = decode_values(&q.payload, q.bits, mode, lo, hi);
    Ok(Tensor::new(q.shape.clone(), values)?)
}

/// Quantizes each tensor with its policy entry and its own `(min, max)` range.
pub fn quantize_set(g: &GradSet, policy: &QuantPolicy) -> Result<QuantizedGradSet, CodecError> {
    let entries = g
        .iter()
        .map(|e| {
            let rule = policy.lookup(e.layer_index, e.role).ok_or(CodecError::PolicyGap {
                layer_index: e.layer_index,
                role: e.role,
            })?;
            Ok(QuantizedEntry {
                layer_index: e.layer_index,
                role: e.role,
                tensor: quantize_full_range(&e.tensor, rule.bits, rule.mode)?,
            })
        })
        .collect::<Result<_, CodecError>>()?;
    Ok(QuantizedGradSet { entries })
}

pub fn dequantize_set(qg: &QuantizedGradSet) -> Result<GradSet, CodecError> {
    let entries = qg
        .iter()
        .map(|e| {
            Ok(ParamEntry {
                layer_index: e.layer_index,
                role: e.role,
                tensor: dequantize(&e.tensor)?,
            })
        })
        .collect::<Result<_, CodecError>>()?;
    Ok(ParamSet::new(entries))
}
