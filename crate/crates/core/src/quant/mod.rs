//! Per-tensor gradient quantization, mixed-precision policies, the binary wire
//! format and payload accounting.

mod accounting;
mod codec;
mod policy;
mod wire;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, Role};
use crate::tensor::{numel, TensorError};

pub use accounting::{
    attack_search_space, float_message_bytes, message_header_bytes, PayloadBytes, MESSAGE_HEADER_BYTES,
};
pub use codec::{
    dequantize, dequantize_as, dequantize_set, quantize, quantize_full_range, quantize_set, stored_range,
};
pub use policy::{PolicyConfig, PolicyEntry, QuantPolicy};
pub use wire::{decode, encode, WireError, MAGIC, VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("invalid input range [{min}, {max}]")]
    InvalidRange { min: f32, max: f32 },
    #[error("corrupt payload: value {value} at index {index} outside the {bits}-bit range")]
    PayloadOutOfRange { index: usize, value: i32, bits: u8 },
    #[error("payload holds {got} values but shape {shape:?} needs {expected}")]
    PayloadLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("policy has no entry for layer {layer_index} {role}")]
    PolicyGap { layer_index: usize, role: Role },
    #[error("policy lists layer {layer_index} {role} more than once")]
    PolicyDuplicate { layer_index: usize, role: Role },
    #[error("unsupported bit width {0} (expected 8 or 16)")]
    BitWidth(u32),
    #[error("search space needs modes >= 1 and layers >= 1, got m={modes}, L={layers}")]
    SearchSpace { modes: u32, layers: u32 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Quantization formula family. The discriminant is the wire id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Symmetric scale chosen from the target type bounds.
    Scaled = 0,
    /// Affine map of `[min, max]` onto the full integer range.
    MinCombined = 1,
}

impl QuantMode {
    pub const ALL: [QuantMode; 2] = [QuantMode::Scaled, QuantMode::MinCombined];

    pub fn wire_id(self) -> u8 {
        self as u8
    }

    pub fn from_wire_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(QuantMode::Scaled),
            1 => Some(QuantMode::MinCombined),
            _ => None,
        }
    }

    /// The other mode (for two-mode mismatch experiments).
    pub fn other(self) -> Self {
        match self {
            QuantMode::Scaled => QuantMode::MinCombined,
            QuantMode::MinCombined => QuantMode::Scaled,
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::Scaled => "scaled",
            QuantMode::MinCombined => "min_combined",
        })
    }
}

/// Signed integer target type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BitWidth {
    Int8,
    Int16,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Int8 => 8,
            BitWidth::Int16 => 16,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    /// Smallest representable value, `-2^(b-1)`.
    pub fn min_t(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    /// Largest representable value, `2^(b-1) - 1`.
    pub fn max_t(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = CodecError;

    fn try_from(bits: u32) -> Result<Self, CodecError> {
        match bits {
            8 => Ok(BitWidth::Int8),
            16 => Ok(BitWidth::Int16),
            other => Err(CodecError::BitWidth(other)),
        }
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "int{}", self.bits())
    }
}

/// Integer payload plus the metadata needed to dequantize it.
///
/// `min_range`/`max_range` are the ranges the quantizer settled on (for
/// [`QuantMode::Scaled`] the adjusted `min_T/s, max_T/s`), not the caller's input range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub bits: BitWidth,
    pub mode: QuantMode,
    pub min_range: f32,
    pub max_range: f32,
    pub shape: Vec<usize>,
    pub payload: Vec<i32>,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let expected = numel(&self.shape);
        if self.shape.is_empty() || expected != self.payload.len() {
            return Err(CodecError::PayloadLength {
                shape: self.shape.clone(),
                expected,
                got: self.payload.len(),
            });
        }
        if !(self.min_range.is_finite() && self.max_range.is_finite() && self.min_range <= self.max_range) {
            return Err(CodecError::InvalidRange {
                min: self.min_range,
                max: self.max_range,
            });
        }
        let (lo, hi) = (self.bits.min_t(), self.bits.max_t());
        if let Some((index, &value)) = self.payload.iter().enumerate().find(|(_, &v)| v < lo || v > hi) {
            return Err(CodecError::PayloadOutOfRange {
                index,
                value,
                bits: self.bits.bits() as u8,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedEntry {
    pub layer_index: usize,
    pub role: Role,
    pub tensor: QuantizedTensor,
}

/// Quantized counterpart of a [`crate::nn::GradSet`], in the same order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantizedGradSet {
    pub entries: Vec<QuantizedEntry>,
}

impl QuantizedGradSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, QuantizedEntry> {
        self.entries.iter()
    }

    /// Bit width of each tensor, in order.
    pub fn bits(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.tensor.bits.bits()).collect()
    }
}
