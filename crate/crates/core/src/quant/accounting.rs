//! Transmission size accounting and the attacker's mode search space.

use num_bigint::BigUint;

use super::{CodecError, QuantizedGradSet};
use crate::nn::GradSet;

/// Magic, version and tensor count.
pub const MESSAGE_HEADER_BYTES: usize = 4 + 2 + 4;

/// Per-tensor header: layer, role, bits, mode, rank, dims, min/max range.
fn tensor_header_bytes(rank: usize) -> usize {
    2 + 1 + 1 + 1 + 1 + 4 * rank + 4 + 4
}

/// Header bytes for a message carrying tensors with the given shapes.
pub fn message_header_bytes<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> usize {
    MESSAGE_HEADER_BYTES
        + shapes
            .into_iter()
            .map(|s| tensor_header_bytes(s.len()))
            .sum::<usize>()
}

/// Bytes of tensor values only, excluding all headers.
pub trait PayloadBytes {
    fn payload_bytes(&self) -> usize;

    /// Header bytes the same tensors would carry in a wire message.
    fn header_bytes(&self) -> usize;

    fn message_bytes(&self) -> usize {
        self.payload_bytes() + self.header_bytes()
    }
}

impl PayloadBytes for GradSet {
    fn payload_bytes(&self) -> usize {
        4 * self.num_elements()
    }

    fn header_bytes(&self) -> usize {
        message_header_bytes(self.iter().map(|e| e.tensor.shape()))
    }
}

impl PayloadBytes for QuantizedGradSet {
    fn payload_bytes(&self) -> usize {
        self.iter().map(|e| e.tensor.len() * e.tensor.bits.bytes()).sum()
    }

    fn header_bytes(&self) -> usize {
        message_header_bytes(self.iter().map(|e| e.tensor.shape.as_slice()))
    }
}

/// Size of a float32 message with the quantized layout's headers.
pub fn float_message_bytes(g: &GradSet) -> usize {
    g.message_bytes()
}

pub(super) fn encoded_len(qg: &QuantizedGradSet) -> usize {
    qg.message_bytes()
}

/// `modes^layers`: decodings an attacker must try when every layer may use any of `modes` modes.
pub fn attack_search_space(modes: u32, layers: u32) -> Result<BigUint, CodecError> {
    if modes == 0 || layers == 0 {
        return Err(CodecError::SearchSpace { modes, layers });
    }
    Ok(BigUint::from(modes).pow(layers))
}
