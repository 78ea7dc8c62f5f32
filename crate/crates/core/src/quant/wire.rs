//! Little-endian transport encoding of a [`QuantizedGradSet`].
//!
//! ```text
//! message := "QGS1" version:u16 count:u32 tensor*
//! tensor  := layer:u16 role:u8 bits:u8 mode:u8 rank:u8 dims:u32*rank
//!            min_range:f32 max_range:f32 payload:(elements * bits/8 bytes, two's complement)
//! ```

use thiserror::Error;

use super::{BitWidth, QuantMode, QuantizedEntry, QuantizedGradSet, QuantizedTensor};
use crate::nn::Role;

pub const MAGIC: [u8; 4] = *b"QGS1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("bad magic {found:02x?} at offset {offset}")]
    BadMagic { offset: usize, found: Vec<u8> },
    #[error("unsupported version {found} at offset {offset}")]
    BadVersion { offset: usize, found: u16 },
    #[error("truncated {field} at offset {offset} (need {needed} bytes, {available} left)")]
    Truncated {
        offset: usize,
        field: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("invalid {field} value {value} at offset {offset}")]
    InvalidField {
        offset: usize,
        field: &'static str,
        value: String,
    },
    #[error("{count} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("{field} value {value} does not fit the wire format")]
    Overflow { field: &'static str, value: String },
}

fn fits<T: TryFrom<usize>>(v: usize, field: &'static str) -> Result<T, WireError> {
    T::try_from(v).map_err(|_| WireError::Overflow {
        field,
        value: v.to_string(),
    })
}

pub fn encode(qg: &QuantizedGradSet) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(super::accounting::encoded_len(qg));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&fits::<u32>(qg.len(), "tensor_count")?.to_le_bytes());
    for entry in qg.iter() {
        let t = &entry.tensor;
        t.validate().map_err(|e| WireError::Overflow {
            field: "tensor",
            value: e.to_string(),
        })?;
        out.extend_from_slice(&fits::<u16>(entry.layer_index, "layer_index")?.to_le_bytes());
        out.push(entry.role.wire_id());
        out.push(t.bits.bits() as u8);
        out.push(t.mode.wire_id());
        out.push(fits::<u8>(t.shape.len(), "rank")?);
        for &d in &t.shape {
            out.extend_from_slice(&fits::<u32>(d, "dim")?.to_le_bytes());
        }
        out.extend_from_slice(&t.min_range.to_le_bytes());
        out.extend_from_slice(&t.max_range.to_le_bytes());
        match t.bits {
            BitWidth::Int8 => out.extend(t.payload.iter().map(|&v| v as i8 as u8)),
            BitWidth::Int16 => {
                for &v in &t.payload {
                    out.extend_from_slice(&(v as i16).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], WireError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(WireError::Truncated {
                offset: self.pos,
                field,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N], WireError> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, WireError> {
        Ok(self.array::<1>(field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.array(field)?))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }

    fn f32(&mut self, field: &'static str) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.array(field)?))
    }
}

fn invalid(offset: usize, field: &'static str, value: impl ToString) -> WireError {
    WireError::InvalidField {
        offset,
        field,
        value: value.to_string(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<QuantizedGradSet, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(WireError::BadMagic {
            offset: 0,
            found: magic.to_vec(),
        });
    }
    let at = r.pos;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(WireError::BadVersion {
            offset: at,
            found: version,
        });
    }
    let count = r.u32("tensor_count")? as usize;
    // Every tensor needs at least 18 header bytes; reject absurd counts before allocating.
    let mut entries = Vec::with_capacity(count.min(bytes.len() / 18 + 1));
    for _ in 0..count {
        let layer_index = usize::from(r.u16("layer_index")?);
        let at = r.pos;
        let role_id = r.u8("role")?;
        let role = Role::from_wire_id(role_id).ok_or_else(|| invalid(at, "role", role_id))?;
        let at = r.pos;
        let bits_raw = r.u8("bits")?;
        let bits = BitWidth::try_from(u32::from(bits_raw)).map_err(|_| invalid(at, "bits", bits_raw))?;
        let at = r.pos;
        let mode_id = r.u8("mode")?;
        let mode = QuantMode::from_wire_id(mode_id).ok_or_else(|| invalid(at, "mode", mode_id))?;
        let at = r.pos;
        let rank = usize::from(r.u8("rank")?);
        if rank == 0 {
            return Err(invalid(at, "rank", 0));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut elements = 1usize;
        for _ in 0..rank {
            let at = r.pos;
            let d = r.u32("dims")? as usize;
            if d == 0 {
                return Err(invalid(at, "dims", 0));
            }
            elements = elements.checked_mul(d).ok_or_else(|| invalid(at, "dims", d))?;
            shape.push(d);
        }
        let at = r.pos;
        let min_range = r.f32("min_range")?;
        let max_range = r.f32("max_range")?;
        if !(min_range.is_finite() && max_range.is_finite() && min_range <= max_range) {
            return Err(invalid(at, "range", format!("[{min_range}, {max_range}]")));
        }
        let needed = elements
            .checked_mul(bits.bytes())
            .ok_or_else(|| invalid(at, "dims", elements))?;
        let raw = r.take(needed, "payload")?;
        let payload = match bits {
            BitWidth::Int8 => raw.iter().map(|&b| i32::from(b as i8)).collect(),
            BitWidth::Int16 => raw
                .chunks_exact(2)
                .map(|c| i32::from(i16::from_le_bytes([c[0], c[1]])))
                .collect(),
        };
        entries.push(QuantizedEntry {
            layer_index,
            role,
            tensor: QuantizedTensor {
                bits,
                mode,
                min_range,
                max_range,
                shape,
                payload,
            },
        });
    }
    if r.pos != bytes.len() {
        return Err(WireError::TrailingBytes {
            offset: r.pos,
            count: bytes.len() - r.pos,
        });
    }
    Ok(QuantizedGradSet { entries })
}
