//! Flat little-endian tensor encoding used by checkpoints.
//!
//! ```text
//! offset  size       field
//! 0       4          magic "LRTT"
//! 4       1          format version (1)
//! 5       1          dtype tag (1 = f32, 2 = f64)
//! 6       2          rank, u16 LE
//! 8       8*rank     dims, u64 LE each
//! ...     n*width    elements, row-major, LE
//! ```

use alloc::format;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Real, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"LRTT";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;
const VERSION: u8 = 1;

#[cfg(not(feature = "f32"))]
const NATIVE: u8 = DTYPE_F64;
#[cfg(feature = "f32")]
const NATIVE: u8 = DTYPE_F32;

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(VERSION);
    out.push(NATIVE);
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Decode(format!("truncated at byte {at}")))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Decodes one tensor, returning it and the number of bytes consumed. Both
/// dtypes are accepted and converted to [`Real`].
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != TENSOR_MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let head = take(bytes, &mut at, 4)?;
    if head[0] != VERSION {
        return Err(Error::Decode(format!("unsupported version {}", head[0])));
    }
    let dtype = head[1];
    let rank = u16::from_le_bytes([head[2], head[3]]) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::Decode("dimension overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Decode("element count overflow".into()))?;
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(Error::Decode(format!("unknown dtype tag {other}"))),
    };
    let raw = take(bytes, &mut at, n.checked_mul(width).ok_or_else(|| Error::Decode("size overflow".into()))?)?;
    let data = raw
        .chunks_exact(width)
        .map(|c| match dtype {
            DTYPE_F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real,
            _ => f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real,
        })
        .collect();
    Ok((Tensor::new(shape, data)?, at))
}
