//! Flat binary tensor files used for depth maps, noise tensors and
//! checkpoints' float payloads.
//!
//! Layout (little endian):
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 4     | magic `CVT1`                             |
//! | 1     | dtype: 1 = f32, 2 = f64                  |
//! | 1     | rank `n`                                 |
//! | 2     | reserved, zero                           |
//! | 4 n   | dims as u32, outermost first             |
//! | ...   | row-major values                         |

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

pub const MAGIC: &[u8; 4] = b"CVT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

pub fn encode<T: Scalar>(array: &ArrayD<T>, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * array.ndim() + array.len() * 8);
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(array.ndim() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in array.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in array.iter() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(to_f64(v) as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&to_f64(v).to_le_bytes()),
        }
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ArrayD<T>> {
    let bad = |m: &str| Error::validation(format!("tensor file: {m}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let dtype = match bytes[4] {
        1 => DType::F32,
        2 => DType::F64,
        d => return Err(bad(&format!("unknown dtype {d}"))),
    };
    let rank = bytes[5] as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let body = &bytes[header..];
    if body.len() != count * width {
        return Err(bad(&format!(
            "expected {} payload bytes, found {}",
            count * width,
            body.len()
        )));
    }
    let values: Vec<T> = body
        .chunks_exact(width)
        .map(|c| match dtype {
            DType::F32 => lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
            DType::F64 => lit(f64::from_le_bytes(c.try_into().unwrap())),
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| bad(&e.to_string()))
}

pub fn write<T: Scalar>(path: &Path, array: &ArrayD<T>, dtype: DType) -> Result<()> {
    std::fs::write(path, encode(array, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
