//! `FSEQ` feature container: `"FSEQ"`, then little-endian `u32` version, `u32`
//! frame count n, `u32` width d, then n·d little-endian `f32` row-major.
//! Values are stored at 32-bit precision and widened on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"FSEQ";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(x: &Matrix) -> Result<Vec<u8>> {
    let (n, d) = x.shape();
    if n == 0 {
        return Err(Error::Input("refusing to save a sequence with no frames".into()));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, n as u32, d as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in x.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("feature file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("missing FSEQ magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (version, n, d) = (word(1), word(2), word(3));
    if version != FEATURE_VERSION as usize {
        return Err(Error::Format(format!("unsupported feature version {version}")));
    }
    if n == 0 {
        return Err(Error::Format("feature file holds no frames".into()));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format(format!("header shape {n}x{d} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "header says {n}x{d} ({expected} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::from_vec(n, d, data)
}

pub fn save_features(path: &Path, x: &Matrix) -> Result<()> {
    let buf = encode_features(x)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Rounds every entry to the nearest `f32`, i.e. what a save/load cycle keeps.
pub fn round_to_f32(x: &Matrix) -> Matrix {
    x.map(|v| v as f32 as f64)
}
