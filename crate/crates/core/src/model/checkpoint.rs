//! Binary model container.
//!
//! All integers are little-endian `u32`, all weights little-endian `f64`:
//!
//! ```text
//! "TPSR"                      magic
//! version                     currently 1
//! feature_dim pattern_dim num_patterns attn_dim value_dim hidden_dim
//! num_classes num_units layer_norm(0|1)
//! class_count, then per class: byte_len, UTF-8 bytes
//! matrix_count, then per matrix: rows, cols, rows·cols f64 (row-major)
//! ```
//!
//! Matrices follow [`TransParserModel::params`] order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{ModelConfig, TransParserModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPSR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, model: &TransParserModel, classes: &[String]) -> std::io::Result<()> {
    let c = &model.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        CHECKPOINT_VERSION,
        c.feature_dim as u32,
        c.pattern_dim as u32,
        c.num_patterns as u32,
        c.attn_dim as u32,
        c.value_dim as u32,
        c.hidden_dim as u32,
        c.num_classes as u32,
        c.num_units as u32,
        c.layer_norm as u32,
        classes.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for name in classes {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
    }
    let params = model.params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for m in params {
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &TransParserModel, classes: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, classes).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(TransParserModel, Vec<String>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading checkpoint: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a TPSR checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig {
        feature_dim: cur.u32()?,
        pattern_dim: cur.u32()?,
        num_patterns: cur.u32()?,
        attn_dim: cur.u32()?,
        value_dim: cur.u32()?,
        hidden_dim: cur.u32()?,
        num_classes: cur.u32()?,
        num_units: cur.u32()?,
        layer_norm: match cur.u32()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("bad layer_norm flag {v}"))),
        },
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

    let class_count = cur.u32()?;
    let mut classes = Vec::with_capacity(class_count.min(1 << 16));
    for _ in 0..class_count {
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("class name is not UTF-8".into()))?;
        classes.push(name.to_string());
    }

    // a template model fixes the expected shapes
    let mut model = TransParserModel::new(config, 0)?;
    let expected: Vec<(usize, usize)> = model.params().iter().map(|m| m.shape()).collect();
    let count = cur.u32()?;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} matrices, config needs {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for &(er, ec) in &expected {
        let (rows, cols) = (cur.u32()?, cur.u32()?);
        if (rows, cols) != (er, ec) {
            return Err(Error::Format(format!(
                "matrix shape {rows}x{cols} does not match expected {er}x{ec}"
            )));
        }
        let data = (0..rows * cols).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        values.push(Matrix::from_vec(rows, cols, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - cur.pos
        )));
    }
    model.set_params(&values)?;
    Ok((model, classes))
}

pub fn load_checkpoint(path: &Path) -> Result<(TransParserModel, Vec<String>)> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}
