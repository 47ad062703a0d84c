use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub starts: Vec<usize>,
}

pub fn write_predictions<W: Write>(mut w: W, preds: &[Prediction]) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io("<predictions>", e))?;
    }
    Ok(())
}

pub fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut buf = Vec::new();
    write_predictions(&mut buf, preds)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses JSON lines; starts must be strictly increasing and nonzero, ids unique.
pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<Prediction>> {
    let mut out: Vec<Prediction> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if p.starts.first() == Some(&0) || p.starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "line {}: starts of {} must be strictly increasing and positive",
                i + 1,
                p.id
            )));
        }
        if !seen.insert(p.id.clone()) {
            return Err(Error::Validation(format!("duplicate prediction for {}", p.id)));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path)
}
