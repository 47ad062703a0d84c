use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth or predicted sub-action structure of one action instance.
///
/// `starts` holds the internal sub-action start frames only. Frame 0 always
/// starts the first sub-action and is never listed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub id: String,
    pub label: String,
    pub length: usize,
    pub starts: Vec<usize>,
}

impl Segmentation {
    pub fn new(
        id: impl Into<String>,
        label: impl Into<String>,
        length: usize,
        starts: Vec<usize>,
    ) -> Result<Self> {
        let seg = Self {
            id: id.into(),
            label: label.into(),
            length,
            starts,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_starts(&self.starts, self.length)
            .map_err(|e| Error::Validation(format!("instance {}: {e}", self.id)))
    }

    pub fn num_segments(&self) -> usize {
        self.starts.len() + 1
    }

    /// Frame ranges of the sub-actions, in order.
    pub fn segments(&self) -> Vec<Range<usize>> {
        segments_from_starts(&self.starts, self.length)
    }
}

/// Checks that `starts` is strictly increasing inside `[1, length)`.
pub(crate) fn validate_starts(starts: &[usize], length: usize) -> std::result::Result<(), String> {
    for w in starts.windows(2) {
        if w[0] >= w[1] {
            return Err(format!("starts not strictly increasing: {starts:?}"));
        }
    }
    match (starts.first(), starts.last()) {
        (Some(&0), _) => Err("frame 0 cannot be an internal boundary".into()),
        (_, Some(&last)) if last >= length => {
            Err(format!("boundary {last} outside sequence of length {length}"))
        }
        _ => Ok(()),
    }
}

pub fn segments_from_starts(starts: &[usize], length: usize) -> Vec<Range<usize>> {
    let mut out = Vec::with_capacity(starts.len() + 1);
    let mut prev = 0;
    for &s in starts {
        out.push(prev..s);
        prev = s;
    }
    out.push(prev..length);
    out
}

/// Parser output for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseResult {
    pub id: String,
    /// Predicted internal start frames, strictly increasing within `[1, n)`.
    pub starts: Vec<usize>,
    /// Per-frame representative index (pattern or cluster).
    pub representatives: Vec<usize>,
}

impl ParseResult {
    /// Reads starts off a label sequence: frame `s` starts a new sub-action
    /// when its label differs from frame `s - 1`.
    pub fn from_labels(id: impl Into<String>, labels: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            starts: transitions(&labels),
            representatives: labels,
        }
    }
}

pub fn transitions(labels: &[usize]) -> Vec<usize> {
    (1..labels.len())
        .filter(|&s| labels[s - 1] != labels[s])
        .collect()
}
