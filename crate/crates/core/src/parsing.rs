//! Sub-action boundaries from attention responses.
//!
//! Each frame's representative is its most-attended pattern. A new
//! sub-action starts at frame `s` whenever the representatives of `s - 1` and
//! `s` differ. Frame 0 is never reported.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{forward, TransParserModel};
use crate::types::{transitions, ParseResult};

/// Parses an n x m response matrix.
///
/// `smoothing_window`, when given, must be odd; the representative sequence
/// is then majority-filtered over that window before transitions are read.
pub fn extract_boundaries(
    id: impl Into<String>,
    responses: &Matrix,
    smoothing_window: Option<usize>,
) -> Result<ParseResult> {
    if responses.rows() == 0 || responses.cols() == 0 {
        return Err(Error::Input("empty response matrix".into()));
    }
    let mut reps = responses.argmax_rows();
    if let Some(w) = smoothing_window {
        reps = majority_filter(&reps, w)?;
    }
    Ok(ParseResult {
        id: id.into(),
        starts: transitions(&reps),
        representatives: reps,
    })
}

/// Runs the model on one sequence and parses its last unit's responses.
pub fn parse_sequence(
    id: impl Into<String>,
    features: &Matrix,
    model: &TransParserModel,
    smoothing_window: Option<usize>,
) -> Result<ParseResult> {
    let trace = forward(features, model)?;
    extract_boundaries(id, trace.last_response(), smoothing_window)
}

/// Sliding majority vote over a centred window, truncated at the ends.
///
/// On a tied vote the previous output is kept if it is among the winners,
/// otherwise the frame's own label if it is, otherwise the smallest winner.
pub fn majority_filter(labels: &[usize], window: usize) -> Result<Vec<usize>> {
    if window % 2 == 0 {
        return Err(Error::Input(format!("smoothing window must be odd, got {window}")));
    }
    let r = window / 2;
    let n = labels.len();
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for t in 0..n {
        let lo = t.saturating_sub(r);
        let hi = (t + r + 1).min(n);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in &labels[lo..hi] {
            *counts.entry(l).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        let winners: Vec<usize> = counts
            .iter()
            .filter(|&(_, &c)| c == best)
            .map(|(&l, _)| l)
            .collect();
        let pick = if winners.len() == 1 {
            winners[0]
        } else if let Some(&prev) = out.last().filter(|p| winners.contains(p)) {
            prev
        } else if winners.contains(&labels[t]) {
            labels[t]
        } else {
            winners[0]
        };
        out.push(pick);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One-hot-ish responses whose argmax follows `reps`.
    fn responses(reps: &[usize], m: usize) -> Matrix {
        let mut r = Matrix::filled(reps.len(), m, 0.1 / m as f64);
        for (t, &k) in reps.iter().enumerate() {
            r[(t, k)] = 0.9;
        }
        r
    }

    #[test]
    fn rule_trace() {
        let p = extract_boundaries("x", &responses(&[1, 1, 2, 2, 2, 3], 4), None).unwrap();
        assert_eq!(p.starts, vec![2, 5]);
        assert_eq!(p.representatives, vec![1, 1, 2, 2, 2, 3]);
    }

    #[test]
    fn constant_has_no_boundary() {
        let p = extract_boundaries("x", &responses(&[2; 7], 3), None).unwrap();
        assert!(p.starts.is_empty());
    }

    #[test]
    fn alternating_with_and_without_smoothing() {
        let r = responses(&[1, 2, 1, 2], 3);
        assert_eq!(extract_boundaries("x", &r, None).unwrap().starts, vec![1, 2, 3]);
        // t=0: {1,2} tie, keep own 1; t=1: 1,2,1 -> 1; t=2: 2,1,2 -> 2;
        // t=3: {1,2} tie, keep previous 2  =>  [1,1,2,2]
        let p = extract_boundaries("x", &r, Some(3)).unwrap();
        assert_eq!(p.representatives, vec![1, 1, 2, 2]);
        assert_eq!(p.starts, vec![2]);
    }

    #[test]
    fn window_one_is_identity() {
        let reps = [0, 3, 3, 1, 0, 0, 2];
        assert_eq!(majority_filter(&reps, 1).unwrap(), reps.to_vec());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            extract_boundaries("x", &Matrix::zeros(0, 3), None),
            Err(Error::Input(_))
        ));
        assert!(extract_boundaries("x", &responses(&[0, 1], 2), Some(2)).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let r = Matrix::from_rows(&[[0.5, 0.5], [0.2, 0.8]]);
        let p = extract_boundaries("x", &r, None).unwrap();
        assert_eq!(p.representatives, vec![0, 1]);
        assert_eq!(p.starts, vec![1]);
    }
}
