//! Tolerance-matched boundary recall, precision and F1.
//!
//! A predicted start is correct if it lies strictly closer than `d` frames to
//! a ground-truth start. Thresholds are given either in frames (absolute) or as
//! a fraction of the sequence length (relative, `d * T` frames, no rounding).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// Each prediction and each ground truth is used at most once.
    #[default]
    OneToOne,
    /// Every prediction near any ground truth counts. Recall can exceed 1.
    Independent,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-to-one" => Ok(Self::OneToOne),
            "independent" => Ok(Self::Independent),
            _ => Err(Error::Input(format!("unknown match mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for MatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::OneToOne => "one-to-one",
            Self::Independent => "independent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Pool matched / predicted / ground-truth counts, then take ratios.
    #[default]
    Micro,
    /// Ratios per instance, then the mean over instances.
    Macro,
}

/// Number of matched predictions for sorted `pred` and `gt`.
///
/// In one-to-one mode this is the size of a maximum matching between the two
/// sets with edges for pairs closer than `d`. On a line, a single sweep that
/// pairs each ground truth with the leftmost still-free prediction in range
/// attains the maximum.
pub fn match_boundaries(pred: &[usize], gt: &[usize], d: f64, mode: MatchMode) -> usize {
    match mode {
        MatchMode::Independent => pred
            .iter()
            .filter(|&&p| nearest_distance(p, gt).is_some_and(|dist| dist < d))
            .count(),
        MatchMode::OneToOne => {
            let (mut i, mut j, mut matched) = (0, 0, 0);
            while i < pred.len() && j < gt.len() {
                let (p, g) = (pred[i] as f64, gt[j] as f64);
                if (p - g).abs() < d {
                    matched += 1;
                    i += 1;
                    j += 1;
                } else if p < g {
                    i += 1;
                } else {
                    j += 1;
                }
            }
            matched
        }
    }
}

fn nearest_distance(p: usize, gt: &[usize]) -> Option<f64> {
    let k = gt.partition_point(|&g| g < p);
    let right = gt.get(k).map(|&g| (g - p) as f64);
    let left = k.checked_sub(1).map(|i| (p - gt[i]) as f64);
    match (left, right) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl Scores {
    /// Ratios from raw counts, with the empty-set conventions:
    /// no predictions gives precision 1 only if there is also no ground truth,
    /// and likewise for recall. F1 is 0 when both ratios are 0.
    pub fn from_counts(matched: usize, num_pred: usize, num_gt: usize) -> Self {
        let ratio = |den: usize, other: usize| match den {
            0 if other == 0 => 1.0,
            0 => 0.0,
            _ => matched as f64 / den as f64,
        };
        let recall = ratio(num_gt, num_pred);
        let precision = ratio(num_pred, num_gt);
        Self {
            recall,
            precision,
            f1: harmonic(recall, precision),
        }
    }
}

fn harmonic(r: f64, p: f64) -> f64 {
    if r + p == 0.0 {
        0.0
    } else {
        2.0 * r * p / (r + p)
    }
}

pub fn recall_prec_f1(pred: &[usize], gt: &[usize], d: f64, mode: MatchMode) -> Scores {
    Scores::from_counts(match_boundaries(pred, gt, d, mode), pred.len(), gt.len())
}

/// One instance to score: sorted predicted and ground-truth starts plus its length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub pred: Vec<usize>,
    pub gt: Vec<usize>,
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    Rel,
    Abs,
}

impl ThresholdKind {
    fn frames(self, d: f64, length: usize) -> f64 {
        match self {
            Self::Rel => d * length as f64,
            Self::Abs => d,
        }
    }
}

/// 0.05, 0.10, ..., 0.50
pub fn relative_thresholds() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 20.0).collect()
}

/// 5, 10, ..., 50 frames
pub fn absolute_thresholds() -> Vec<f64> {
    (1..=10).map(|i| 5.0 * i as f64).collect()
}

/// Scores pooled over a dataset at one threshold.
pub fn score_at(
    items: &[EvalItem],
    kind: ThresholdKind,
    d: f64,
    mode: MatchMode,
    averaging: Averaging,
) -> Scores {
    match averaging {
        Averaging::Micro => {
            let (mut m, mut np, mut ng) = (0, 0, 0);
            for it in items {
                m += match_boundaries(&it.pred, &it.gt, kind.frames(d, it.length), mode);
                np += it.pred.len();
                ng += it.gt.len();
            }
            Scores::from_counts(m, np, ng)
        }
        Averaging::Macro => {
            let per: Vec<Scores> = items
                .iter()
                .map(|it| recall_prec_f1(&it.pred, &it.gt, kind.frames(d, it.length), mode))
                .collect();
            mean_scores(&per)
        }
    }
}

fn mean_scores(s: &[Scores]) -> Scores {
    if s.is_empty() {
        return Scores::default();
    }
    let n = s.len() as f64;
    Scores {
        recall: s.iter().map(|x| x.recall).sum::<f64>() / n,
        precision: s.iter().map(|x| x.precision).sum::<f64>() / n,
        f1: s.iter().map(|x| x.f1).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold_kind: ThresholdKind,
    pub d: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: MatchMode,
    pub averaging: Averaging,
    pub rel: Vec<ThresholdRow>,
    pub abs: Vec<ThresholdRow>,
    /// Means over the relative sweep.
    pub avg_rel: Scores,
    /// Means over the absolute sweep.
    pub avg_abs: Scores,
}

pub const AVG_REL_NAME: &str = "avg. F1-score (rel.)";
pub const AVG_ABS_NAME: &str = "avg. F1-score (abs.)";

pub fn sweep(items: &[EvalItem], mode: MatchMode, averaging: Averaging) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let run = |kind: ThresholdKind, ds: Vec<f64>| -> (Vec<ThresholdRow>, Scores) {
        let rows: Vec<ThresholdRow> = ds
            .into_iter()
            .map(|d| {
                let s = score_at(items, kind, d, mode, averaging);
                ThresholdRow {
                    threshold_kind: kind,
                    d,
                    recall: s.recall,
                    precision: s.precision,
                    f1: s.f1,
                }
            })
            .collect();
        let scores: Vec<Scores> = rows
            .iter()
            .map(|r| Scores {
                recall: r.recall,
                precision: r.precision,
                f1: r.f1,
            })
            .collect();
        (rows, mean_scores(&scores))
    };
    let (rel, avg_rel) = run(ThresholdKind::Rel, relative_thresholds());
    let (abs, avg_abs) = run(ThresholdKind::Abs, absolute_thresholds());
    Ok(MetricReport {
        mode,
        averaging,
        rel,
        abs,
        avg_rel,
        avg_abs,
    })
}

impl MetricReport {
    /// The two headline numbers, by name.
    pub fn averages(&self) -> [(&'static str, f64); 2] {
        [(AVG_REL_NAME, self.avg_rel.f1), (AVG_ABS_NAME, self.avg_abs.f1)]
    }

    /// Header, ten rows per kind, and one `avg` row per kind.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Format(format!("writing CSV: {e}"));
        out.write_record(["threshold_kind", "d", "recall", "precision", "f1"])
            .map_err(csv_err)?;
        for (kind, rows, avg) in [("rel", &self.rel, self.avg_rel), ("abs", &self.abs, self.avg_abs)] {
            for r in rows {
                out.write_record([
                    kind.to_string(),
                    format!("{}", r.d),
                    format!("{:.6}", r.recall),
                    format!("{:.6}", r.precision),
                    format!("{:.6}", r.f1),
                ])
                .map_err(csv_err)?;
            }
            out.write_record([
                kind.to_string(),
                "avg".to_string(),
                format!("{:.6}", avg.recall),
                format!("{:.6}", avg.precision),
                format!("{:.6}", avg.f1),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Format(format!("writing CSV: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Maximum matching by trying every subset of predictions against every
    /// injective assignment, via DP over ground-truth bitmasks.
    fn brute_one_to_one(pred: &[usize], gt: &[usize], d: f64) -> usize {
        let g = gt.len();
        let mut reach: Vec<Option<usize>> = vec![None; 1 << g];
        reach[0] = Some(0);
        for &p in pred {
            let prev = reach.clone();
            for mask in 0..(1usize << g) {
                let Some(c) = prev[mask] else { continue };
                for (j, &gj) in gt.iter().enumerate() {
                    if mask & (1 << j) == 0 && (p as f64 - gj as f64).abs() < d {
                        let nm = mask | (1 << j);
                        reach[nm] = Some(reach[nm].map_or(c + 1, |v| v.max(c + 1)));
                    }
                }
            }
        }
        reach.iter().flatten().copied().max().unwrap_or(0)
    }

    #[test]
    fn near_matches() {
        assert_eq!(match_boundaries(&[11, 19, 31], &[10, 20, 30], 2.0, MatchMode::OneToOne), 3);
        assert_eq!(brute_one_to_one(&[11, 19, 31], &[10, 20, 30], 2.0), 3);
    }

    #[test]
    fn empty_pred() {
        for mode in [MatchMode::OneToOne, MatchMode::Independent] {
            assert_eq!(match_boundaries(&[], &[3, 8], 100.0, mode), 0);
            assert_eq!(recall_prec_f1(&[], &[3, 8], 5.0, mode), Scores::default());
        }
    }

    #[test]
    fn mode_divergence() {
        let pred = [10, 11];
        assert_eq!(match_boundaries(&pred, &[10], 2.0, MatchMode::Independent), 2);
        assert_eq!(match_boundaries(&pred, &[10], 2.0, MatchMode::OneToOne), 1);
        assert_eq!(brute_one_to_one(&pred, &[10], 2.0), 1);
        // independent recall is not capped
        assert_eq!(recall_prec_f1(&pred, &[10], 2.0, MatchMode::Independent).recall, 2.0);
    }

    #[test]
    fn greedy_by_distance_would_undercount() {
        // closest pair (13,12) first would block both others
        assert_eq!(match_boundaries(&[10, 13], &[12, 15], 3.0, MatchMode::OneToOne), 2);
        assert_eq!(brute_one_to_one(&[10, 13], &[12, 15], 3.0), 2);
    }

    #[test]
    fn sweep_matcher_equals_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let t = rng.gen_range(2..60);
            let mut pick = |k: usize| {
                let mut v: Vec<usize> = (0..k).map(|_| rng.gen_range(1..t)).collect();
                v.sort_unstable();
                v.dedup();
                v
            };
            let (pred, gt) = (pick(8), pick(8));
            let d = rng.gen_range(0.0..10.0_f64).round();
            assert_eq!(
                match_boundaries(&pred, &gt, d, MatchMode::OneToOne),
                brute_one_to_one(&pred, &gt, d),
                "{pred:?} {gt:?} {d}"
            );
        }
    }

    #[test]
    fn worked_example() {
        let s = recall_prec_f1(&[11, 50], &[10, 20, 30], 2.0, MatchMode::OneToOne);
        assert_abs_diff_eq!(s.recall, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.precision, 0.5, epsilon = 1e-15);
        // 2 * (1/3)(1/2) / (5/6) = 2/5
        assert_abs_diff_eq!(s.f1, 0.4, epsilon = 1e-15);
        assert_eq!(format!("{:.4}", s.f1), "0.4000");
    }

    #[test]
    fn identity_scores_one() {
        let b = [4, 9, 17];
        for d in [0.5, 1.0, 30.0] {
            let s = recall_prec_f1(&b, &b, d, MatchMode::OneToOne);
            assert_eq!((s.recall, s.precision, s.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn strict_tolerance() {
        assert_eq!(match_boundaries(&[12], &[10], 2.0, MatchMode::OneToOne), 0);
        assert_eq!(match_boundaries(&[12], &[10], 2.0, MatchMode::Independent), 0);
        assert_eq!(match_boundaries(&[12], &[10], 2.0001, MatchMode::OneToOne), 1);
    }

    #[test]
    fn empty_conventions() {
        assert_eq!(Scores::from_counts(0, 0, 0), Scores { recall: 1.0, precision: 1.0, f1: 1.0 });
        let s = Scores::from_counts(0, 3, 0);
        assert_eq!((s.recall, s.precision, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn sweep_identity() {
        let items = vec![EvalItem {
            pred: vec![20, 50],
            gt: vec![20, 50],
            length: 100,
        }];
        let r = sweep(&items, MatchMode::OneToOne, Averaging::Micro).unwrap();
        assert_eq!(r.rel.len(), 10);
        assert_eq!(r.abs.len(), 10);
        assert!(r.rel.iter().chain(&r.abs).all(|row| row.f1 == 1.0));
        assert_eq!(r.averages(), [(AVG_REL_NAME, 1.0), (AVG_ABS_NAME, 1.0)]);
        assert_eq!(AVG_REL_NAME, "avg. F1-score (rel.)");
        assert_eq!(AVG_ABS_NAME, "avg. F1-score (abs.)");
    }

    #[test]
    fn sweep_empty_is_error() {
        assert!(sweep(&[], MatchMode::OneToOne, Averaging::Micro).is_err());
    }

    #[test]
    fn threshold_lists() {
        let rel = relative_thresholds();
        assert_eq!(rel.first(), Some(&0.05));
        assert_eq!(rel.last(), Some(&0.5));
        assert_eq!(absolute_thresholds(), vec![5., 10., 15., 20., 25., 30., 35., 40., 45., 50.]);
    }

    fn random_items(seed: u64, n: usize) -> Vec<EvalItem> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let length = rng.gen_range(20..200);
                let (kp, kg) = (rng.gen_range(0..10), rng.gen_range(0..10));
                let mut pick = |k: usize| {
                    let mut v: Vec<usize> = (0..k).map(|_| rng.gen_range(1..length)).collect();
                    v.sort_unstable();
                    v.dedup();
                    v
                };
                EvalItem { pred: pick(kp), gt: pick(kg), length }
            })
            .collect()
    }

    #[test]
    fn sweep_matches_naive_double_loop() {
        let items = random_items(3, 20);
        for mode in [MatchMode::OneToOne, MatchMode::Independent] {
            let r = sweep(&items, mode, Averaging::Micro).unwrap();
            for (k, d) in relative_thresholds().into_iter().enumerate() {
                let (mut m, mut np, mut ng) = (0, 0, 0);
                for it in &items {
                    let df = d * it.length as f64;
                    m += if mode == MatchMode::OneToOne {
                        brute_one_to_one(&it.pred, &it.gt, df)
                    } else {
                        it.pred
                            .iter()
                            .filter(|&&p| it.gt.iter().any(|&g| (p as f64 - g as f64).abs() < df))
                            .count()
                    };
                    np += it.pred.len();
                    ng += it.gt.len();
                }
                let s = Scores::from_counts(m, np, ng);
                assert_eq!(r.rel[k].f1, s.f1);
                assert_eq!(r.rel[k].recall, s.recall);
            }
        }
    }

    #[test]
    fn macro_averages_per_instance() {
        let items = vec![
            EvalItem { pred: vec![10], gt: vec![10], length: 100 },
            EvalItem { pred: vec![], gt: vec![40], length: 100 },
        ];
        let s = score_at(&items, ThresholdKind::Abs, 5.0, MatchMode::OneToOne, Averaging::Macro);
        assert_eq!(s.f1, 0.5);
        let s = score_at(&items, ThresholdKind::Abs, 5.0, MatchMode::OneToOne, Averaging::Micro);
        assert_eq!((s.recall, s.precision), (0.5, 1.0));
    }

    #[test]
    fn csv_layout() {
        let items = random_items(9, 4);
        let r = sweep(&items, MatchMode::OneToOne, Averaging::Micro).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold_kind,d,recall,precision,f1");
        assert_eq!(lines.len(), 1 + 22);
        assert!(lines[1].starts_with("rel,0.05,"));
        assert!(lines[11].starts_with("rel,avg,"));
        assert!(lines[12].starts_with("abs,5,"));
        assert!(lines[22].starts_with("abs,avg,"));
    }

    #[test]
    fn mode_parse_round_trip() {
        for m in [MatchMode::OneToOne, MatchMode::Independent] {
            assert_eq!(m.to_string().parse::<MatchMode>().unwrap(), m);
        }
        assert!("greedy".parse::<MatchMode>().is_err());
    }
}
