//! Segment-sampling classification study and the parser ablation grid.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::linalg::{Graph, Matrix, Sgd};
use crate::losses::{train, LossConfig};
use crate::metrics::{sweep, Averaging, EvalItem, MatchMode, Scores};
use crate::model::{ModelConfig, TransParserModel};
use crate::parsing::parse_sequence;
use crate::types::segments_from_starts;

/// Where segment boundaries come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmentSource {
    /// Equal-duration segments.
    Uniform,
    /// Annotated boundaries.
    GroundTruth,
    /// Boundaries by instance id, e.g. parser output.
    Predicted(HashMap<String, Vec<usize>>),
}

impl SegmentSource {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::GroundTruth => "aligned",
            Self::Predicted(_) => "predicted",
        }
    }
}

/// `k` near-equal frame ranges; every range holds at least one frame.
pub fn uniform_segments(length: usize, k: usize) -> Vec<Range<usize>> {
    (0..k)
        .map(|i| {
            let lo = (i * length / k).min(length - 1);
            let hi = ((i + 1) * length / k).max(lo + 1);
            lo..hi
        })
        .collect()
}

/// Brings a segmentation to exactly `k` segments. Extra segments are removed
/// by merging the adjacent pair with the smallest combined length; missing
/// ones are made by halving the longest segment. Ties go to the earliest.
/// A one-frame segment that must be split is duplicated.
pub fn fit_segments(mut segs: Vec<Range<usize>>, k: usize) -> Vec<Range<usize>> {
    while segs.len() > k {
        let i = (0..segs.len() - 1)
            .min_by_key(|&i| (segs[i].len() + segs[i + 1].len(), i))
            .unwrap();
        let merged = segs[i].start..segs[i + 1].end;
        segs.splice(i..i + 2, [merged]);
    }
    while segs.len() < k {
        let i = (0..segs.len()).max_by_key(|&i| (segs[i].len(), usize::MAX - i)).unwrap();
        let r = segs[i].clone();
        let parts = if r.len() >= 2 {
            let mid = r.start + r.len() / 2;
            [r.start..mid, mid..r.end]
        } else {
            [r.clone(), r]
        };
        segs.splice(i..i + 1, parts);
    }
    segs
}

/// Mean of each segment, concatenated into one row.
pub fn pooled_descriptor(x: &Matrix, segs: &[Range<usize>]) -> Vec<f64> {
    let d = x.cols();
    let mut out = Vec::with_capacity(segs.len() * d);
    for r in segs {
        let mut acc = vec![0.0; d];
        for t in r.clone() {
            for (a, v) in acc.iter_mut().zip(x.row(t)) {
                *a += v;
            }
        }
        out.extend(acc.iter().map(|a| a / r.len() as f64));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.1,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub scheme: String,
    pub num_segments: usize,
    /// Fraction of test instances classified correctly.
    pub top1: f64,
    /// Mean of per-class accuracies over classes present in the test split.
    pub avg_acc: f64,
    pub test_instances: usize,
}

fn descriptors(
    ds: &Dataset,
    idx: &[usize],
    source: &SegmentSource,
    k: usize,
) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(idx.len());
    for &i in idx {
        let r = &ds.records[i];
        let segs = match source {
            SegmentSource::Uniform => uniform_segments(r.length, k),
            SegmentSource::GroundTruth => fit_segments(segments_from_starts(&r.boundaries, r.length), k),
            SegmentSource::Predicted(map) => {
                let starts = map
                    .get(&r.id)
                    .ok_or_else(|| Error::Input(format!("no predicted boundaries for {}", r.id)))?;
                fit_segments(segments_from_starts(starts, r.length), k)
            }
        };
        rows.push(pooled_descriptor(&ds.features[i], &segs));
    }
    Ok(Matrix::from_rows(&rows))
}

/// Per-column mean and standard deviation of the training descriptors.
fn standardizer(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mean: Vec<f64> = (0..x.cols())
        .map(|j| x.iter_rows().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let sd: Vec<f64> = (0..x.cols())
        .map(|j| {
            let v = x.iter_rows().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

fn standardize(x: &Matrix, mean: &[f64], sd: &[f64]) -> Matrix {
    let mut out = x.clone();
    for t in 0..out.rows() {
        for (j, v) in out.row_mut(t).iter_mut().enumerate() {
            *v = (*v - mean[j]) / sd[j];
        }
    }
    out
}

/// Trains a linear softmax probe on pooled segment descriptors of the train
/// split and scores it on the test split.
pub fn sampling_classifier(
    ds: &Dataset,
    source: &SegmentSource,
    num_segments: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<AccuracyReport> {
    if num_segments == 0 {
        return Err(Error::Input("num_segments must be at least 1".into()));
    }
    let classes = ds.classes();
    let label_of = |i: usize| classes.iter().position(|c| c == &ds.records[i].label).unwrap();
    let (train_idx, test_idx) = (ds.indices(Split::Train), ds.indices(Split::Test));
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Input("need non-empty train and test splits".into()));
    }
    let xtr = descriptors(ds, &train_idx, source, num_segments)?;
    let xte = descriptors(ds, &test_idx, source, num_segments)?;
    let (mean, sd) = standardizer(&xtr);
    let (xtr, xte) = (standardize(&xtr, &mean, &sd), standardize(&xte, &mean, &sd));
    let ytr: Vec<usize> = train_idx.iter().map(|&i| label_of(i)).collect();

    let c = classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Matrix::random_uniform(xtr.cols(), c, 0.01, &mut rng);
    let mut b = Matrix::zeros(1, c);
    let mut opt = Sgd::new(probe.learning_rate, probe.momentum);
    for _ in 0..probe.epochs {
        let mut g = Graph::new();
        let (wi, bi) = (g.param(w.clone()), g.param(b.clone()));
        let x = g.constant(xtr.clone());
        let z = g.linear(x, wi, Some(bi))?;
        let loss = g.softmax_cross_entropy(z, ytr.clone())?;
        let grads = g.backward(loss)?;
        let gs = [grads.get_or_zeros(&g, wi), grads.get_or_zeros(&g, bi)];
        opt.step(vec![&mut w, &mut b], &gs)?;
    }

    let pred = crate::linalg::linear(&xte, &w, Some(&b))?.argmax_rows();
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (&i, &p) in test_idx.iter().zip(&pred) {
        let y = label_of(i);
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let present: Vec<usize> = (0..c).filter(|&k| total[k] > 0).collect();
    Ok(AccuracyReport {
        scheme: source.name().to_string(),
        num_segments,
        top1: correct.iter().sum::<usize>() as f64 / test_idx.len() as f64,
        avg_acc: present
            .iter()
            .map(|&k| correct[k] as f64 / total[k] as f64)
            .sum::<f64>()
            / present.len() as f64,
        test_instances: test_idx.len(),
    })
}

/// Parses every instance of `split` with `model` and pairs it with its annotation.
pub fn evaluate_split(
    ds: &Dataset,
    split: Split,
    model: &TransParserModel,
    smoothing_window: Option<usize>,
) -> Result<Vec<EvalItem>> {
    ds.indices(split)
        .into_iter()
        .map(|i| {
            let r = &ds.records[i];
            let p = parse_sequence(r.id.clone(), &ds.features[i], model, smoothing_window)?;
            Ok(EvalItem {
                pred: p.starts,
                gt: r.boundaries.clone(),
                length: r.length,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub num_units: usize,
    pub local_loss: bool,
}

impl AblationCell {
    pub fn new(num_units: usize, local_loss: bool) -> Self {
        let label = format!("×{num_units} {}", if local_loss { "local" } else { "no-local" });
        Self {
            label,
            num_units,
            local_loss,
        }
    }
}

/// ×1 without local loss, ×1 with, ×2 with.
pub fn default_ablation_grid() -> Vec<AblationCell> {
    vec![
        AblationCell::new(1, false),
        AblationCell::new(1, true),
        AblationCell::new(2, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub num_units: usize,
    pub local_loss: bool,
    /// Scores averaged over absolute thresholds 5..50, then over seeds.
    pub avg_f1: f64,
    pub avg_recall: f64,
    pub avg_precision: f64,
}

/// Trains one model per cell and seed on the train split and evaluates on the
/// test split. Each seed drives both model initialisation and training.
pub fn run_ablation(
    ds: &Dataset,
    grid: &[AblationCell],
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one cell and one seed".into()));
    }
    let classes = ds.classes();
    let train_set = ds.train_instances(Split::Train, &classes)?;
    let mut rows = Vec::with_capacity(grid.len());
    for cell in grid {
        let mut sum = Scores::default();
        for &seed in seeds {
            let mc = ModelConfig {
                num_units: cell.num_units,
                num_classes: classes.len(),
                ..model_cfg.clone()
            };
            let lc = LossConfig {
                w_local: match (cell.local_loss, loss_cfg.w_local > 0.0) {
                    (false, _) => 0.0,
                    (true, true) => loss_cfg.w_local,
                    (true, false) => 1.0,
                },
                seed,
                ..loss_cfg.clone()
            };
            let (model, _) = train(&train_set, TransParserModel::new(mc, seed)?, &lc)?;
            let items = evaluate_split(ds, Split::Test, &model, None)?;
            let rep = sweep(&items, MatchMode::OneToOne, Averaging::Micro)?;
            sum.f1 += rep.avg_abs.f1;
            sum.recall += rep.avg_abs.recall;
            sum.precision += rep.avg_abs.precision;
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            setting: cell.label.clone(),
            num_units: cell.num_units,
            local_loss: cell.local_loss,
            avg_f1: sum.f1 / n,
            avg_recall: sum.recall / n,
            avg_precision: sum.precision / n,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)
            .map_err(|e| Error::Format(format!("writing CSV: {e}")))?;
    }
    out.flush().map_err(|e| Error::Format(format!("writing CSV: {e}")))
}

pub fn write_accuracy_csv<W: Write>(w: W, rows: &[AccuracyReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)
            .map_err(|e| Error::Format(format!("writing CSV: {e}")))?;
    }
    out.flush().map_err(|e| Error::Format(format!("writing CSV: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, AnnotationRecord, SynthConfig};

    fn lens(s: &[Range<usize>]) -> Vec<usize> {
        s.iter().map(|r| r.len()).collect()
    }

    #[test]
    fn uniform_ranges() {
        assert_eq!(uniform_segments(10, 3), vec![0..3, 3..6, 6..10]);
        assert_eq!(uniform_segments(2, 4), vec![0..1, 0..1, 1..2, 1..2]);
        assert_eq!(uniform_segments(7, 1), vec![0..7]);
    }

    #[test]
    fn fit_merges_shortest_pair() {
        // pairs: 3+1=4, 1+5=6, 5+2=7 -> merge first two
        let segs = fit_segments(vec![0..3, 3..4, 4..9, 9..11], 3);
        assert_eq!(segs, vec![0..4, 4..9, 9..11]);
        assert_eq!(lens(&fit_segments(vec![0..3, 3..4, 4..9, 9..11], 1)), vec![11]);
    }

    #[test]
    fn fit_splits_longest() {
        let segs = fit_segments(vec![0..3, 3..10], 3);
        assert_eq!(segs, vec![0..3, 3..6, 6..10]);
        assert_eq!(fit_segments(vec![0..1], 2), vec![0..1, 0..1]);
    }

    #[test]
    fn descriptor_is_segment_means() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [3.0, 2.0], [5.0, 4.0]]);
        assert_eq!(pooled_descriptor(&x, &[0..2, 2..3]), vec![2.0, 1.0, 5.0, 4.0]);
    }

    #[test]
    fn one_segment_schemes_coincide() {
        let ds: Dataset = generate_synthetic(&SynthConfig {
            instances_per_action: 10,
            ..Default::default()
        })
        .unwrap()
        .into();
        let p = ProbeConfig { epochs: 50, ..Default::default() };
        let a = sampling_classifier(&ds, &SegmentSource::Uniform, 1, &p, 3).unwrap();
        let b = sampling_classifier(&ds, &SegmentSource::GroundTruth, 1, &p, 3).unwrap();
        assert_eq!((a.top1, a.avg_acc), (b.top1, b.avg_acc));
    }

    #[test]
    fn predicted_source_needs_every_id() {
        let ds: Dataset = generate_synthetic(&SynthConfig {
            instances_per_action: 10,
            ..Default::default()
        })
        .unwrap()
        .into();
        let src = SegmentSource::Predicted(HashMap::new());
        assert!(sampling_classifier(&ds, &src, 2, &ProbeConfig::default(), 0).is_err());
        let gt: HashMap<String, Vec<usize>> = ds
            .records
            .iter()
            .map(|r: &AnnotationRecord| (r.id.clone(), r.boundaries.clone()))
            .collect();
        let p = ProbeConfig { epochs: 20, ..Default::default() };
        let a = sampling_classifier(&ds, &SegmentSource::Predicted(gt), 3, &p, 0).unwrap();
        let b = sampling_classifier(&ds, &SegmentSource::GroundTruth, 3, &p, 0).unwrap();
        assert_eq!(a.top1, b.top1);
        assert_eq!(a.scheme, "predicted");
    }

    #[test]
    fn random_labels_are_near_chance() {
        use rand::seq::SliceRandom;
        let mut ds: Dataset = generate_synthetic(&SynthConfig {
            num_actions: 4,
            instances_per_action: 150,
            ..Default::default()
        })
        .unwrap()
        .into();
        let mut labels: Vec<String> = ds.records.iter().map(|r| r.label.clone()).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        for (r, l) in ds.records.iter_mut().zip(labels) {
            r.label = l;
        }
        let rep = sampling_classifier(&ds, &SegmentSource::Uniform, 2, &ProbeConfig::default(), 0).unwrap();
        // 120 test instances; chance 0.25, binomial sd ≈ 0.04
        assert!((rep.top1 - 0.25).abs() < 0.15, "{}", rep.top1);
    }

    #[test]
    fn ablation_labels() {
        let labels: Vec<String> = default_ablation_grid().into_iter().map(|c| c.label).collect();
        assert_eq!(labels, ["×1 no-local", "×1 local", "×2 local"]);
    }

    #[test]
    fn single_cell_equals_direct_run() {
        let ds: Dataset = generate_synthetic(&SynthConfig {
            instances_per_action: 6,
            ..Default::default()
        })
        .unwrap()
        .into();
        let mc = ModelConfig {
            feature_dim: 16,
            pattern_dim: 8,
            num_patterns: 8,
            attn_dim: 8,
            value_dim: 8,
            hidden_dim: 16,
            num_classes: 4,
            num_units: 1,
            layer_norm: false,
        };
        let lc = LossConfig { epochs: 3, ..Default::default() };
        let rows = run_ablation(&ds, &[AblationCell::new(1, true)], &mc, &lc, &[5]).unwrap();

        let classes = ds.classes();
        let tr = ds.train_instances(Split::Train, &classes).unwrap();
        let (model, _) = train(&tr, TransParserModel::new(mc, 5).unwrap(), &LossConfig { seed: 5, ..lc }).unwrap();
        let items = evaluate_split(&ds, Split::Test, &model, None).unwrap();
        let rep = sweep(&items, MatchMode::OneToOne, Averaging::Micro).unwrap();
        assert_eq!(rows[0].avg_f1, rep.avg_abs.f1);
        assert_eq!(rows[0].avg_precision, rep.avg_abs.precision);

        let mut buf = Vec::new();
        write_ablation_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("setting,num_units,local_loss,avg_f1,avg_recall,avg_precision\n×1 local,1,true,"));
    }
}
