//! Invariant suites shared by the property tests and the acceptance runner.
//! Each suite drives a deterministic proptest runner and reports the first
//! minimal failure as a string.

use std::path::Path;

use proptest::collection::{btree_set, vec};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tapkit::data::{
    decode_features, encode_features, parse_annotations, parse_predictions, round_to_f32,
    write_annotations, write_predictions, AnnotationRecord, Prediction, Split,
};
use tapkit::linalg::{softmax_rows, Matrix};
use tapkit::losses::{local_loss, LossConfig};
use tapkit::metrics::{recall_prec_f1, MatchMode};
use tapkit::model::{forward, ModelConfig, TransParserModel};
use tapkit::parsing::extract_boundaries;
use tapkit::Segmentation;

pub const CASES: u32 = 256;

fn run<S>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
{
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    vec(lo..hi, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn check_stochastic(m: &Matrix) -> Result<(), TestCaseError> {
    for row in m.iter_rows() {
        prop_assert!(row.iter().all(|&v| v >= 0.0), "negative entry in {row:?}");
        let s: f64 = row.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9, "row sums to {s}");
    }
    Ok(())
}

/// Softmax output and every unit's response are row-stochastic.
pub fn response_rows_stochastic() -> Result<(), String> {
    run((1usize..10, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c, -60.0, 60.0)), |m| {
        check_stochastic(&softmax_rows(&m))
    })?;
    let model_case = (any::<u64>(), 1usize..=2, 1usize..16, 0.1f64..20.0);
    run(model_case, |(seed, units, n, scale)| {
        let cfg = ModelConfig {
            feature_dim: 5,
            pattern_dim: 4,
            num_patterns: 6,
            attn_dim: 3,
            value_dim: 3,
            hidden_dim: 8,
            num_classes: 3,
            num_units: units,
            layer_norm: false,
        };
        let model = TransParserModel::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let x = Matrix::random_uniform(n, 5, scale, &mut rng);
        let trace = forward(&x, &model).unwrap();
        for u in &trace.units {
            check_stochastic(&u.response)?;
        }
        Ok(())
    })
}

/// Boundaries depend only on each row's argmax, so any strictly increasing
/// map applied row by row leaves them unchanged.
pub fn parsing_argmax_invariance() -> Result<(), String> {
    // Values on a coarse grid so the transforms cannot merge distinct entries.
    let case = (1usize..30, 1usize..6).prop_flat_map(|(n, m)| {
        (
            vec(vec((0i32..9).prop_map(|k| k as f64 * 0.25), m), n),
            vec(0usize..4, n),
        )
    });
    run(case, |(rows, kinds)| {
        let before = Matrix::from_rows(&rows);
        let transformed: Vec<Vec<f64>> = rows
            .iter()
            .zip(&kinds)
            .map(|(row, &k)| {
                row.iter()
                    .map(|&x| match k {
                        0 => x.exp(),
                        1 => 3.0 * x - 7.0,
                        2 => x * x * x + x,
                        _ => (x + 1.0).ln(),
                    })
                    .collect()
            })
            .collect();
        let after = Matrix::from_rows(&transformed);
        let a = extract_boundaries("x", &before, None).unwrap();
        let b = extract_boundaries("x", &after, None).unwrap();
        prop_assert_eq!(a.starts, b.starts);
        Ok(())
    })
}

/// The local loss only asks whether two frames share a segment, so moving
/// whole segments around (relabelling which one comes first) keeps it fixed.
pub fn local_loss_relabel_invariance() -> Result<(), String> {
    let case = vec(1usize..5, 2..5).prop_flat_map(|lens| {
        let n: usize = lens.iter().sum();
        let k = lens.len();
        (
            Just(lens),
            matrix(n, 4, 0.0, 1.0),
            Just((0..k).collect::<Vec<usize>>()).prop_shuffle(),
            0.0f64..2.0,
        )
    });
    run(case, |(lens, resp, perm, lambda)| {
        let cfg = LossConfig {
            lambda,
            ..LossConfig::default()
        };
        let n = resp.rows();
        let mut offsets = vec![0];
        for l in &lens {
            offsets.push(offsets.last().unwrap() + l);
        }
        let seg = |lens: &[usize]| {
            let mut starts = Vec::new();
            let mut t = 0;
            for l in &lens[..lens.len() - 1] {
                t += l;
                starts.push(t);
            }
            Segmentation {
                id: "x".into(),
                label: "a".into(),
                length: n,
                starts,
            }
        };
        let mut rows = Vec::with_capacity(n);
        let mut new_lens = Vec::new();
        for &s in &perm {
            rows.extend((offsets[s]..offsets[s + 1]).map(|t| resp.row(t).to_vec()));
            new_lens.push(lens[s]);
        }
        let a = local_loss(&resp, &seg(&lens), &cfg).unwrap();
        let b = local_loss(&Matrix::from_rows(&rows), &seg(&new_lens), &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        Ok(())
    })
}

/// Widening the tolerance never lowers recall or precision.
pub fn metric_monotone_in_d() -> Result<(), String> {
    let set = || btree_set(0usize..200, 0..=12).prop_map(|s| s.into_iter().collect::<Vec<_>>());
    let case = (set(), set(), 0.0f64..60.0, 0.0f64..60.0);
    run(case, |(pred, gt, d, extra)| {
        for mode in [MatchMode::OneToOne, MatchMode::Independent] {
            let lo = recall_prec_f1(&pred, &gt, d, mode);
            let hi = recall_prec_f1(&pred, &gt, d + extra, mode);
            prop_assert!(hi.recall >= lo.recall, "{mode}: recall {lo:?} -> {hi:?}");
            prop_assert!(hi.precision >= lo.precision, "{mode}: precision {lo:?} -> {hi:?}");
        }
        Ok(())
    })
}

fn annotation() -> impl Strategy<Value = AnnotationRecord> {
    (1usize..300, "[a-z]{1,8}", 0usize..3).prop_flat_map(|(length, label, split)| {
        (
            Just(length),
            Just(label),
            Just(Split::ALL[split]),
            btree_set(1..length.max(2), 0..length.min(10)),
        )
            .prop_map(|(length, label, split, b)| AnnotationRecord {
                id: String::new(),
                video_id: String::new(),
                label,
                length,
                boundaries: b.into_iter().filter(|&t| t < length).collect(),
                split,
            })
    })
}

/// Features (at f32 precision), annotations and predictions survive a write
/// and read unchanged.
pub fn round_trips() -> Result<(), String> {
    let feats = (1usize..20, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c, -1e6, 1e6));
    run(feats, |m| {
        let m = round_to_f32(&m);
        let back = decode_features(&encode_features(&m).unwrap()).unwrap();
        prop_assert_eq!(back, m);
        Ok(())
    })?;
    run(vec(annotation(), 0..20), |mut recs| {
        for (i, r) in recs.iter_mut().enumerate() {
            r.id = format!("inst{i}");
            r.video_id = format!("vid{i}");
        }
        let mut buf = Vec::new();
        write_annotations(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        prop_assert_eq!(parse_annotations(&text, Path::new("mem")).unwrap(), recs);
        Ok(())
    })?;
    let pred = btree_set(1usize..10_000, 0..20);
    run(vec(pred, 0..20), |sets| {
        let preds: Vec<Prediction> = sets
            .into_iter()
            .enumerate()
            .map(|(i, s)| Prediction {
                id: format!("p{i}"),
                starts: s.into_iter().collect(),
            })
            .collect();
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds).unwrap();
        let text = String::from_utf8(buf).unwrap();
        prop_assert_eq!(parse_predictions(&text, Path::new("mem")).unwrap(), preds);
        Ok(())
    })
}

/// Every suite, by name.
#[allow(dead_code)]
pub fn all() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("response rows stochastic", response_rows_stochastic),
        ("parsing argmax invariance", parsing_argmax_invariance),
        ("local loss relabel invariance", local_loss_relabel_invariance),
        ("metric monotone in d", metric_monotone_in_d),
        ("round trips", round_trips),
    ]
}
