//! Synthetic action instances with known sub-action boundaries.
//!
//! Every action is a fixed sequence of prototype vectors. An instance plays
//! that sequence with random segment lengths, linearly cross-fades between
//! consecutive prototypes over `transition_width` frames and adds Gaussian
//! noise. A segment starts at the first frame where its own prototype
//! outweighs the previous one.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::annotations::{AnnotationRecord, Split};
use super::features::round_to_f32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_prototypes: usize,
    pub feature_dim: usize,
    pub num_actions: usize,
    /// Inclusive range of sub-actions per action.
    pub action_length: (usize, usize),
    pub instances_per_action: usize,
    /// Inclusive range of frames per sub-action.
    pub segment_length: (usize, usize),
    pub transition_width: usize,
    pub noise: f64,
    /// Standard deviation of prototype entries.
    pub prototype_scale: f64,
    /// Make every action a distinct ordering of all prototypes.
    pub order_only: bool,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_prototypes: 4,
            feature_dim: 16,
            num_actions: 4,
            action_length: (2, 4),
            instances_per_action: 40,
            segment_length: (6, 12),
            transition_width: 2,
            noise: 0.1,
            prototype_scale: 3.0,
            order_only: false,
            train_fraction: 0.7,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_prototypes < 2 {
            return bad(format!("need at least 2 prototypes, got {}", self.num_prototypes));
        }
        if self.feature_dim == 0 || self.num_actions == 0 || self.instances_per_action == 0 {
            return bad("feature_dim, num_actions and instances_per_action must be positive".into());
        }
        let (amin, amax) = self.action_length;
        if amin < 1 || amin > amax {
            return bad(format!("bad action_length range {amin}..={amax}"));
        }
        let (smin, smax) = self.segment_length;
        if smin < 1 || smin > smax {
            return bad(format!("bad segment_length range {smin}..={smax}"));
        }
        if smin < self.transition_width + 1 {
            return bad(format!(
                "segments of {smin} frames cannot hold a {}-frame transition",
                self.transition_width
            ));
        }
        if !(self.noise >= 0.0) || !(self.prototype_scale > 0.0) {
            return bad("noise must be >= 0 and prototype_scale > 0".into());
        }
        let (tr, va) = (self.train_fraction, self.val_fraction);
        if !(tr >= 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return bad(format!("split fractions {tr} + {va} must lie in [0, 1]"));
        }
        if self.order_only {
            let perms: usize = (1..=self.num_prototypes).try_fold(1usize, |a, k| a.checked_mul(k)).unwrap_or(usize::MAX);
            if self.num_actions > perms {
                return bad(format!(
                    "{} actions but only {perms} orderings of {} prototypes",
                    self.num_actions, self.num_prototypes
                ));
            }
        } else if amax == 1 && self.num_actions > self.num_prototypes {
            return bad("not enough distinct single-prototype actions".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Per-instance frame features, aligned with `records`.
    pub features: Vec<Matrix>,
    pub records: Vec<AnnotationRecord>,
    /// num_prototypes x feature_dim
    pub prototypes: Matrix,
    /// Prototype order of each action.
    pub actions: Vec<Vec<usize>>,
}

pub fn action_name(c: usize) -> String {
    format!("action{c}")
}

fn sample_action<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<usize> {
    let p = cfg.num_prototypes;
    if cfg.order_only {
        let mut v: Vec<usize> = (0..p).collect();
        v.shuffle(rng);
        return v;
    }
    let len = rng.gen_range(cfg.action_length.0..=cfg.action_length.1);
    if len <= p {
        let mut v: Vec<usize> = (0..p).collect();
        v.shuffle(rng);
        v.truncate(len);
        v
    } else {
        let mut v = vec![rng.gen_range(0..p)];
        while v.len() < len {
            let last = *v.last().unwrap();
            let next = (last + rng.gen_range(1..p)) % p;
            v.push(next);
        }
        v
    }
}

/// Frames of one instance and its boundary frames.
fn render<R: Rng>(
    order: &[usize],
    prototypes: &Matrix,
    cfg: &SynthConfig,
    rng: &mut R,
) -> (Matrix, Vec<usize>) {
    let lens: Vec<usize> = order
        .iter()
        .map(|_| rng.gen_range(cfg.segment_length.0..=cfg.segment_length.1))
        .collect();
    let n: usize = lens.iter().sum();
    let d = prototypes.cols();
    let mut x = Matrix::zeros(n, d);
    let mut starts = Vec::with_capacity(order.len() - 1);
    let mut t = 0;
    for (k, (&proto, &len)) in order.iter().zip(&lens).enumerate() {
        if k > 0 {
            starts.push(t);
        }
        for f in t..t + len {
            x.row_mut(f).copy_from_slice(prototypes.row(proto));
        }
        t += len;
    }
    let w = cfg.transition_width;
    let lead = (w + 1) / 2;
    for (k, &s) in starts.iter().enumerate() {
        let (a, b) = (prototypes.row(order[k]), prototypes.row(order[k + 1]));
        for j in 0..w {
            let alpha = (j + 1) as f64 / (w + 1) as f64;
            let f = s - lead + j;
            for (v, (&pa, &pb)) in x.row_mut(f).iter_mut().zip(a.iter().zip(b)) {
                *v = (1.0 - alpha) * pa + alpha * pb;
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("validated noise");
        for v in x.data_mut() {
            *v += normal.sample(rng);
        }
    }
    (round_to_f32(&x), starts)
}

/// Deterministic in `cfg` (including `cfg.seed`).
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.prototype_scale).expect("validated scale");
    let mut protos = Matrix::zeros(cfg.num_prototypes, cfg.feature_dim);
    for v in protos.data_mut() {
        *v = normal.sample(&mut rng);
    }
    let prototypes = round_to_f32(&protos);

    let mut actions: Vec<Vec<usize>> = Vec::with_capacity(cfg.num_actions);
    let mut seen = HashSet::new();
    let mut attempts = 0;
    while actions.len() < cfg.num_actions {
        let a = sample_action(cfg, &mut rng);
        attempts += 1;
        if seen.insert(a.clone()) {
            actions.push(a);
        } else if attempts > 10_000 {
            return Err(Error::Config("could not draw enough distinct actions".into()));
        }
    }

    let mut features = Vec::new();
    let mut records = Vec::new();
    for (c, order) in actions.iter().enumerate() {
        let mut idx: Vec<usize> = (0..cfg.instances_per_action).collect();
        idx.shuffle(&mut rng);
        let n = cfg.instances_per_action as f64;
        let n_train = (cfg.train_fraction * n).round() as usize;
        let n_val = ((cfg.val_fraction * n).round() as usize).min(cfg.instances_per_action - n_train);
        let mut split = vec![Split::Test; cfg.instances_per_action];
        for (rank, &i) in idx.iter().enumerate() {
            split[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (i, &sp) in split.iter().enumerate() {
            let (x, starts) = render(order, &prototypes, cfg, &mut rng);
            let id = format!("{}_{i:04}", action_name(c));
            records.push(AnnotationRecord {
                id: id.clone(),
                video_id: id,
                label: action_name(c),
                length: x.rows(),
                boundaries: starts,
                split: sp,
            });
            features.push(x);
        }
    }
    Ok(SynthDataset {
        features,
        records,
        prototypes,
        actions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(w: usize, noise: f64) -> SynthConfig {
        SynthConfig {
            num_prototypes: 2,
            feature_dim: 3,
            num_actions: 1,
            action_length: (2, 2),
            instances_per_action: 1,
            segment_length: (3, 3),
            transition_width: w,
            noise,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_hard_cut() {
        let ds = generate_synthetic(&tiny(0, 0.0)).unwrap();
        let (x, r) = (&ds.features[0], &ds.records[0]);
        let order = &ds.actions[0];
        assert_eq!(r.boundaries, vec![3]);
        assert_eq!(r.length, 6);
        for t in 0..6 {
            let p = if t < 3 { order[0] } else { order[1] };
            assert_eq!(x.row(t), ds.prototypes.row(p));
        }
    }

    #[test]
    fn cross_fade_weights() {
        let ds = generate_synthetic(&tiny(2, 0.0)).unwrap();
        let (x, r) = (&ds.features[0], &ds.records[0]);
        let (a, b) = (ds.prototypes.row(ds.actions[0][0]), ds.prototypes.row(ds.actions[0][1]));
        assert_eq!(r.boundaries, vec![3]);
        // frame 2 carries 1/3 of b, frame 3 carries 2/3
        for (f, alpha) in [(2usize, 1.0 / 3.0), (3, 2.0 / 3.0)] {
            for k in 0..3 {
                let want = ((1.0 - alpha) * a[k] + alpha * b[k]) as f32 as f64;
                assert_eq!(x[(f, k)], want);
            }
        }
        assert_eq!(x.row(0), a);
        assert_eq!(x.row(5), b);
    }

    #[test]
    fn boundary_is_first_frame_closer_to_next_prototype() {
        for w in 0..6 {
            let cfg = SynthConfig {
                segment_length: (w + 1, w + 4),
                ..tiny(w, 0.0)
            };
            let ds = generate_synthetic(&cfg).unwrap();
            let (x, r) = (&ds.features[0], &ds.records[0]);
            let (a, b) = (ds.prototypes.row(ds.actions[0][0]), ds.prototypes.row(ds.actions[0][1]));
            let dist = |u: &[f64], v: &[f64]| -> f64 { u.iter().zip(v).map(|(p, q)| (p - q).powi(2)).sum() };
            let first = (0..x.rows()).find(|&t| dist(x.row(t), b) < dist(x.row(t), a)).unwrap();
            assert_eq!(r.boundaries, vec![first], "w = {w}");
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let cfg = SynthConfig {
            instances_per_action: 5,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn too_short_segments_are_config_errors() {
        let cfg = SynthConfig {
            segment_length: (2, 5),
            transition_width: 2,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn actions_are_distinct_without_adjacent_repeats() {
        let cfg = SynthConfig {
            num_actions: 6,
            action_length: (2, 6),
            instances_per_action: 2,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let set: HashSet<_> = ds.actions.iter().collect();
        assert_eq!(set.len(), 6);
        for a in &ds.actions {
            assert!(a.windows(2).all(|w| w[0] != w[1]));
            if a.len() <= 4 {
                assert_eq!(a.iter().collect::<HashSet<_>>().len(), a.len());
            }
        }
    }

    #[test]
    fn order_only_uses_every_prototype() {
        let cfg = SynthConfig {
            order_only: true,
            instances_per_action: 2,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for a in &ds.actions {
            let mut s = a.clone();
            s.sort_unstable();
            assert_eq!(s, vec![0, 1, 2, 3]);
        }
        let too_many = SynthConfig { num_actions: 25, ..cfg };
        assert!(generate_synthetic(&too_many).is_err());
    }

    #[test]
    fn stratified_splits() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        for c in 0..4 {
            let count = |s: Split| {
                ds.records
                    .iter()
                    .filter(|r| r.label == action_name(c) && r.split == s)
                    .count()
            };
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (28, 4, 8));
        }
    }

    #[test]
    fn records_are_consistent() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        for (x, r) in ds.features.iter().zip(&ds.records) {
            assert_eq!(x.rows(), r.length);
            assert_eq!(x.cols(), 16);
            crate::types::validate_starts(&r.boundaries, r.length).unwrap();
        }
    }
}
