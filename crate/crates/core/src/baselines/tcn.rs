use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, unfold, Graph, Matrix, NodeId, Sgd};
use crate::losses::TrainInstance;
use crate::types::ParseResult;

const SCORE_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnTrainConfig {
    /// Kernel width of both convolutions (odd).
    pub width: usize,
    pub hidden: usize,
    /// Frames within this distance of a boundary are positives.
    pub radius: usize,
    /// Weight on the positive BCE term; `None` uses negatives / positives.
    pub pos_weight: Option<f64>,
    pub threshold: f64,
    pub nms_radius: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TcnTrainConfig {
    fn default() -> Self {
        Self {
            width: 9,
            hidden: 32,
            radius: 1,
            pos_weight: None,
            threshold: 0.5,
            nms_radius: 5,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TcnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.width % 2 == 0 {
            return bad(format!("kernel width must be odd, got {}", self.width));
        }
        if self.hidden == 0 {
            return bad("hidden channels must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("positive weight {w} must be positive"));
            }
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rate must be >= 0 and momentum in [0, 1)".into());
        }
        Ok(())
    }
}

/// Two same-length temporal convolutions with a ReLU between them and a
/// sigmoid on the single output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnModel {
    pub width: usize,
    /// (width·d) x hidden
    pub w1: Matrix,
    pub b1: Matrix,
    /// (width·hidden) x 1
    pub w2: Matrix,
    pub b2: Matrix,
}

impl TcnModel {
    pub fn new(input_dim: usize, width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f1 = width * input_dim;
        let f2 = width * hidden;
        Self {
            width,
            w1: Matrix::random_uniform(f1, hidden, 1.0 / (f1 as f64).sqrt(), &mut rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::random_uniform(f2, 1, 1.0 / (f2 as f64).sqrt(), &mut rng),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows() / self.width
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn logits_graph(&self, g: &mut Graph, x: &Matrix) -> Result<(NodeId, [NodeId; 4])> {
        let ids = [
            g.param(self.w1.clone()),
            g.param(self.b1.clone()),
            g.param(self.w2.clone()),
            g.param(self.b2.clone()),
        ];
        let x = g.constant(x.clone());
        let u = g.unfold(x, self.width)?;
        let h = g.linear(u, ids[0], Some(ids[1]))?;
        let h = g.relu(h);
        let u = g.unfold(h, self.width)?;
        let z = g.linear(u, ids[2], Some(ids[3]))?;
        Ok((z, ids))
    }

    /// Per-frame boundary probabilities, kept strictly inside (0, 1).
    pub fn scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.rows() == 0 {
            return Err(Error::Input("empty feature sequence".into()));
        }
        if x.cols() != self.input_dim() {
            return Err(Error::dim("tcn input", x.shape(), (x.rows(), self.input_dim())));
        }
        let h = crate::linalg::linear(&unfold(x, self.width), &self.w1, Some(&self.b1))?
            .map(|v| v.max(0.0));
        let z = crate::linalg::linear(&unfold(&h, self.width), &self.w2, Some(&self.b2))?;
        Ok(z
            .data()
            .iter()
            .map(|&v| sigmoid(v).clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP))
            .collect())
    }
}

/// 1 for frames within `radius` of any start, else 0.
pub fn boundary_targets(starts: &[usize], length: usize, radius: usize) -> Vec<f64> {
    let mut y = vec![0.0; length];
    for &s in starts {
        let lo = s.saturating_sub(radius);
        let hi = (s + radius + 1).min(length);
        for v in &mut y[lo..hi] {
            *v = 1.0;
        }
    }
    y
}

/// Trains with weighted BCE; returns the model and the mean loss per epoch.
pub fn tcn_train(dataset: &[TrainInstance], cfg: &TcnTrainConfig) -> Result<(TcnModel, Vec<f64>)> {
    cfg.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::Input("empty training set".into()))?;
    let d = first.features.cols();
    let targets: Vec<Vec<f64>> = dataset
        .iter()
        .map(|inst| {
            boundary_targets(&inst.segmentation.starts, inst.features.rows(), cfg.radius)
        })
        .collect();
    let pos: f64 = targets.iter().flatten().sum();
    let total: usize = targets.iter().map(Vec::len).sum();
    if pos == 0.0 {
        return Err(Error::Config("training set has no positive frames".into()));
    }
    let pos_weight = cfg.pos_weight.unwrap_or((total as f64 - pos) / pos);

    let mut model = TcnModel::new(d, cfg.width, cfg.hidden, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let x = &dataset[i].features;
            if x.cols() != d {
                return Err(Error::dim("tcn input", x.shape(), (x.rows(), d)));
            }
            let mut g = Graph::new();
            let (z, ids) = model.logits_graph(&mut g, x)?;
            let loss = g.bce_with_logits(z, targets[i].clone(), pos_weight)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "tcn epoch {epoch}, instance {}: loss {value}",
                    dataset[i].segmentation.id
                )));
            }
            sum += value;
            let grads = g.backward(loss)?;
            let grads: Vec<Matrix> = ids.iter().map(|&id| grads.get_or_zeros(&g, id)).collect();
            opt.step(model.params_mut(), &grads)?;
        }
        history.push(sum / dataset.len() as f64);
    }
    Ok((model, history))
}

/// Frames scoring above `threshold` (frame 0 excluded), thinned by greedy
/// non-maximum suppression: the highest remaining score is kept and every
/// candidate within `nms_radius` of a kept frame is dropped. Equal scores
/// favour the earlier frame. Radius 0 keeps every candidate.
pub fn pick_peaks(scores: &[f64], threshold: f64, nms_radius: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (1..scores.len()).filter(|&t| scores[t] > threshold).collect();
    cand.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for t in cand {
        if nms_radius == 0 || kept.iter().all(|&k| k.abs_diff(t) > nms_radius) {
            kept.push(t);
        }
    }
    kept.sort_unstable();
    kept
}

/// Boundaries from TCN scores. Representatives number the predicted segments.
pub fn tcn_parse(
    id: impl Into<String>,
    x: &Matrix,
    model: &TcnModel,
    threshold: f64,
    nms_radius: usize,
) -> Result<ParseResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Input(format!("threshold {threshold} outside (0, 1)")));
    }
    let scores = model.scores(x)?;
    let starts = pick_peaks(&scores, threshold, nms_radius);
    let mut representatives = vec![0; scores.len()];
    for (k, &s) in starts.iter().enumerate() {
        for r in &mut representatives[s..] {
            *r = k + 1;
        }
    }
    Ok(ParseResult {
        id: id.into(),
        starts,
        representatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Segmentation;

    #[test]
    fn targets_rule() {
        let y = boundary_targets(&[10], 20, 1);
        let ones: Vec<usize> = (0..20).filter(|&t| y[t] == 1.0).collect();
        assert_eq!(ones, vec![9, 10, 11]);
        assert_eq!(boundary_targets(&[1, 19], 20, 2).iter().sum::<f64>(), 7.0);
    }

    #[test]
    fn peaks() {
        assert!(pick_peaks(&[0.1, 0.2, 0.3], 0.5, 3).is_empty());
        assert_eq!(pick_peaks(&[0.1, 0.9, 0.1], 0.5, 0), vec![1]);
        assert_eq!(pick_peaks(&[0.1, 0.9, 0.1], 0.5, 4), vec![1]);
        assert_eq!(pick_peaks(&[0.1, 0.8, 0.8, 0.1], 0.5, 1), vec![1]);
        assert_eq!(pick_peaks(&[0.1, 0.8, 0.8, 0.1], 0.5, 0), vec![1, 2]);
        // frame 0 is never a boundary
        assert!(pick_peaks(&[0.99, 0.1], 0.5, 0).is_empty());
        // the taller peak wins inside the radius
        assert_eq!(pick_peaks(&[0.0, 0.6, 0.0, 0.9, 0.0, 0.0, 0.0, 0.7], 0.5, 2), vec![3, 7]);
    }

    #[test]
    fn peaks_invariant_under_affine_map_fixing_threshold() {
        let s = [0.1, 0.7, 0.65, 0.2, 0.55, 0.9, 0.3, 0.6];
        let f = |v: f64| 0.5 + 0.8 * (v - 0.5);
        let t: Vec<f64> = s.iter().map(|&v| f(v)).collect();
        for r in 0..4 {
            assert_eq!(pick_peaks(&s, 0.5, r), pick_peaks(&t, 0.5, r));
        }
    }

    #[test]
    fn scores_shape_and_range() {
        let m = TcnModel::new(3, 5, 4, 1);
        let x = Matrix::random_uniform(17, 3, 50.0, &mut ChaCha8Rng::seed_from_u64(1));
        let s = m.scores(&x).unwrap();
        assert_eq!(s.len(), 17);
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(m.scores(&Matrix::zeros(4, 2)).is_err());
    }

    fn spike_dataset() -> Vec<TrainInstance> {
        // channel 0 spikes at the boundary frame, channel 1 is constant
        (0..6)
            .map(|i| {
                let n = 20;
                let b = 6 + i;
                let mut x = Matrix::zeros(n, 2);
                for t in 0..n {
                    x[(t, 1)] = 1.0;
                }
                x[(b, 0)] = 3.0;
                TrainInstance {
                    features: x,
                    segmentation: Segmentation::new(format!("s{i}"), "a", n, vec![b]).unwrap(),
                    label: 0,
                }
            })
            .collect()
    }

    #[test]
    fn separable_spike_loss_decreases() {
        let cfg = TcnTrainConfig {
            width: 3,
            hidden: 8,
            radius: 0,
            epochs: 150,
            learning_rate: 0.05,
            ..Default::default()
        };
        let data = spike_dataset();
        let (model, hist) = tcn_train(&data, &cfg).unwrap();
        assert!(hist.last().unwrap() < &(0.05 * hist[0]), "{:?}", &hist[..5]);
        for inst in &data {
            let p = tcn_parse("x", &inst.features, &model, 0.5, 5).unwrap();
            assert_eq!(p.starts, inst.segmentation.starts);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TcnTrainConfig {
            width: 3,
            hidden: 4,
            epochs: 3,
            ..Default::default()
        };
        let data = spike_dataset();
        assert_eq!(tcn_train(&data, &cfg).unwrap(), tcn_train(&data, &cfg).unwrap());
    }

    #[test]
    fn no_positives_is_config_error() {
        let data = vec![TrainInstance {
            features: Matrix::zeros(5, 2),
            segmentation: Segmentation::new("z", "a", 5, vec![]).unwrap(),
            label: 0,
        }];
        assert!(matches!(
            tcn_train(&data, &TcnTrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parse_representatives_number_segments() {
        let m = TcnModel::new(2, 3, 2, 0);
        let x = Matrix::zeros(6, 2);
        let p = tcn_parse("x", &x, &m, 0.5, 0).unwrap();
        assert_eq!(p.representatives.len(), 6);
        assert!(tcn_parse("x", &x, &m, 1.0, 0).is_err());
    }
}
