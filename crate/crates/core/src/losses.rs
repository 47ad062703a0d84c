//! Training objectives and the SGD training loop.
//!
//! The local loss compares last-unit attention responses pairwise:
//! `(L_sim + λ) / (L_dissim + ε)`, where `L_sim` is the mean L2 distance over
//! frame pairs inside one sub-action and `L_dissim` the mean over pairs that
//! straddle sub-actions. The global loss is the action classification NLL of
//! the frame-averaged classifier scores on the final features.

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Graph, Matrix, NodeId, Sgd};
use crate::model::{forward_graph, TransParserModel};
use crate::types::{validate_starts, Segmentation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Added to the within-segment term; keeps the collapsed solution costly.
    pub lambda: f64,
    /// Added to the across-segment denominator.
    pub epsilon_div: f64,
    pub w_local: f64,
    pub w_global: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Subsample at most this many pairs of each kind per instance.
    pub max_pairs: Option<usize>,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            epsilon_div: 1e-8,
            w_local: 1.0,
            w_global: 1.0,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            max_pairs: None,
            grad_clip: Some(1.0),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_div > 0.0) {
            return Err(Error::Config("epsilon_div must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.w_local >= 0.0 && self.w_global >= 0.0) || self.w_local + self.w_global <= 0.0 {
            return Err(Error::Config(
                "loss weights must be non-negative with at least one positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning_rate must be >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Within-segment and across-segment frame pairs `(i, j)`, `i < j`.
pub fn segment_pairs(starts: &[usize], n: usize) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut seg_of = vec![0usize; n];
    let mut s = 0;
    for (t, slot) in seg_of.iter_mut().enumerate() {
        while s < starts.len() && starts[s] <= t {
            s += 1;
        }
        *slot = s;
    }
    let mut within = Vec::new();
    let mut across = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if seg_of[i] == seg_of[j] {
                within.push((i, j));
            } else {
                across.push((i, j));
            }
        }
    }
    (within, across)
}

fn subsample<R: Rng>(pairs: Vec<(usize, usize)>, max: Option<usize>, rng: &mut R) -> Vec<(usize, usize)> {
    match max {
        Some(k) if pairs.len() > k => {
            let mut picked = index::sample(rng, pairs.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| pairs[i]).collect()
        }
        _ => pairs,
    }
}

/// Local loss on the graph over an n x m response node.
///
/// With a single segment there are no across pairs; the loss then falls back
/// to `(L_sim + λ) / ε` and a warning is logged.
pub fn local_loss_node<R: Rng>(
    g: &mut Graph,
    responses: NodeId,
    starts: &[usize],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<NodeId> {
    let n = g.value(responses).rows();
    validate_starts(starts, n).map_err(Error::Validation)?;
    let (within, across) = segment_pairs(starts, n);
    let within = subsample(within, cfg.max_pairs, rng);
    let across = subsample(across, cfg.max_pairs, rng);

    let sim = g.pair_mean_distance(responses, within)?;
    let num = g.add_scalar(sim, cfg.lambda);
    if across.is_empty() {
        warn!("degenerate instance: one segment, local loss uses the epsilon guard alone");
        return Ok(g.scale(num, 1.0 / cfg.epsilon_div));
    }
    let dissim = g.pair_mean_distance(responses, across)?;
    let den = g.add_scalar(dissim, cfg.epsilon_div);
    g.div(num, den)
}

/// Local loss of a fixed response matrix.
pub fn local_loss(responses: &Matrix, seg: &Segmentation, cfg: &LossConfig) -> Result<f64> {
    if seg.length != responses.rows() {
        return Err(Error::Input(format!(
            "segmentation length {} but {} response rows",
            seg.length,
            responses.rows()
        )));
    }
    let mut g = Graph::new();
    let r = g.constant(responses.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = local_loss_node(&mut g, r, &seg.starts, cfg, &mut rng)?;
    Ok(g.value(out).item())
}

/// Classification NLL of `softmax(mean_t(f_t · W))` for the true `label`.
pub fn global_loss(final_features: &Matrix, classifier: &Matrix, label: usize) -> Result<f64> {
    if label >= classifier.cols() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            classifier.cols()
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(final_features.clone());
    let w = g.constant(classifier.clone());
    let pooled = g.mean_rows(f);
    let logits = g.matmul(pooled, w)?;
    let out = g.softmax_cross_entropy(logits, vec![label])?;
    Ok(g.value(out).item())
}

/// One labelled training sequence.
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub features: Matrix,
    pub segmentation: Segmentation,
    pub label: usize,
}

/// Loss values and parameter gradients for one instance.
#[derive(Debug, Clone)]
pub struct InstanceLoss {
    pub local: f64,
    pub global: f64,
    pub total: f64,
    pub grads: Vec<Matrix>,
}

/// Combined loss `w_local·L_local + w_global·L_global` and its gradients,
/// in [`TransParserModel::params`] order.
pub fn instance_loss<R: Rng>(
    model: &TransParserModel,
    inst: &TrainInstance,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<InstanceLoss> {
    if inst.label >= model.config.num_classes {
        return Err(Error::Input(format!(
            "label {} out of range for {} classes",
            inst.label, model.config.num_classes
        )));
    }
    let mut g = Graph::new();
    let nodes = model.register(&mut g, true);
    let x = g.constant(inst.features.clone());
    let trace = forward_graph(&mut g, &nodes, x)?;

    let global = g.softmax_cross_entropy(trace.logits, vec![inst.label])?;
    let mut total = g.scale(global, cfg.w_global);
    let mut local_value = 0.0;
    let use_local = cfg.w_local > 0.0 && !inst.segmentation.starts.is_empty();
    if cfg.w_local > 0.0 && !use_local {
        warn!(
            "instance {} has a single segment; local loss skipped",
            inst.segmentation.id
        );
    }
    if use_local {
        let local = local_loss_node(&mut g, trace.last_response(), &inst.segmentation.starts, cfg, rng)?;
        local_value = g.value(local).item();
        let weighted = g.scale(local, cfg.w_local);
        total = g.add(total, weighted)?;
    }
    let grads = g.backward(total)?;
    Ok(InstanceLoss {
        local: local_value,
        global: g.value(global).item(),
        total: g.value(total).item(),
        grads: nodes.ids().into_iter().map(|id| grads.get_or_zeros(&g, id)).collect(),
    })
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub local_loss: f64,
    pub global_loss: f64,
    pub total: f64,
}

pub fn train(
    dataset: &[TrainInstance],
    model: TransParserModel,
    cfg: &LossConfig,
) -> Result<(TransParserModel, Vec<EpochLog>)> {
    train_with(dataset, model, cfg, |_| {})
}

/// Minibatch SGD with momentum; instance order is reshuffled every epoch from
/// `cfg.seed`. `on_epoch` sees each epoch's mean losses as they complete.
pub fn train_with(
    dataset: &[TrainInstance],
    mut model: TransParserModel,
    cfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(TransParserModel, Vec<EpochLog>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    for inst in dataset {
        if inst.features.rows() != inst.segmentation.length {
            return Err(Error::Input(format!(
                "instance {}: {} frames but segmentation length {}",
                inst.segmentation.id,
                inst.features.rows(),
                inst.segmentation.length
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_local, mut sum_global, mut sum_total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Matrix>> = None;
            for &i in batch {
                let inst = &dataset[i];
                let loss = instance_loss(&model, inst, cfg, &mut rng)?;
                if !loss.total.is_finite() || loss.grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "epoch {epoch}, instance {}: loss {}",
                        inst.segmentation.id, loss.total
                    )));
                }
                sum_local += loss.local;
                sum_global += loss.global;
                sum_total += loss.total;
                match &mut acc {
                    None => acc = Some(loss.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&loss.grads) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            let mut scale = 1.0 / batch.len() as f64;
            let acc = acc.unwrap();
            if let Some(clip) = cfg.grad_clip {
                let norm = scale * acc.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            let grads: Vec<Matrix> = acc.iter().map(|g| g.scale(scale)).collect();
            opt.step(model.params_mut(), &grads)?;
        }
        let n = dataset.len() as f64;
        let log = EpochLog {
            epoch,
            local_loss: sum_local / n,
            global_loss: sum_global / n,
            total: sum_total / n,
        };
        on_epoch(&log);
        history.push(log);
    }
    Ok((model, history))
}
