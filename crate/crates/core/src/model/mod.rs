//! Pattern-bank attention units and the stacked parser network.
//!
//! Each unit holds a learnable pattern bank `φ` (m x d_φ). A frame feature
//! queries the bank through two attention heads; the heads' pattern readouts
//! are merged by one fully connected layer, added back onto the frame
//! feature, and passed through a two-layer feed-forward net. Units are
//! stacked, each with its own bank, and the last unit's attention responses
//! drive parsing.

mod checkpoint;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Graph, Matrix, NodeId};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    forward, forward_graph, retrieve_top_frames, sps_forward, ForwardTrace, GraphTrace, Retrieved,
    UnitTrace,
};

/// Network dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// d_f, width of input and refined frame features.
    pub feature_dim: usize,
    /// d_φ, width of a pattern.
    pub pattern_dim: usize,
    /// m, patterns per bank.
    pub num_patterns: usize,
    /// d_a, query/key width.
    pub attn_dim: usize,
    /// d_v, value width per head.
    pub value_dim: usize,
    /// d_h, feed-forward hidden width.
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub num_units: usize,
    /// Standardise `f + r̃` per frame before the feed-forward net.
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            pattern_dim: 64,
            num_patterns: 32,
            attn_dim: 32,
            value_dim: 32,
            hidden_dim: 128,
            num_classes: 4,
            num_units: 2,
            layer_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("pattern_dim", self.pattern_dim),
            ("num_patterns", self.num_patterns),
            ("attn_dim", self.attn_dim),
            ("value_dim", self.value_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_classes", self.num_classes),
            ("num_units", self.num_units),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Learnable m x d_φ pattern bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMiner {
    pub phi: Matrix,
}

impl PatternMiner {
    pub fn num_patterns(&self) -> usize {
        self.phi.rows()
    }
}

/// Query, key and value projections of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// d_f x d_a
    pub w_q: Matrix,
    /// d_φ x d_a
    pub w_k: Matrix,
    /// d_φ x d_v
    pub w_v: Matrix,
}

/// One pattern-attention unit with its own bank.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsUnit {
    pub miner: PatternMiner,
    pub heads: [AttentionHead; 2],
    /// 2·d_v x d_f
    pub merge_w: Matrix,
    /// 1 x d_f
    pub merge_b: Matrix,
    /// d_f x d_h
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    /// d_h x d_f
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
    pub layer_norm: bool,
}

impl SpsUnit {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let init = |r: usize, c: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            Matrix::random_uniform(r, c, 1.0 / (fan_in as f64).sqrt(), rng)
        };
        let phi = init(cfg.num_patterns, cfg.pattern_dim, cfg.pattern_dim, rng);
        let head = |rng: &mut ChaCha8Rng| AttentionHead {
            w_q: init(cfg.feature_dim, cfg.attn_dim, cfg.feature_dim, rng),
            w_k: init(cfg.pattern_dim, cfg.attn_dim, cfg.pattern_dim, rng),
            w_v: init(cfg.pattern_dim, cfg.value_dim, cfg.pattern_dim, rng),
        };
        let heads = [head(rng), head(rng)];
        Self {
            miner: PatternMiner { phi },
            heads,
            merge_w: init(2 * cfg.value_dim, cfg.feature_dim, 2 * cfg.value_dim, rng),
            merge_b: Matrix::zeros(1, cfg.feature_dim),
            ffn_w1: init(cfg.feature_dim, cfg.hidden_dim, cfg.feature_dim, rng),
            ffn_b1: Matrix::zeros(1, cfg.hidden_dim),
            ffn_w2: init(cfg.hidden_dim, cfg.feature_dim, cfg.hidden_dim, rng),
            ffn_b2: Matrix::zeros(1, cfg.feature_dim),
            layer_norm: cfg.layer_norm,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.heads[0].w_q.rows()
    }

    pub fn num_patterns(&self) -> usize {
        self.miner.num_patterns()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let [h0, h1] = &self.heads;
        vec![
            &self.miner.phi,
            &h0.w_q,
            &h0.w_k,
            &h0.w_v,
            &h1.w_q,
            &h1.w_k,
            &h1.w_v,
            &self.merge_w,
            &self.merge_b,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let [h0, h1] = &mut self.heads;
        vec![
            &mut self.miner.phi,
            &mut h0.w_q,
            &mut h0.w_k,
            &mut h0.w_v,
            &mut h1.w_q,
            &mut h1.w_k,
            &mut h1.w_v,
            &mut self.merge_w,
            &mut self.merge_b,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
        ]
    }

    /// Places the unit's parameters on `g`.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> UnitNodes {
        let mut leaf = |m: &Matrix| {
            if trainable {
                g.param(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        let ids: Vec<NodeId> = self.params().into_iter().map(&mut leaf).collect();
        UnitNodes {
            phi: ids[0],
            heads: [
                [ids[1], ids[2], ids[3]],
                [ids[4], ids[5], ids[6]],
            ],
            merge_w: ids[7],
            merge_b: ids[8],
            ffn_w1: ids[9],
            ffn_b1: ids[10],
            ffn_w2: ids[11],
            ffn_b2: ids[12],
            layer_norm: self.layer_norm,
        }
    }
}

/// Graph handles of one unit's parameters.
#[derive(Debug, Clone)]
pub struct UnitNodes {
    pub phi: NodeId,
    /// `[w_q, w_k, w_v]` per head.
    pub heads: [[NodeId; 3]; 2],
    pub merge_w: NodeId,
    pub merge_b: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub layer_norm: bool,
}

impl UnitNodes {
    fn ids(&self) -> Vec<NodeId> {
        let [h0, h1] = &self.heads;
        let mut v = vec![self.phi];
        v.extend_from_slice(h0);
        v.extend_from_slice(h1);
        v.extend([
            self.merge_w,
            self.merge_b,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
        ]);
        v
    }
}

/// Graph handles of a whole model, in [`TransParserModel::params`] order.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub units: Vec<UnitNodes>,
    pub classifier: NodeId,
}

impl ModelNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.units.iter().flat_map(UnitNodes::ids).collect();
        v.push(self.classifier);
        v
    }
}

/// Stacked units plus the d_f x C action classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TransParserModel {
    pub config: ModelConfig,
    pub units: Vec<SpsUnit>,
    pub classifier: Matrix,
}

impl TransParserModel {
    /// Fresh model; weights from `U(-s, s)` with `s = 1/sqrt(fan_in)`, biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let units = (0..config.num_units)
            .map(|_| SpsUnit::new(&config, &mut rng))
            .collect();
        let classifier = Matrix::random_uniform(
            config.feature_dim,
            config.num_classes,
            1.0 / (config.feature_dim as f64).sqrt(),
            &mut rng,
        );
        Ok(Self {
            config,
            units,
            classifier,
        })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.units.iter().flat_map(SpsUnit::params).collect();
        v.push(&self.classifier);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self.units.iter_mut().flat_map(SpsUnit::params_mut).collect();
        v.push(&mut self.classifier);
        v
    }

    /// Replaces every parameter, in [`params`](Self::params) order.
    pub fn set_params(&mut self, values: &[Matrix]) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Input(format!(
                "{} matrices for {} parameters",
                values.len(),
                slots.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::dim("set_params", slot.shape(), v.shape()));
            }
            *slot = v.clone();
        }
        Ok(())
    }

    pub fn num_patterns(&self) -> usize {
        self.config.num_patterns
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ModelNodes {
        let units = self.units.iter().map(|u| u.register(g, trainable)).collect();
        let classifier = if trainable {
            g.param(self.classifier.clone())
        } else {
            g.constant(self.classifier.clone())
        };
        ModelNodes { units, classifier }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            pattern_dim: 5,
            num_patterns: 4,
            attn_dim: 3,
            value_dim: 2,
            hidden_dim: 7,
            num_classes: 3,
            num_units: 2,
            layer_norm: false,
        }
    }

    #[test]
    fn shapes_follow_config() {
        let m = TransParserModel::new(small(), 0).unwrap();
        let u = &m.units[0];
        assert_eq!(u.miner.phi.shape(), (4, 5));
        assert_eq!(u.heads[1].w_q.shape(), (6, 3));
        assert_eq!(u.heads[1].w_k.shape(), (5, 3));
        assert_eq!(u.heads[1].w_v.shape(), (5, 2));
        assert_eq!(u.merge_w.shape(), (4, 6));
        assert_eq!(u.ffn_w1.shape(), (6, 7));
        assert_eq!(u.ffn_w2.shape(), (7, 6));
        assert_eq!(m.classifier.shape(), (6, 3));
        assert_eq!(m.params().len(), 2 * 13 + 1);
    }

    #[test]
    fn init_is_scaled_and_nonzero() {
        let m = TransParserModel::new(small(), 7).unwrap();
        for u in &m.units {
            assert!(u.miner.phi.max_abs() > 0.0);
            assert!(u.miner.phi.max_abs() <= 1.0 / 5f64.sqrt());
            assert!(u.ffn_w2.max_abs() <= 1.0 / 7f64.sqrt());
        }
        // each unit owns a distinct bank
        assert_ne!(m.units[0].miner.phi, m.units[1].miner.phi);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(TransParserModel::new(small(), 3).unwrap(), TransParserModel::new(small(), 3).unwrap());
        assert_ne!(TransParserModel::new(small(), 3).unwrap(), TransParserModel::new(small(), 4).unwrap());
    }

    #[test]
    fn zero_dims_rejected() {
        let cfg = ModelConfig {
            num_units: 0,
            ..small()
        };
        assert!(matches!(TransParserModel::new(cfg, 0), Err(Error::Config(_))));
    }
}
