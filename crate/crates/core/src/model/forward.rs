use crate::error::{Error, Result};
use crate::linalg::{Graph, Matrix, NodeId};

use super::{ModelNodes, SpsUnit, TransParserModel, UnitNodes};

/// Per-unit outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitTrace {
    /// n x m, mean of the two heads' attention rows.
    pub response: Matrix,
    /// n x d_f refined features.
    pub features: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub units: Vec<UnitTrace>,
    /// 1 x C class scores from frame-averaged final features.
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn last_response(&self) -> &Matrix {
        &self.units.last().expect("at least one unit").response
    }

    pub fn final_features(&self) -> &Matrix {
        &self.units.last().expect("at least one unit").features
    }
}

/// Graph handles for the outputs of [`forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphTrace {
    /// `(features, response)` per unit.
    pub units: Vec<(NodeId, NodeId)>,
    pub logits: NodeId,
}

impl GraphTrace {
    pub fn last_response(&self) -> NodeId {
        self.units.last().expect("at least one unit").1
    }

    pub fn final_features(&self) -> NodeId {
        self.units.last().expect("at least one unit").0
    }
}

/// One unit on the graph. Returns `(features, response)`.
pub(crate) fn sps_graph(g: &mut Graph, x: NodeId, unit: &UnitNodes) -> Result<(NodeId, NodeId)> {
    let mut readouts = Vec::with_capacity(2);
    let mut responses = Vec::with_capacity(2);
    for [w_q, w_k, w_v] in unit.heads {
        let q = g.matmul(x, w_q)?;
        let k = g.matmul(unit.phi, w_k)?;
        let v = g.matmul(unit.phi, w_v)?;
        let scores = g.matmul_t(q, k)?;
        let alpha = g.softmax_rows(scores);
        readouts.push(g.matmul(alpha, v)?);
        responses.push(alpha);
    }
    let merged = g.hcat(readouts[0], readouts[1])?;
    let residual = g.linear(merged, unit.merge_w, Some(unit.merge_b))?;
    let mut z = g.add(x, residual)?;
    if unit.layer_norm {
        z = g.layer_norm_rows(z);
    }
    let h = g.linear(z, unit.ffn_w1, Some(unit.ffn_b1))?;
    let h = g.relu(h);
    let out = g.linear(h, unit.ffn_w2, Some(unit.ffn_b2))?;

    let both = g.add(responses[0], responses[1])?;
    let response = g.scale(both, 0.5);
    Ok((out, response))
}

/// Chains every unit over the n x d_f input node `x` and appends the
/// frame-averaged classifier scores.
pub fn forward_graph(g: &mut Graph, nodes: &ModelNodes, x: NodeId) -> Result<GraphTrace> {
    if g.value(x).rows() == 0 {
        return Err(Error::Input("empty feature sequence".into()));
    }
    let mut units = Vec::with_capacity(nodes.units.len());
    let mut cur = x;
    for unit in &nodes.units {
        let (out, resp) = sps_graph(g, cur, unit)?;
        units.push((out, resp));
        cur = out;
    }
    let pooled = g.mean_rows(cur);
    let logits = g.matmul(pooled, nodes.classifier)?;
    Ok(GraphTrace { units, logits })
}

fn check_input(features: &Matrix, feature_dim: usize) -> Result<()> {
    if features.rows() == 0 {
        return Err(Error::Input("empty feature sequence".into()));
    }
    if features.cols() != feature_dim {
        return Err(Error::dim("features", features.shape(), (features.rows(), feature_dim)));
    }
    Ok(())
}

/// Runs a single unit. Returns `(refined features, response)`.
pub fn sps_forward(features: &Matrix, unit: &SpsUnit) -> Result<(Matrix, Matrix)> {
    check_input(features, unit.feature_dim())?;
    let mut g = Graph::new();
    let nodes = unit.register(&mut g, false);
    let x = g.constant(features.clone());
    let (out, resp) = sps_graph(&mut g, x, &nodes)?;
    Ok((g.value(out).clone(), g.value(resp).clone()))
}

pub fn forward(features: &Matrix, model: &TransParserModel) -> Result<ForwardTrace> {
    check_input(features, model.config.feature_dim)?;
    let mut g = Graph::new();
    let nodes = model.register(&mut g, false);
    let x = g.constant(features.clone());
    let trace = forward_graph(&mut g, &nodes, x)?;
    Ok(ForwardTrace {
        units: trace
            .units
            .iter()
            .map(|&(f, r)| UnitTrace {
                response: g.value(r).clone(),
                features: g.value(f).clone(),
            })
            .collect(),
        logits: g.value(trace.logits).clone(),
    })
}

/// A frame picked by [`retrieve_top_frames`].
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub id: String,
    pub frame: usize,
    pub score: f64,
}

/// The `top_n` frames across all traces with the highest last-unit response
/// to pattern `pattern`. Ties go to the smaller instance id, then the earlier
/// frame.
pub fn retrieve_top_frames<'a, I>(traces: I, pattern: usize, top_n: usize) -> Result<Vec<Retrieved>>
where
    I: IntoIterator<Item = (&'a str, &'a ForwardTrace)>,
{
    let mut pool = Vec::new();
    for (id, trace) in traces {
        let resp = trace.last_response();
        if pattern >= resp.cols() {
            return Err(Error::Index {
                index: pattern,
                len: resp.cols(),
            });
        }
        for t in 0..resp.rows() {
            pool.push(Retrieved {
                id: id.to_string(),
                frame: t,
                score: resp[(t, pattern)],
            });
        }
    }
    pool.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.id.cmp(&b.id))
            .then_with(|| a.frame.cmp(&b.frame))
    });
    pool.truncate(top_n);
    Ok(pool)
}
