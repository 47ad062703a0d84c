//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the recorded nodes from a scalar output back to
//! the leaves. A node's gradient is the sum of its consumers' contributions,
//! added in consumer-id order, so the result does not depend on the order in
//! which the walk visits nodes.

use crate::error::{Error, Result};

use super::matrix::{softmax_rows, Matrix};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Div(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    MeanRows(NodeId),
    Hcat(NodeId, NodeId),
    PairMeanDistance(NodeId, Vec<(usize, usize)>),
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
        pos_weight: f64,
    },
    Unfold(NodeId, usize),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | AddRow(a, b) | Div(a, b) | Hcat(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | SoftmaxRows(a)
            | LayerNormRows(a)
            | MeanRows(a)
            | PairMeanDistance(a, _)
            | SoftmaxCrossEntropy(a, _)
            | Unfold(a, _) => vec![*a],
            BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Node visiting order used by [`Graph::backward_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Traversal {
    /// Reverse creation order.
    #[default]
    Reverse,
    /// Reverse post-order of a depth-first search from the output.
    DepthFirst,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the output with respect to `id`, if `id` influences it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros shaped like the node when it
    /// does not influence the output.
    pub fn get_or_zeros(&self, graph: &Graph, id: NodeId) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = graph.value(id).shape();
            Matrix::zeros(r, c)
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Matrix, op: Op) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.derived(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.derived(v, Op::Add(a, b)))
    }

    /// Adds the 1 x c row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.derived(v, Op::AddRow(a, bias)))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.derived(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.derived(v, Op::AddScalar(a))
    }

    /// Quotient of two 1x1 nodes.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != (1, 1) || vb.shape() != (1, 1) {
            return Err(Error::dim("div", va.shape(), vb.shape()));
        }
        let v = Matrix::scalar(va.item() / vb.item());
        Ok(self.derived(v, Op::Div(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.derived(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.derived(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..v.rows() {
            let (mean, inv) = row_moments(x.row(i));
            for o in v.row_mut(i) {
                *o = (*o - mean) * inv;
            }
        }
        self.derived(v, Op::LayerNormRows(a))
    }

    /// Column means, 1 x c.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mean_rows();
        self.derived(v, Op::MeanRows(a))
    }

    pub fn hcat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hcat(self.value(b))?;
        Ok(self.derived(v, Op::Hcat(a, b)))
    }

    /// Mean Euclidean distance between the listed row pairs of `a`; zero when
    /// `pairs` is empty.
    pub fn pair_mean_distance(&mut self, a: NodeId, pairs: Vec<(usize, usize)>) -> Result<NodeId> {
        let x = self.value(a);
        let n = x.rows();
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(Error::Index {
                index: i.max(j),
                len: n,
            });
        }
        let total: f64 = pairs
            .iter()
            .map(|&(i, j)| row_distance(x.row(i), x.row(j)))
            .sum();
        let mean = if pairs.is_empty() {
            0.0
        } else {
            total / pairs.len() as f64
        };
        Ok(self.derived(Matrix::scalar(mean), Op::PairMeanDistance(a, pairs)))
    }

    /// Mean over rows of `-log softmax(logits_r)[labels_r]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let z = self.value(logits);
        if labels.len() != z.rows() || z.rows() == 0 {
            return Err(Error::Input(format!(
                "{} labels for {} logit rows",
                labels.len(),
                z.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(Error::Index {
                index: bad,
                len: z.cols(),
            });
        }
        let total: f64 = z
            .iter_rows()
            .zip(&labels)
            .map(|(row, &l)| log_sum_exp(row) - row[l])
            .sum();
        let v = Matrix::scalar(total / z.rows() as f64);
        Ok(self.derived(v, Op::SoftmaxCrossEntropy(logits, labels)))
    }

    /// Mean weighted binary cross-entropy on raw logits:
    /// `-(w·y·ln σ(z) + (1-y)·ln(1-σ(z)))`.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: Vec<f64>,
        pos_weight: f64,
    ) -> Result<NodeId> {
        let z = self.value(logits);
        if targets.len() != z.data().len() || targets.is_empty() {
            return Err(Error::Input(format!(
                "{} targets for {} logits",
                targets.len(),
                z.data().len()
            )));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z))
            .sum();
        let v = Matrix::scalar(total / targets.len() as f64);
        Ok(self.derived(
            v,
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            },
        ))
    }

    /// Stacks a `width`-frame window around every row (odd `width`, edge rows
    /// replicated past the ends). Output is n x (width·c); multiplying it by a
    /// (width·c) x c' kernel gives a same-length 1-D convolution.
    pub fn unfold(&mut self, a: NodeId, width: usize) -> Result<NodeId> {
        if width % 2 == 0 {
            return Err(Error::Input(format!("unfold width must be odd, got {width}")));
        }
        let v = unfold(self.value(a), width);
        Ok(self.derived(v, Op::Unfold(a, width)))
    }

    /// Backward pass from a 1x1 output in reverse creation order.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.backward_with(output, Traversal::Reverse)
    }

    pub fn backward_with(&self, output: NodeId, traversal: Traversal) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Input(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let order = match traversal {
            Traversal::Reverse => (0..=output.0).rev().collect::<Vec<_>>(),
            Traversal::DepthFirst => self.dfs_order(output),
        };

        let mut pending: Vec<Vec<(usize, Matrix)>> = vec![Vec::new(); output.0 + 1];
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        pending[output.0].push((usize::MAX, Matrix::scalar(1.0)));

        for id in order {
            let mut parts = std::mem::take(&mut pending[id]);
            if parts.is_empty() || !self.nodes[id].requires_grad {
                continue;
            }
            parts.sort_by_key(|(consumer, _)| *consumer);
            let mut parts = parts.into_iter();
            let mut grad = parts.next().map(|(_, g)| g).unwrap();
            for (_, g) in parts {
                grad.add_assign(&g)?;
            }
            for (parent, contribution) in self.local_backward(id, &grad)? {
                if self.nodes[parent.0].requires_grad {
                    pending[parent.0].push((id, contribution));
                }
            }
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn dfs_order(&self, output: NodeId) -> Vec<usize> {
        let mut visited = vec![false; output.0 + 1];
        let mut post = Vec::new();
        let mut stack = vec![(output.0, false)];
        while let Some((id, expanded)) = stack.pop() {
            if expanded {
                post.push(id);
                continue;
            }
            if visited[id] {
                continue;
            }
            visited[id] = true;
            stack.push((id, true));
            for p in self.nodes[id].op.parents() {
                if !visited[p.0] {
                    stack.push((p.0, false));
                }
            }
        }
        post.reverse();
        post
    }

    fn local_backward(&self, id: usize, g: &Matrix) -> Result<Vec<(NodeId, Matrix)>> {
        let node = &self.nodes[id];
        let val = |n: &NodeId| &self.nodes[n.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![(*a, g.matmul_t(val(b))?), (*b, val(a).t_matmul(g)?)],
            Op::MatMulT(a, b) => vec![(*a, g.matmul(val(b))?), (*b, g.t_matmul(val(a))?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, b) => {
                let mut db = Matrix::zeros(1, g.cols());
                for r in g.iter_rows() {
                    for (o, v) in db.data_mut().iter_mut().zip(r) {
                        *o += v;
                    }
                }
                vec![(*a, g.clone()), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Div(a, b) => {
                let (x, y) = (val(a).item(), val(b).item());
                let gi = g.item();
                vec![
                    (*a, Matrix::scalar(gi / y)),
                    (*b, Matrix::scalar(-gi * x / (y * y))),
                ]
            }
            Op::Relu(a) => vec![(*a, val(a).zip_map(g, |x, g| if x > 0.0 { g } else { 0.0 })?)],
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let s: f64 = yr.iter().zip(g.row(i)).map(|(y, g)| y * g).sum();
                    for (d, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
                        *d = yv * (*d - s);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNormRows(a) => {
                let x = val(a);
                let y = &node.value;
                let c = x.cols() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let (_, inv) = row_moments(x.row(i));
                    let gr = g.row(i);
                    let yr = y.row(i);
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c;
                    for ((d, &gv), &yv) in dx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *d = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![(*a, dx)]
            }
            Op::MeanRows(a) => {
                let n = val(a).rows();
                let mut dx = Matrix::zeros(n, g.cols());
                let scaled = g.scale(1.0 / n as f64);
                for i in 0..n {
                    dx.row_mut(i).copy_from_slice(scaled.data());
                }
                vec![(*a, dx)]
            }
            Op::Hcat(a, b) => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                let mut da = Matrix::zeros(g.rows(), ca);
                let mut db = Matrix::zeros(g.rows(), cb);
                for i in 0..g.rows() {
                    da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::PairMeanDistance(a, pairs) => {
                let x = val(a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                if !pairs.is_empty() {
                    let coef = g.item() / pairs.len() as f64;
                    for &(i, j) in pairs {
                        let dist = row_distance(x.row(i), x.row(j));
                        // subgradient 0 at coincident rows
                        if dist == 0.0 {
                            continue;
                        }
                        let s = coef / dist;
                        for k in 0..x.cols() {
                            let d = s * (x[(i, k)] - x[(j, k)]);
                            dx[(i, k)] += d;
                            dx[(j, k)] -= d;
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::SoftmaxCrossEntropy(a, labels) => {
                let mut dz = softmax_rows(val(a));
                let coef = g.item() / labels.len() as f64;
                for (i, &l) in labels.iter().enumerate() {
                    dz[(i, l)] -= 1.0;
                }
                vec![(*a, dz.scale(coef))]
            }
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            } => {
                let z = val(logits);
                let coef = g.item() / targets.len() as f64;
                let data = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| {
                        let s = sigmoid(z);
                        coef * (-pos_weight * y * (1.0 - s) + (1.0 - y) * s)
                    })
                    .collect();
                vec![(*logits, Matrix::from_vec(z.rows(), z.cols(), data)?)]
            }
            Op::Unfold(a, width) => {
                let x = val(a);
                let (n, c) = x.shape();
                let r = (*width / 2) as isize;
                let mut dx = Matrix::zeros(n, c);
                for t in 0..n {
                    let gr = g.row(t);
                    for o in 0..*width {
                        let src = clamp_index(t as isize + o as isize - r, n);
                        let block = &gr[o * c..(o + 1) * c];
                        for (d, v) in dx.row_mut(src).iter_mut().zip(block) {
                            *d += v;
                        }
                    }
                }
                vec![(*a, dx)]
            }
        };
        Ok(out)
    }
}

fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// (mean, 1/sqrt(variance + eps))
fn row_moments(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

pub(crate) fn unfold(x: &Matrix, width: usize) -> Matrix {
    let (n, c) = x.shape();
    let r = (width / 2) as isize;
    let mut out = Matrix::zeros(n, width * c);
    for t in 0..n {
        let row = out.row_mut(t);
        for o in 0..width {
            let src = clamp_index(t as isize + o as isize - r, n);
            row[o * c..(o + 1) * c].copy_from_slice(x.row(src));
        }
    }
    out
}
