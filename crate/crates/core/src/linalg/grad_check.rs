//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

use super::graph::{Graph, NodeId};
use super::matrix::Matrix;

/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter, flat entry) where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients against `(f(θ+eps) - f(θ-eps)) / (2·eps)` for
/// every entry of every parameter.
///
/// `loss_fn` maps a parameter set to `(loss, gradients)`; gradients must
/// match the parameters in count and shape. The relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut loss_fn: F, params: &[Matrix], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if !(eps > 0.0) {
        return Err(Error::Input(format!("eps must be positive, got {eps}")));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss} at the unperturbed point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Input(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (g, p) in analytic.iter().zip(params) {
        if g.shape() != p.shape() {
            return Err(Error::dim("grad_check", g.shape(), p.shape()));
        }
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for p in 0..params.len() {
        for k in 0..params[p].data().len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + eps;
            let (plus, _) = loss_fn(&work)?;
            work[p].data_mut()[k] = orig - eps;
            let (minus, _) = loss_fn(&work)?;
            work[p].data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss not finite when perturbing parameter {p} entry {k}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[k];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (p, k),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Adapts a graph builder into a `loss_fn` for [`grad_check`]: each call
/// registers the parameters as graph leaves, builds the scalar output and
/// runs the backward pass.
pub fn graph_loss<B>(build: B) -> impl FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>
where
    B: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    move |params: &[Matrix]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = build(&mut g, &ids)?;
        let grads = g.backward(out)?;
        let loss = g.value(out).item();
        Ok((loss, ids.iter().map(|&id| grads.get_or_zeros(&g, id)).collect()))
    }
}
