//! Central-difference verification of analytic gradients.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / (|analytic| + |numeric| + 1e-12)` over all coordinates.
    pub max_rel_error: Real,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: Real,
    pub numeric: Real,
}

/// Checks the gradient of the scalar `f(x)` against central differences.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: Real) -> Result<Real>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let report = gradient_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Like [`gradient_check`] for a function of several tensors; every
/// coordinate of every input is perturbed.
pub fn gradient_check_many<F>(f: F, xs: &[Tensor], eps: Real) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |inputs: &[Tensor]| -> Result<Real> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::shape("gradient_check: function must return a scalar"));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = xs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("gradient_check: function value".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<Real>> = ids
        .iter()
        .zip(xs)
        .map(|(&id, x)| g.grad(id).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient_check: input {t} index {i}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (t, i),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
