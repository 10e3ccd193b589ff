//! Central finite-difference verification of autodiff gradients.

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over coordinates of `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares analytic gradients against central differences.
///
/// `loss` returns the loss value and its analytic gradient for each
/// parameter; the gradients are only read at the unperturbed point.
pub fn grad_check<F>(params: &[Tensor], eps: f64, mut loss: F) -> Result<GradCheck>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = loss(params)?;
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "grad_check: {} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (plus, _) = loss(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let (minus, _) = loss(&work)?;
            work[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss under perturbation of parameter {p}, coordinate {i}"
                )));
            }
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[p].data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (p, i);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;

    #[test]
    fn quadratic_is_exact() {
        let params = vec![Tensor::vector(vec![0.3, -1.2, 2.5]), Tensor::scalar(0.7)];
        let report = grad_check(&params, DEFAULT_EPS, |p| {
            let mut g = Graph::new();
            let a = g.param(p[0].clone());
            let b = g.param(p[1].clone());
            let aa = g.mul(a, a)?;
            let s = g.sum(aa)?;
            let bb = g.mul(b, b)?;
            let bb3 = g.scale(bb, 3.0)?;
            let l = g.add(s, bb3)?;
            let grads = g.backward(l)?;
            Ok((g.value(l).item(), vec![grads.get(a), grads.get(b)]))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.coordinates, 4);
    }

    #[test]
    fn non_finite_loss_faults() {
        let params = vec![Tensor::scalar(0.0)];
        let res = grad_check(&params, DEFAULT_EPS, |p| {
            let v = p[0].item();
            let l = if v == 0.0 { 0.0 } else { f64::NAN };
            Ok((l, vec![Tensor::scalar(0.0)]))
        });
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
