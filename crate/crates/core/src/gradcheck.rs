//! Central finite-difference oracle for reverse-mode gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Worst entry found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, None)?;
    Ok(report.max_rel_error)
}

/// Gradient check over several inputs at once.
///
/// With `max_entries = Some(n)`, at most `n` evenly spaced entries of each
/// input are perturbed.
pub fn grad_check_many<S, F>(
    f: F,
    inputs: &[Tensor<S>],
    eps: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor<S>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        let v = g.value(l).item().as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check perturbed loss".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for (which, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::InvalidTensor("input not tracked".into()))?;
        if !analytic.all_finite() {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
        let n = input.len();
        let stride = match max_entries {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = input.data()[idx];
            work[which].data_mut()[idx] = orig + S::lit(eps);
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = orig - S::lit(eps);
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx].as_f64();
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.input = which;
                report.index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
