//! Central finite-difference gradient checking.
//!
//! The checker only ever runs forward passes to build its numeric estimate,
//! so it is independent of the backward rules it validates.

use super::graph::{Graph, Var};
use super::layers::Ctx;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares `backward` gradients of a scalar function of `inputs` against
/// central differences with step `eps`.
///
/// `build` receives a fresh graph and one leaf per input (all requiring
/// grad) and must return the scalar output. Relative errors use
/// `max(|a|, |n|, 1e-6)` as denominator so entries with vanishing gradient
/// do not blow up the ratio. At most `max_entries` coordinates per input
/// are perturbed, spread evenly.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, max_entries: usize, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ts
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(false)))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        Ok(g.data(out)[0])
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let abs = (analytic[i] - numeric).abs();
            let rel = abs / analytic[i].abs().max(numeric.abs()).max(1e-6);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Like [`grad_check`] but perturbs named entries of a parameter store.
/// `build` runs a training-mode forward pass in the given context and
/// returns the scalar output; batch-norm running statistics are left alone.
pub fn grad_check_params<F>(store: &ParamStore, names: &[String], eps: f64, max_entries: usize, build: F) -> Result<GradReport>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::new(s, true);
        let out = build(&mut ctx)?;
        Ok(ctx.g.data(out)[0])
    };

    let mut grads = store.clone();
    grads.zero_grad();
    let mut ctx = Ctx::new(store, true);
    let out = build(&mut ctx)?;
    let (mut g, _) = ctx.finish();
    g.backward(out)?;
    g.accumulate_param_grads(&mut grads)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut work = store.clone();
    for name in names {
        let t = grads.get(name)?;
        let n = t.numel();
        let analytic = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let abs = (analytic[i] - numeric).abs();
            let rel = abs / analytic[i].abs().max(numeric.abs()).max(1e-6);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
