//! Central-difference gradient oracle.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over every entry.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::invalid("gradient check needs a scalar function"));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("gradient-check objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h` for every entry of every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    grad_check_subset(store, h, |_| true, f)
}

/// As [`grad_check`], restricted to parameters whose name passes `select`.
pub fn grad_check_subset<S, F>(store: &ParamStore, h: f64, select: S, f: F) -> Result<GradCheckReport>
where
    S: Fn(&str) -> bool,
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::invalid(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    if !g.value(out).data()[0].is_finite() {
        return Err(Error::NonFinite("gradient-check objective".into()));
    }
    g.backward(out)?;
    let analytic = g.param_grads();

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    for (id, param) in store.iter() {
        if !select(&param.name) {
            continue;
        }
        let grad = analytic.iter().find(|(pid, _)| *pid == id).map(|(_, g)| g.as_slice());
        for i in 0..param.tensor.len() {
            let orig = param.tensor.data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let plus = evaluate(&probe, &f)?;
            probe.value_mut(id).data_mut()[i] = orig - h;
            let minus = evaluate(&probe, &f)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = param.name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
