//! Central finite-difference gradient checking.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Denominator floor for the relative error, so that near-zero gradients are
/// judged on absolute agreement.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_rel_err < self.tolerance
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare tape gradients of `f` against central differences with step `h`
/// for every parameter element (or at most `max_per_param` evenly spaced
/// elements of each parameter).
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    f: F,
    h: f64,
    tolerance: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(store, true);
        let loss = f(&mut tape)?;
        if !tape.value(loss).is_finite() {
            return Ok(GradCheckReport { entries: vec![], max_rel_err: f64::INFINITY, tolerance, non_finite: true });
        }
        tape.backward(loss)?.into_param_grads()
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(s, false);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut work = store.clone();
    let mut entries = Vec::new();
    let mut non_finite = false;
    for id in store.ids() {
        let n = store.get(id).numel();
        let picks: Vec<usize> = match max_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let orig = store.get(id).data()[idx];
            work.get_mut(id).data_mut()[idx] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[idx] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic_at(&analytic, id, idx);
            if !numeric.is_finite() || !a.is_finite() {
                non_finite = true;
            }
            entries.push(GradEntry {
                param: store.name(id).to_string(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric),
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Contract("grad_check: nothing to check".into()));
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_err, tolerance, non_finite })
}

fn analytic_at(grads: &[Option<crate::tensor::Tensor<f64>>], id: ParamId, idx: usize) -> f64 {
    grads[id.0].as_ref().map_or(0.0, |g| g.data()[idx])
}
