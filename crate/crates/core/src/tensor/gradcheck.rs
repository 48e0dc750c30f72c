//! Central finite-difference verification of autodiff gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Graph, Var};
use crate::params::ParamStore;
use crate::{Error, Real, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: Real,
    /// Pass threshold on the relative error.
    pub tol: Real,
    /// Lower bound of the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: Real,
    /// Check at most this many entries per parameter (evenly spaced).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-3,
            floor: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: Real,
    pub max_abs_error: Real,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: Real,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> Real {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, Real::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn relative_error(analytic: Real, numeric: Real, floor: Real) -> Real {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<Real>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the autodiff gradient of the scalar built by `f` against central
/// differences for every parameter in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(params);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let name = params.name(id).to_string();
        let n = params.tensor(id).len();
        if !params.tensor(id).is_finite() {
            return Err(Error::NonFinite(name));
        }
        let analytic = grads.param(id);
        let stride = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let (mut max_rel, mut max_abs, mut checked) = (0.0 as Real, 0.0 as Real, 0);
        for i in (0..n).step_by(stride) {
            let orig = params.tensor(id).data()[i];
            work.tensor_mut(id).data_mut()[i] = orig + opts.step;
            let plus = evaluate(&f, &work)?;
            work.tensor_mut(id).data_mut()[i] = orig - opts.step;
            let minus = evaluate(&f, &work)?;
            work.tensor_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(name));
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            if !a.is_finite() {
                return Err(Error::NonFinite(name));
            }
            max_rel = max_rel.max(relative_error(a, numeric, opts.floor));
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
        report.push(ParamCheck {
            name,
            checked,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        params: report,
        tol: opts.tol,
    })
}
