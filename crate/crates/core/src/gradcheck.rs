//! Central-difference gradient verification.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Denominator floor for relative errors, so that near-zero gradients are
/// judged on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub elements: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<T, F>(store: &ParamStore<T>, f: &F) -> Result<T>
where
    T: Scalar,
    F: for<'a> Fn(&mut Graph<'a, T>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let l = g.no_grad(|g| f(g))?;
    let v = g.value(l);
    if v.len() != 1 {
        return Err(Error::Contract(format!("grad_check function returned shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares backpropagated parameter gradients of the scalar function `f`
/// against central differences with step `step`. Every element of every
/// parameter in `store` is probed.
pub fn grad_check<T, F>(store: &ParamStore<T>, f: F, step: T, tolerance: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'a> Fn(&mut Graph<'a, T>) -> Result<Var>,
{
    let mut report = GradCheckReport { tolerance, params: Vec::new() };
    if store.is_empty() {
        return Ok(report);
    }
    let (base, analytic) = {
        let mut g = Graph::with_params(store);
        let l = f(&mut g)?;
        let base = g.value(l).item();
        (base, g.backward(l)?.into_params())
    };
    let again = eval(store, &f)?;
    if base != again && !(base.is_nan() && again.is_nan()) {
        return Err(Error::Contract(format!(
            "grad_check aborted: function is not deterministic ({base} vs {again})"
        )));
    }
    let two_h = step + step;
    let mut probe = store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        let grad = analytic.iter().find(|(pid, _)| *pid == id).map(|(_, t)| t);
        let n = store.get(id).len();
        let mut check = ParamCheck { name: store.name(id).to_string(), max_rel_err: 0.0, max_abs_err: 0.0, elements: n };
        for i in 0..n {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&probe, &f)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&probe, &f)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = ((plus - minus) / two_h).as_f64();
            let a = grad.map_or(0.0, |t| t.data()[i].as_f64());
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        report.params.push(check);
    }
    Ok(report)
}
