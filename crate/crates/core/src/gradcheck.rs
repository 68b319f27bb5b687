//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Fault, NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
    /// (analytic, numeric) at the entry with the largest relative error.
    pub worst: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new(params);
    let out = f(&mut tape)?;
    tape.value(out)
        .item()
        .ok_or_else(|| Error::shape("finite_difference_check", "function must return a scalar"))
}

/// Compares the tape gradient of `f` with central differences
/// `(f(θ+εe) − f(θ−εe)) / 2ε` for every scalar of every parameter.
///
/// `f` builds its graph on the tape it is handed and returns the scalar loss
/// node. `fault`, when set, corrupts one backward rule of the analytic pass.
pub fn finite_difference_check<F>(
    f: F,
    params: &mut ParamStore,
    eps: f64,
    tol: f64,
    fault: Option<Fault>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Invalid(format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    let base = evaluate(&f, params)?;
    let again = evaluate(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Invalid(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let analytic = {
        let mut tape = Tape::with_fault(params, fault);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(ids.len()),
        tol,
    };
    for id in ids {
        let n = params.get(id).value.len();
        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            entries: n,
            worst: (0.0, 0.0),
        };
        for i in 0..n {
            let orig = params.get(id).value.data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = evaluate(&f, params);
            params.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = evaluate(&f, params);
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = (a, numeric);
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
