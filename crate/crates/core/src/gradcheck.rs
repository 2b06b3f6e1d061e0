//! Central-difference gradient oracle.

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::model::{ParamStore, ParamVars};
use crate::scalar::Scalar;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest absolute difference over all coordinates.
    pub max_abs_error: f64,
    /// Largest analytic gradient magnitude.
    pub grad_inf_norm: f64,
    /// Block and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// For every trainable scalar `k` the relative error is
/// `|analytic - (f(θ + h e_k) - f(θ - h e_k)) / 2h| / (|analytic| + 1e-12)`;
/// the maximum over all coordinates is reported.
pub fn finite_diff_check<T, F>(f: F, params: &ParamStore<T>, h: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamVars) -> Result<Var>,
{
    if h <= T::zero() {
        bail!(Domain, "finite difference step must be positive");
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let loss = f(&mut tape, &vars)?;
    check_finite(tape.value(loss).item()?)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &ParamStore<T>| -> Result<T> {
        let mut tape = Tape::new();
        let vars = p.register_frozen(&mut tape);
        let v = f(&mut tape, &vars)?;
        let v = tape.value(v).item()?;
        check_finite(v)?;
        Ok(v)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, grad_inf_norm: 0.0, worst: None, analytic: 0.0, numeric: 0.0, coordinates: 0 };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let Some(analytic) = grads.get(&name) else { continue };
        for i in 0..analytic.len() {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = ((up - down) / (h + h)).to_f64_lossy();
            let a = analytic[i].to_f64_lossy();
            let rel = (a - numeric).abs() / (a.abs() + 1e-12);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.grad_inf_norm = report.grad_inf_norm.max(a.abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

impl GradCheckReport {
    /// Worst absolute discrepancy over the largest gradient entry (floored
    /// at one), meaningful even where individual gradients are near zero.
    pub fn norm_relative_error(&self) -> f64 {
        self.max_abs_error / self.grad_inf_norm.max(1.0)
    }
}

fn check_finite<T: Scalar>(v: T) -> Result<()> {
    if !v.is_finite() {
        bail!(Numeric, "objective evaluated to {v}");
    }
    Ok(())
}
