//! Central finite-difference check of tape gradients.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{precision, Precision};

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params.iter().filter(|p| p.max_rel_err > self.tol)
    }
}

/// `|a − n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the reverse-mode gradient of the scalar program `f` with
/// central differences of step `h` for every entry of every parameter.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if precision() != Precision::F64 {
        return Err(Error::Contract("gradient checks require 64-bit mode".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = f(&mut tape, &bound)?;
    let mut grads = tape.backward(loss)?;
    let analytic = params.collect_grads(&bound, &mut grads);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let loss = f(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };

    let mut work = params.clone();
    let mut reports = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let ga = analytic.require(name)?.data().to_vec();
        let base = tensor.data().to_vec();
        let mut worst = (0.0, 0);
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            work.set_data(name, plus)?;
            let fp = eval(&work)?;
            let mut minus = base.clone();
            minus[i] -= h;
            work.set_data(name, minus)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(ga[i], numeric);
            if err > worst.0 {
                worst = (err, i);
            }
        }
        work.set_data(name, base)?;
        reports.push(ParamReport {
            name: name.to_string(),
            max_rel_err: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport { params: reports, tol })
}
