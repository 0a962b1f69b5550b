//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Max relative error over every checked coordinate of every parameter.
    pub max_rel_error: f64,
    /// Max relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = 1.0f64.max(libm::fabs(analytic)).max(libm::fabs(numeric));
    libm::fabs(analytic - numeric) / denom
}

fn evaluate<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::InvalidRoot);
    }
    Ok(v.item())
}

/// Coordinates checked for a tensor of `len` entries: all of them, or
/// `limit` evenly spaced ones (always including the first and last).
fn coords(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len && k >= 2 => (0..k).map(|i| i * (len - 1) / (k - 1)).collect(),
        Some(1) if len > 1 => alloc::vec![0],
        _ => (0..len).collect(),
    }
}

/// Compares the tape gradient of `f` at `params` against central differences.
///
/// `f` receives fresh leaves for `params` and must return a scalar node. It is
/// evaluated twice at the base point first; differing results are rejected.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Tensor],
    step: f64,
    max_coords_per_param: Option<usize>,
) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(alloc::format!("finite-difference step {step} must be > 0")));
    }
    let first = evaluate(&mut f, params)?;
    let second = evaluate(&mut f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = FdReport { max_rel_error: 0.0, per_param: Vec::new(), worst: None, coords_checked: 0 };
    let mut point: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).ok_or(Error::InvalidRoot)?.data().to_vec();
        let mut worst = 0.0f64;
        for c in coords(params[pi].len(), max_coords_per_param) {
            let base = params[pi].data()[c];
            let mut bumped = params[pi].data().to_vec();
            bumped[c] = base + step;
            point[pi] = Tensor::new(params[pi].shape(), bumped.clone())?;
            let plus = evaluate(&mut f, &point)?;
            bumped[c] = base - step;
            point[pi] = Tensor::new(params[pi].shape(), bumped)?;
            let minus = evaluate(&mut f, &point)?;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[c], numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((pi, c));
                }
            }
            worst = worst.max(err);
            report.coords_checked += 1;
        }
        point[pi] = params[pi].clone();
        report.per_param.push(worst);
    }
    Ok(report)
}
