//! Central finite-difference verification of reverse-mode gradients.

use super::params::{Gradients, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter and flat coordinate where `max_rel_err` occurred.
    pub worst: Option<(ParamId, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Denominator floor of [`relative_error`]. Central differences at `h = 1e-5`
/// carry roughly `1e-11` of absolute round-off, which would dominate the ratio
/// for coordinates whose true gradient is near zero.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Reverse-mode gradients of `f`, checked coordinatewise against central differences.
pub fn finite_diff_check<F>(params: &ParamStore, h: f64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    let analytic = tape.backward(loss)?;
    check_against(&analytic, params, h, tolerance, f)
}

/// Compares a supplied gradient (possibly wrong) against central differences of `f`.
pub fn check_against<F>(
    analytic: &Gradients,
    params: &ParamStore,
    h: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("step must be positive, got {h}")));
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(p);
        let v = f(&mut tape)?;
        let out = tape.value(v);
        if out.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: out.shape().to_vec(),
            });
        }
        let x = out.data()[0];
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference objective".into(),
            });
        }
        Ok(x)
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
        tolerance,
    };
    for id in params.ids() {
        for i in 0..params.get(id).numel() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.get(id).data()[i], numeric);
            report.coordinates += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((id, i));
            }
        }
    }
    Ok(report)
}
