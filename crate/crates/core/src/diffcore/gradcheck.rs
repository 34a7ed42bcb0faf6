//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Location and values of the worst disagreement found.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Discrepancy {
    pub leaf: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Discrepancy>,
    pub elements_checked: usize,
    /// Set when the function or a gradient produced NaN or infinity anywhere.
    pub non_finite: bool,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, leaves: &[Array]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of `f` at `leaves` with central differences.
///
/// `f` is rebuilt on a fresh tape for every perturbation, so it must be a
/// pure function of the leaf values.
pub fn grad_check<F>(f: F, leaves: &[Array], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Usage(format!("finite-difference step must be > 0, got {step}")));
    }
    let (tape, vars, out) = evaluate(&f, leaves)?;
    let mut non_finite = !tape.value(out).item().is_finite();
    let grads = tape.backward(out)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements_checked: 0,
        non_finite: false,
        tolerance,
        step,
    };

    let mut probe = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Array::zeros(leaves[li].shape()));
        non_finite |= !analytic.is_finite();
        for e in 0..leaves[li].len() {
            let x0 = leaves[li].data()[e];
            probe[li].data_mut()[e] = x0 + step;
            let plus = scalar_value(&f, &probe)?;
            probe[li].data_mut()[e] = x0 - step;
            let minus = scalar_value(&f, &probe)?;
            probe[li].data_mut()[e] = x0;

            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                non_finite = true;
            }
            let a = analytic.data()[e];
            let rel = relative_error(a, numeric);
            report.elements_checked += 1;
            if rel > report.max_rel_error || (rel.is_nan() && report.worst.is_none()) {
                report.max_rel_error = rel;
                report.worst = Some(Discrepancy {
                    leaf: li,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report.non_finite = non_finite;
    Ok(report)
}

fn scalar_value<F>(f: &F, leaves: &[Array]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, leaves)?;
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_function_gives_exact_zero() {
        let x = Array::vector(vec![0.3, -0.7]);
        let report = grad_check(
            |t, v| {
                let z = t.scale(v[0], 0.0);
                Ok(t.sum(z))
            },
            &[x],
            1e-6,
            1e-7,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn rejects_bad_step() {
        let x = Array::vector(vec![1.0]);
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[x.clone()], 0.0, 1e-5).is_err());
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[x], f64::NAN, 1e-5).is_err());
    }

    #[test]
    fn non_finite_values_are_flagged() {
        // an infinite scale makes the value and every gradient non-finite
        let x = Array::vector(vec![1.0]);
        let report = grad_check(
            |t, v| {
                let z = t.scale(v[0], f64::INFINITY);
                Ok(t.sum(z))
            },
            &[x],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.non_finite);
        assert!(!report.passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
