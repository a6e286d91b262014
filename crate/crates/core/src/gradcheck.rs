//! Central-difference gradient checking.
//!
//! Straight-through decisions made on the analytic pass are recorded and
//! replayed for every perturbed evaluation, so discrete choices stay fixed and
//! the numeric derivative measures the relaxed path that backward claims to
//! differentiate.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst component.
    pub worst: Option<(usize, usize)>,
    /// Set when an evaluation produced a non-finite value.
    pub failure: Option<String>,
}

/// `|a - b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences with step `h` for every component of every input.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item().ok_or_else(|| {
        Error::NotScalar(tape.value(out).shape().to_vec())
    })?;
    if !base.is_finite() {
        return Ok(failed("non-finite output at the unperturbed point".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let decisions = tape.take_decisions();

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::replaying(decisions.clone());
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[idx] += delta;
                }
                tape.leaf(t, true)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().unwrap_or(f64::NAN))
    };

    let mut max_rel = 0.0;
    let mut worst = None;
    for (which, (input, grad)) in inputs.iter().zip(&analytic).enumerate() {
        for idx in 0..input.numel() {
            let plus = eval(which, idx, h)?;
            let minus = eval(which, idx, -h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[idx];
            if !numeric.is_finite() || !a.is_finite() {
                return Ok(failed(format!(
                    "non-finite gradient at input {which}, index {idx}"
                )));
            }
            let err = relative_error(a, numeric);
            if err > max_rel || worst.is_none() {
                max_rel = err;
                worst = Some((which, idx));
            }
        }
    }
    Ok(GradCheckReport {
        passed: max_rel < tol,
        max_rel_error: max_rel,
        worst,
        failure: None,
    })
}

fn failed(msg: String) -> GradCheckReport {
    GradCheckReport {
        passed: false,
        max_rel_error: f64::INFINITY,
        worst: None,
        failure: Some(msg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let report = gradient_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(3.0))),
            &[Tensor::row(&[1.0, 2.0])],
            1e-6,
            1e-9,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at the kink: central difference sees slope ~0.5, backward reports 1.
        let report = gradient_check(
            |tape, v| {
                let r = tape.relu(v[0])?;
                tape.sum(r)
            },
            &[Tensor::row(&[1e-9])],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn flags_non_finite() {
        let report = gradient_check(
            |tape, v| {
                let l = tape.log(v[0])?;
                tape.sum(l)
            },
            &[Tensor::row(&[1e-7])],
            1e-6,
            1e-4,
        );
        // ln(1e-7 - 1e-6) is NaN; debug builds reject it as an error, release
        // builds report a failed check.
        match report {
            Ok(r) => assert!(!r.passed),
            Err(e) => assert!(matches!(e, Error::NonFinite { .. })),
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-3, 2e-3), 1e-3);
        assert_eq!(relative_error(100.0, 101.0), 1.0 / 101.0);
    }
}
