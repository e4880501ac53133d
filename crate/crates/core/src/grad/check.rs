//! Finite-difference verification of analytic gradients.
//!
//! Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate,
//! compared against the analytic gradient with relative error normalized
//! by `max(|analytic|, |numeric|, 1e-8)`. This is the universal oracle for
//! every loss and layer gradient in the crate.

use crate::grad::{GradError, Node, Tape};
use crate::volume::Volume;

/// Recommended step for unit-scale f64 inputs.
pub const DEFAULT_STEP: f64 = 1e-5;

const REL_FLOOR: f64 = 1e-8;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckReport {
    /// Largest relative error over all coordinates.
    pub max_rel_err: f64,
    /// Flat coordinate where the largest error occurred.
    pub worst_coord: usize,
    /// Analytic derivative at the worst coordinate.
    pub analytic_at_worst: f64,
    /// Numeric derivative at the worst coordinate.
    pub numeric_at_worst: f64,
    /// True when `f` produced a non-finite value or failed to evaluate.
    pub non_finite: bool,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_err < tol
    }
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// Evaluation failures and non-finite values of `f` are reported as check
/// failure rather than an error.
pub fn finite_diff_check<F>(f: F, x: &Volume, analytic: &Volume, step: f64) -> CheckReport
where
    F: Fn(&Volume) -> Result<f64, GradError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(
        analytic.shape(),
        x.shape(),
        "analytic gradient shape must match input"
    );
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        non_finite: false,
    };
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let original = data[i];
        data[i] = original + step;
        let plus = eval(&f, x.shape(), &data);
        data[i] = original - step;
        let minus = eval(&f, x.shape(), &data);
        data[i] = original;
        let (Some(plus), Some(minus)) = (plus, minus) else {
            report.non_finite = true;
            report.worst_coord = i;
            return report;
        };
        let numeric = (plus - minus) / (2.0 * step);
        let analytic_i = analytic.data()[i];
        let denom = analytic_i.abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (analytic_i - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic_at_worst = analytic_i;
            report.numeric_at_worst = numeric;
        }
    }
    report
}

fn eval<F>(f: &F, shape: &[usize], data: &[f64]) -> Option<f64>
where
    F: Fn(&Volume) -> Result<f64, GradError>,
{
    let v = Volume::new(shape.to_vec(), data.to_vec()).ok()?;
    match f(&v) {
        Ok(value) if value.is_finite() => Some(value),
        _ => None,
    }
}

/// Runs `build` once on a fresh tape to obtain the analytic gradient of a
/// scalar output w.r.t. `x`, then verifies it with [`finite_diff_check`].
pub fn check_tape_gradient<B>(build: B, x: &Volume, step: f64) -> Result<CheckReport, GradError>
where
    B: Fn(&Tape, Node) -> Result<Node, GradError>,
{
    let tape = Tape::new();
    let input = tape.input(x.clone());
    let out = build(&tape, input)?;
    tape.backward(out)?;
    let analytic = tape.grad(input)?;
    let f = |v: &Volume| -> Result<f64, GradError> {
        let tape = Tape::new();
        let input = tape.input(v.clone());
        let out = build(&tape, input)?;
        tape.value_scalar(out)
    };
    Ok(finite_diff_check(f, x, &analytic, step))
}
