//! Extension of a zero-floor operator to claims that may be negative, through
//! truncation and shift: `Y_n = E_{t,T}[X 1{X >= -n} + n] - n`.

use super::operator::DynamicOperator;
use crate::condexp::StepValues;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ExtensionReport {
    pub schedule: Vec<f64>,
    /// `Y_n` at step `t`, one per schedule entry.
    pub values: Vec<StepValues>,
    /// `||Y_{n_k} - Y_{n_{k-1}}||_2`, `k >= 1`.
    pub differences: Vec<f64>,
    /// `exp(mu^2 (T - t) / 2) ||X 1{-n_k <= X < -n_{k-1}}||_2`.
    pub bounds: Vec<f64>,
    pub pass: bool,
}

impl ExtensionReport {
    /// The last element of the sequence: the extended operator applied to `X`.
    pub fn limit(&self) -> &StepValues {
        self.values.last().expect("non-empty schedule")
    }
}

/// Rounding allowance when comparing differences with their bounds.
pub const EXTENSION_ABS_SLACK: f64 = 1e-12;

/// Runs the truncation sequence for the terminal claim `x` (values at step `N`).
///
/// `op` must have a floor bounded above by zero so that `X_n + n >= 0` is an
/// admissible argument. `mu` is the domination constant entering the bound.
pub fn extend_operator(
    op: &dyn DynamicOperator,
    x: &StepValues,
    t: usize,
    schedule: &[f64],
    mu: f64,
) -> Result<ExtensionReport> {
    let backend = op.backend();
    let n_steps = backend.steps();
    if x.step() != n_steps || x.len() != backend.len_at(n_steps) {
        return Err(Error::Backend("claim must be given at the terminal step".into()));
    }
    if t > n_steps {
        return Err(Error::param(format!("t = {t} beyond N = {n_steps}")));
    }
    if !op.floor().is_none() && op.floor().upper_bound() > 0.0 {
        return Err(Error::param("extension needs an operator with a floor bounded by 0"));
    }
    if schedule.is_empty() {
        return Err(Error::param("empty truncation schedule"));
    }
    if schedule.iter().any(|n| !(n.is_finite() && *n >= 0.0)) || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param(format!("schedule must be increasing and nonnegative, got {schedule:?}")));
    }
    if !backend.expectation(&x.map(|v| v * v)).is_finite() {
        return Err(Error::param("claim is not square integrable"));
    }

    let mut values = Vec::with_capacity(schedule.len());
    for &n in schedule {
        let shifted = x.map(|v| if v >= -n { v + n } else { n });
        // X_n + n with X_n = X 1{X >= -n}; nonnegative by construction
        let y = op.eval(t, &shifted)?.map(|v| v - n);
        values.push(y);
    }

    let factor = (0.5 * mu * mu * backend.grid().remaining(t)).exp();
    let mut differences = Vec::new();
    let mut bounds = Vec::new();
    let mut pass = true;
    for k in 1..schedule.len() {
        let (lo, hi) = (schedule[k - 1], schedule[k]);
        let diff = values[k].zip_with(&values[k - 1], |a, b| a - b)?;
        let d = backend.l2_norm(&diff);
        let tail = x.map(|v| if v >= -hi && v < -lo { v } else { 0.0 });
        let bound = factor * backend.l2_norm(&tail);
        pass &= d <= bound + EXTENSION_ABS_SLACK;
        differences.push(d);
        bounds.push(bound);
    }
    Ok(ExtensionReport {
        schedule: schedule.to_vec(),
        values,
        differences,
        bounds,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condexp::Backend;
    use crate::generators::Generator;
    use crate::lab::operator::RbsdeOperator;
    use crate::paths::{build_lattice, TimeGrid};
    use crate::rbsde::Obstacle;

    fn op() -> RbsdeOperator {
        let b = Backend::Lattice(build_lattice(TimeGrid::new(1.0, 8).unwrap()).unwrap());
        RbsdeOperator::new(b, Generator::emu(1.0), Obstacle::constant(0.0))
    }

    #[test]
    fn nonnegative_claims_are_untouched() {
        let o = op();
        let x = o.backend().map_positions(8, |w| w[0].abs());
        let rep = extend_operator(&o, &x, 2, &[0.0, 1.0, 4.0], 1.0).unwrap();
        let direct = o.eval(2, &x).unwrap();
        for v in &rep.values {
            assert!(v.max_abs_diff(&direct).unwrap() < 1e-12);
        }
        assert!(rep.pass);
    }

    #[test]
    fn negative_constant_is_recovered() {
        let o = op();
        let x = o.backend().constant(8, -1.5);
        let rep = extend_operator(&o, &x, 3, &[2.0, 3.0], 1.0).unwrap();
        for v in &rep.values {
            assert!(v.values().iter().all(|y| (y + 1.5).abs() < 1e-14));
        }
    }

    #[test]
    fn schedule_must_increase() {
        let o = op();
        let x = o.backend().constant(8, 1.0);
        assert!(extend_operator(&o, &x, 0, &[2.0, 1.0], 1.0).is_err());
        assert!(extend_operator(&o, &x, 0, &[], 1.0).is_err());
    }
}
