use crate::bsde::{solve_from, TerminalClaim};
use crate::condexp::{Backend, StepValues};
use crate::error::{Error, Result};
use crate::generators::Generator;
use crate::local::LocalClaim;
use crate::rbsde::Obstacle;

/// A family `E_{s,t}` mapping claims measurable at step `t` to values at step `s`.
pub trait DynamicOperator: Send + Sync {
    fn backend(&self) -> &Backend;

    fn floor(&self) -> &Obstacle;

    fn label(&self) -> String;

    /// `E_{s,t}[claim]` with `claim.step() == t`.
    fn eval(&self, s: usize, claim: &StepValues) -> Result<StepValues>;

    /// Evaluates a claim whose coefficients are fixed at its root step.
    fn eval_local(&self, claim: &LocalClaim) -> Result<StepValues> {
        let s = claim.root_step();
        claim.evaluate_with(self.backend(), |v| self.eval(s, v))
    }
}

/// The operator of a reflected BSDE: a restarted backward solve from `t` to `s`.
#[derive(Debug, Clone)]
pub struct RbsdeOperator {
    backend: Backend,
    gen: Generator,
    floor: Obstacle,
}

impl RbsdeOperator {
    pub fn new(backend: Backend, gen: Generator, floor: Obstacle) -> Self {
        Self { backend, gen, floor }
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    /// `E_{s,T}[xi]`.
    pub fn eval_terminal(&self, s: usize, xi: &TerminalClaim) -> Result<StepValues> {
        self.eval(s, &xi.values(&self.backend)?)
    }
}

impl DynamicOperator for RbsdeOperator {
    fn backend(&self) -> &Backend {
        &self.backend
    }

    fn floor(&self) -> &Obstacle {
        &self.floor
    }

    fn label(&self) -> String {
        format!("rbsde[{}; floor {}]", self.gen.label(), self.floor.label())
    }

    fn eval(&self, s: usize, claim: &StepValues) -> Result<StepValues> {
        let sol = solve_from(&self.backend, &self.gen, &self.floor, claim, s)?;
        Ok(sol.y(s).clone())
    }
}

/// `E^zeta_{s,t}[X] = E_{s,T}[X + zeta] - E_{s,T}[zeta]` for a nonnegative `zeta` at `T`.
///
/// `E_{s,T}[X + zeta]` is evaluated as `E_{s,t}[E_{t,T}[X + zeta]]`, with `X`
/// held fixed from step `t`.
pub struct ZetaShifted<'a> {
    base: &'a dyn DynamicOperator,
    zeta: StepValues,
}

impl<'a> ZetaShifted<'a> {
    pub fn zeta(&self) -> &StepValues {
        &self.zeta
    }
}

pub fn zeta_shift<'a>(op: &'a dyn DynamicOperator, zeta: &TerminalClaim) -> Result<ZetaShifted<'a>> {
    let values = zeta.values(op.backend())?;
    if values.min() < 0.0 {
        return Err(Error::param(format!("zeta must be nonnegative, {} takes {}", zeta.label(), values.min())));
    }
    Ok(ZetaShifted { base: op, zeta: values })
}

impl DynamicOperator for ZetaShifted<'_> {
    fn backend(&self) -> &Backend {
        self.base.backend()
    }

    fn floor(&self) -> &Obstacle {
        self.base.floor()
    }

    fn label(&self) -> String {
        format!("zeta-shift[{}]", self.base.label())
    }

    fn eval(&self, s: usize, claim: &StepValues) -> Result<StepValues> {
        let t = claim.step();
        let backend = self.backend();
        let joint = LocalClaim::new(claim.clone()).with_term(backend.constant(t, 1.0), self.zeta.clone())?;
        let at_t = self.base.eval_local(&joint)?;
        let plus = self.base.eval(s, &at_t)?;
        let minus = self.base.eval(s, &self.zeta)?;
        plus.zip_with(&minus, |a, b| a - b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{build_lattice, TimeGrid};

    fn op(gen: Generator, floor: Obstacle) -> RbsdeOperator {
        let b = Backend::Lattice(build_lattice(TimeGrid::new(1.0, 6).unwrap()).unwrap());
        RbsdeOperator::new(b, gen, floor)
    }

    #[test]
    fn identity_on_the_same_step() {
        let o = op(Generator::emu(1.0), Obstacle::constant(0.0));
        let y = o.backend().map_positions(4, |w| w[0].abs());
        assert_eq!(o.eval(4, &y).unwrap(), y);
    }

    #[test]
    fn zeta_zero_and_linear_driver_cancel() {
        let o = op(Generator::emu(1.0), Obstacle::constant(0.0));
        let z0 = zeta_shift(&o, &TerminalClaim::constant(0.0)).unwrap();
        let x = o.backend().map_positions(4, |w| w[0] * w[0]);
        assert!(z0.eval(1, &x).unwrap().max_abs_diff(&o.eval(1, &x).unwrap()).unwrap() < 1e-14);

        let lin = op(Generator::zero(), Obstacle::constant(0.0));
        let zl = zeta_shift(&lin, &TerminalClaim::brownian_squared()).unwrap();
        assert!(zl.eval(1, &x).unwrap().max_abs_diff(&lin.eval(1, &x).unwrap()).unwrap() < 1e-13);

        assert!(zeta_shift(&o, &TerminalClaim::brownian()).is_err());
    }
}
