//! Conformance checks of a dynamic operator against the consistency axioms,
//! the `E^mu` domination bounds and the mixing identity.
//!
//! On the lattice every identity is checked at every node and the violation
//! is the worst pointwise excess. On an ensemble the violation is the
//! aggregate (mean) excess compared against a multiple of its standard error;
//! the worst pointwise excess is reported alongside.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use super::operator::DynamicOperator;
use crate::bsde::solve_from;
use crate::condexp::{Backend, BackendKind, StepValues};
use crate::error::{Error, Result};
use crate::generators::Generator;
use crate::local::LocalClaim;
use crate::rbsde::Obstacle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AxiomId {
    D1,
    D2,
    D3,
    D4,
    H1,
    H2,
    Sandwich,
    Mix,
}

impl AxiomId {
    pub const ALL: [AxiomId; 8] = [
        AxiomId::D1,
        AxiomId::D2,
        AxiomId::D3,
        AxiomId::D4,
        AxiomId::H1,
        AxiomId::H2,
        AxiomId::Sandwich,
        AxiomId::Mix,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AxiomId::D1 => "D1",
            AxiomId::D2 => "D2",
            AxiomId::D3 => "D3",
            AxiomId::D4 => "D4",
            AxiomId::H1 => "H1",
            AxiomId::H2 => "H2",
            AxiomId::Sandwich => "SANDWICH",
            AxiomId::Mix => "MIX",
        }
    }
}

impl fmt::Display for AxiomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AxiomId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = s.trim();
        AxiomId::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(id))
            .ok_or_else(|| Error::UnknownAxiom(id.to_string()))
    }
}

pub type ClaimFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type EventFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Inputs of one axiom evaluation. Claims are functions of the Brownian
/// position, read at whichever step the axiom needs (`t` for claims in
/// `L^2(F_t)`, the terminal step for `H1`, `H2`'s `X` and `SANDWICH`).
#[derive(Clone)]
pub struct AxiomTrial {
    pub r: usize,
    pub s: usize,
    pub t: usize,
    pub x: ClaimFn,
    pub y: ClaimFn,
    /// Event read at step `s` (`D4`, `MIX`) or at step `t` (the `D1` perturbation).
    pub event: EventFn,
    /// `C~` for `D4`; must dominate the floor bound.
    pub constant: f64,
    /// Size of the upward perturbation in the `D1` strictness test.
    pub bump: f64,
}

impl fmt::Debug for AxiomTrial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AxiomTrial")
            .field("r", &self.r)
            .field("s", &self.s)
            .field("t", &self.t)
            .field("constant", &self.constant)
            .field("bump", &self.bump)
            .finish_non_exhaustive()
    }
}

impl AxiomTrial {
    pub fn new(
        r: usize,
        s: usize,
        t: usize,
        x: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        y: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            r,
            s,
            t,
            x: Arc::new(x),
            y: Arc::new(y),
            event: Arc::new(|w| w[0] >= 0.0),
            constant: 1.0,
            bump: 0.5,
        }
    }

    pub fn with_event(mut self, event: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.event = Arc::new(event);
        self
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        self.constant = c;
        self
    }

    pub fn with_bump(mut self, bump: f64) -> Self {
        self.bump = bump;
        self
    }
}

/// Shared tolerance knob: absolute on the lattice, standard errors on ensembles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TolerancePolicy {
    pub lattice_abs: f64,
    pub ensemble_se: f64,
}

impl Default for TolerancePolicy {
    fn default() -> Self {
        Self {
            lattice_abs: 1e-10,
            ensemble_se: 3.0,
        }
    }
}

impl TolerancePolicy {
    /// On ensembles the rounding allowance `lattice_abs` is added so that
    /// exact identities with zero spread do not fail on the last bit.
    pub fn tolerance(&self, kind: BackendKind, se: f64) -> f64 {
        match kind {
            BackendKind::Lattice => self.lattice_abs,
            BackendKind::Ensemble => self.ensemble_se * se + self.lattice_abs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    pub axiom: AxiomId,
    pub backend: BackendKind,
    pub trial: usize,
    pub violation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub witness_step: usize,
    pub witness_index: usize,
    /// Worst pointwise excess (equals `violation` on the lattice).
    pub pointwise: f64,
}

impl AxiomReport {
    pub const CSV_HEADER: &'static str = "axiom,backend,violation,tolerance,pass,witness_step,witness_index";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{},{},{}",
            self.axiom, self.backend, self.violation, self.tolerance, self.pass, self.witness_step, self.witness_index
        )
    }
}

/// Signed excess `d` of one identity (`d <= 0` wanted for inequalities, `d = 0` for equalities).
struct Excess {
    d: StepValues,
    equality: bool,
}

impl Excess {
    fn le(lhs: &StepValues, rhs: &StepValues) -> Result<Self> {
        Ok(Self {
            d: lhs.zip_with(rhs, |a, b| a - b)?,
            equality: false,
        })
    }

    fn eq(lhs: &StepValues, rhs: &StepValues) -> Result<Self> {
        Ok(Self {
            d: lhs.zip_with(rhs, |a, b| a - b)?,
            equality: true,
        })
    }

    fn pointwise(&self) -> (f64, usize) {
        let mut worst = (0.0, 0);
        for (i, &v) in self.d.values().iter().enumerate() {
            let e = if self.equality { v.abs() } else { v.max(0.0) };
            if e > worst.0 || e.is_nan() {
                worst = (e, i);
            }
        }
        worst
    }
}

/// Fixed violation (for the strictness clause of `D1`, which has no pointwise form).
struct Flag {
    violation: f64,
    step: usize,
}

fn summarize(
    axiom: AxiomId,
    trial: usize,
    backend: &Backend,
    policy: &TolerancePolicy,
    excesses: Vec<Excess>,
    flags: Vec<Flag>,
) -> AxiomReport {
    let kind = backend.kind();
    let mut rep = AxiomReport {
        axiom,
        backend: kind,
        trial,
        violation: 0.0,
        tolerance: policy.tolerance(kind, 0.0),
        pass: true,
        witness_step: 0,
        witness_index: 0,
        pointwise: 0.0,
    };
    // worst by margin over tolerance
    let mut best_margin = f64::NEG_INFINITY;
    for ex in &excesses {
        let (pw, idx) = ex.pointwise();
        rep.pointwise = rep.pointwise.max(pw);
        let (violation, tol) = match kind {
            BackendKind::Lattice => (pw, policy.lattice_abs),
            BackendKind::Ensemble => {
                let mean = backend.expectation(&ex.d);
                let v = if ex.equality { mean.abs() } else { mean.max(0.0) };
                (v, policy.tolerance(kind, backend.standard_error(&ex.d)))
            }
        };
        let margin = if violation.is_nan() { f64::INFINITY } else { violation - tol };
        if margin > best_margin {
            best_margin = margin;
            rep.violation = violation;
            rep.tolerance = tol;
            rep.witness_step = ex.d.step();
            rep.witness_index = idx;
        }
    }
    for f in &flags {
        let tol = policy.tolerance(kind, 0.0);
        let margin = f.violation - tol;
        if margin > best_margin {
            best_margin = margin;
            rep.violation = f.violation;
            rep.tolerance = tol;
            rep.witness_step = f.step;
            rep.witness_index = 0;
        }
    }
    rep.pass = rep.violation <= rep.tolerance;
    rep
}

struct Ctx<'a> {
    op: &'a dyn DynamicOperator,
    trial: &'a AxiomTrial,
    mu: f64,
}

impl Ctx<'_> {
    fn backend(&self) -> &Backend {
        self.op.backend()
    }

    fn n(&self) -> usize {
        self.backend().steps()
    }

    fn at(&self, f: &ClaimFn, i: usize) -> StepValues {
        self.backend().map_positions(i, |w| f(w))
    }

    fn event_at(&self, i: usize) -> StepValues {
        let e = &self.trial.event;
        self.backend().map_positions(i, |w| if e(w) { 1.0 } else { 0.0 })
    }

    fn nonnegative(&self, v: &StepValues, what: &str) -> Result<()> {
        if v.min() < 0.0 {
            return Err(Error::param(format!("{what} must be nonnegative, min {}", v.min())));
        }
        Ok(())
    }

    fn above_floor(&self, v: &StepValues, what: &str) -> Result<()> {
        if let Some(s) = self.op.floor().values_at(self.backend(), v.step()) {
            if let Some((idx, (a, b))) = v.values().iter().zip(s.values()).enumerate().find(|(_, (a, b))| a < b) {
                return Err(Error::ObstacleViolation(format!(
                    "{what} is below the floor at step {}, index {idx}: {a} < {b}",
                    v.step()
                )));
            }
        }
        Ok(())
    }

    fn order(&self, r: usize, s: usize, t: usize) -> Result<()> {
        if r <= s && s <= t && t <= self.n() {
            Ok(())
        } else {
            Err(Error::param(format!("need r <= s <= t <= N, got r = {r}, s = {s}, t = {t}")))
        }
    }

    /// `E^{+-mu}_{t,T}` on terminal values.
    fn reference(&self, sign: f64, v: &StepValues, t: usize) -> Result<StepValues> {
        let gen = if sign > 0.0 {
            Generator::emu(self.mu)
        } else {
            Generator::neg_emu(self.mu)
        };
        Ok(solve_from(self.backend(), &gen, &Obstacle::none(), v, t)?.y(t).clone())
    }

    fn d1(&self) -> Result<(Vec<Excess>, Vec<Flag>)> {
        let AxiomTrial { r, s, t, .. } = *self.trial;
        self.order(r, s, t)?;
        let x = self.at(&self.trial.x, t);
        let y = self.at(&self.trial.y, t);
        let hi = x.zip_with(&y, f64::max)?;
        let lo = x.zip_with(&y, f64::min)?;
        self.above_floor(&lo, "D1 claim")?;
        let mut excesses = vec![Excess::le(&self.op.eval(s, &lo)?, &self.op.eval(s, &hi)?)?];
        excesses.push(Excess::le(&self.op.eval(r, &lo)?, &self.op.eval(r, &hi)?)?);

        // Strictness, contrapositive form: if E_{j,t}[Y] > S_j for j in r..=t, an
        // upward perturbation of Y on an event of positive mass must move E_{r,t}.
        let mut flags = Vec::new();
        let a = self.event_at(t);
        let bump = self.trial.bump;
        if bump > 0.0 && self.backend().expectation(&a) > 0.0 {
            let mut strictly_above = true;
            let mut v = hi.clone();
            for j in (r..=t).rev() {
                if j < t {
                    v = self.op.eval(j, &v)?;
                }
                if let Some(sj) = self.op.floor().values_at(self.backend(), j) {
                    strictly_above &= v.values().iter().zip(sj.values()).all(|(a, b)| a > b);
                }
            }
            if strictly_above {
                let bumped = hi.zip_with(&a, |h, e| h + bump * e)?;
                let moved = self.op.eval(r, &bumped)?.zip_with(&v, |p, q| p - q)?;
                let increase = match self.backend().kind() {
                    BackendKind::Lattice => moved.max(),
                    BackendKind::Ensemble => self.backend().expectation(&moved),
                };
                flags.push(Flag {
                    violation: if increase > 0.0 { 0.0 } else { bump },
                    step: r,
                });
            }
        }
        Ok((excesses, flags))
    }

    fn d2(&self) -> Result<Vec<Excess>> {
        let AxiomTrial { s, t, .. } = *self.trial;
        self.order(s, s, t)?;
        let y = self.at(&self.trial.x, s);
        let c = self.op.floor().upper_bound();
        if y.min() < c {
            return Err(Error::ObstacleViolation(format!(
                "D2 claim must dominate the floor bound {c}, min {}",
                y.min()
            )));
        }
        let held = LocalClaim::new(y.clone()).at_step(t)?;
        Ok(vec![Excess::eq(&self.op.eval_local(&held)?, &y)?])
    }

    fn d3(&self) -> Result<Vec<Excess>> {
        let AxiomTrial { r, s, t, .. } = *self.trial;
        self.order(r, s, t)?;
        let y = self.at(&self.trial.x, t);
        self.above_floor(&y, "D3 claim")?;
        let nested = self.op.eval(r, &self.op.eval(s, &y)?)?;
        Ok(vec![Excess::eq(&nested, &self.op.eval(r, &y)?)?])
    }

    fn d4(&self) -> Result<Vec<Excess>> {
        let AxiomTrial { s, t, constant: c, .. } = *self.trial;
        self.order(s, s, t)?;
        let bound = self.op.floor().upper_bound();
        if c < bound {
            return Err(Error::ObstacleViolation(format!(
                "D4 constant {c} does not dominate the floor bound {bound}"
            )));
        }
        let b = self.backend();
        let y = self.at(&self.trial.x, t);
        let a = self.event_at(s);
        // 1_A Y + C dominates the floor once Y + C does, since C >= bound.
        let shifted = y.map(|v| v + c);
        self.above_floor(&shifted, "D4 claim Y + C")?;
        let lhs_claim = LocalClaim::new(b.constant(s, c)).with_term(a.clone(), y.clone())?;
        let lhs = self.op.eval_local(&lhs_claim)?.map(|v| v - c);
        let inner = self.op.eval(s, &shifted)?;
        let rhs = a.zip_with(&inner, |e, v| e * (v - c))?;
        Ok(vec![Excess::eq(&lhs, &rhs)?])
    }

    fn mix(&self) -> Result<Vec<Excess>> {
        let AxiomTrial { s, t, .. } = *self.trial;
        self.order(s, s, t)?;
        let b = self.backend();
        let x = self.at(&self.trial.x, t);
        let y = self.at(&self.trial.y, t);
        self.above_floor(&x, "MIX claim X")?;
        self.above_floor(&y, "MIX claim Y")?;
        let ind = self.event_at(s);
        let claim = LocalClaim::new(b.constant(s, 0.0))
            .with_term(ind.clone(), x.clone())?
            .with_term(ind.map(|e| 1.0 - e), y.clone())?;
        let lhs = self.op.eval_local(&claim)?;
        let ex = self.op.eval(s, &x)?;
        let ey = self.op.eval(s, &y)?;
        let rhs = StepValues::new(
            b.kind(),
            s,
            (0..ind.len())
                .map(|k| if ind.get(k) == 1.0 { ex.get(k) } else { ey.get(k) })
                .collect(),
        );
        Ok(vec![Excess::eq(&lhs, &rhs)?])
    }

    /// `X` at `T` dominating the floor, `Y >= 0` at `T`.
    fn terminal_pair(&self) -> Result<(StepValues, StepValues)> {
        let n = self.n();
        if self.trial.t > n {
            return Err(Error::param(format!("t = {} beyond N = {n}", self.trial.t)));
        }
        let x = self.at(&self.trial.x, n);
        let y = self.at(&self.trial.y, n);
        self.above_floor(&x, "X")?;
        self.nonnegative(&y, "Y")?;
        Ok((x, y))
    }

    fn increment(&self, x: &StepValues, y: &StepValues) -> Result<StepValues> {
        let t = self.trial.t;
        let xy = x.zip_with(y, |a, b| a + b)?;
        self.op.eval(t, &xy)?.zip_with(&self.op.eval(t, x)?, |a, b| a - b)
    }

    fn h1(&self) -> Result<Vec<Excess>> {
        let (x, y) = self.terminal_pair()?;
        let inc = self.increment(&x, &y)?;
        Ok(vec![Excess::le(&inc, &self.reference(1.0, &y, self.trial.t)?)?])
    }

    fn sandwich(&self) -> Result<Vec<Excess>> {
        let (x, y) = self.terminal_pair()?;
        self.nonnegative(&x, "X")?;
        let inc = self.increment(&x, &y)?;
        let t = self.trial.t;
        Ok(vec![
            Excess::le(&self.reference(-1.0, &y, t)?, &inc)?,
            Excess::le(&inc, &self.reference(1.0, &y, t)?)?,
        ])
    }

    fn h2(&self) -> Result<Vec<Excess>> {
        let t = self.trial.t;
        let n = self.n();
        if t > n {
            return Err(Error::param(format!("t = {t} beyond N = {n}")));
        }
        let b = self.backend();
        let x = self.at(&self.trial.x, n);
        self.above_floor(&x, "X")?;
        let y = self.at(&self.trial.y, t);
        self.nonnegative(&y, "Y")?;
        let claim = LocalClaim::new(y.clone()).with_term(b.constant(t, 1.0), x.clone())?;
        let lhs = self.op.eval_local(&claim)?;
        let ex = self.op.eval(t, &x)?;
        let rhs = ex.zip_with(&y, |a, b| a + b)?;
        let mut out = vec![Excess::le(&lhs, &rhs)?];

        // Equality half when E_{j,T}[X] stays strictly above the floor for j in t..=N.
        let mut strictly_above = true;
        let mut v = x.clone();
        for j in (t..=n).rev() {
            if j < n {
                v = self.op.eval(j, &v)?;
            }
            if let Some(sj) = self.op.floor().values_at(b, j) {
                strictly_above &= v.values().iter().zip(sj.values()).all(|(a, b)| a > b);
            }
        }
        if strictly_above {
            out.push(Excess::eq(&lhs, &rhs)?);
        }
        Ok(out)
    }
}

/// Evaluates one axiom on one trial.
pub fn check_trial(
    op: &dyn DynamicOperator,
    axiom: AxiomId,
    trial: &AxiomTrial,
    index: usize,
    mu: f64,
    policy: &TolerancePolicy,
) -> Result<AxiomReport> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::param(format!("mu must be >= 0, got {mu}")));
    }
    let ctx = Ctx { op, trial, mu };
    let (excesses, flags) = match axiom {
        AxiomId::D1 => ctx.d1()?,
        AxiomId::D2 => (ctx.d2()?, vec![]),
        AxiomId::D3 => (ctx.d3()?, vec![]),
        AxiomId::D4 => (ctx.d4()?, vec![]),
        AxiomId::H1 => (ctx.h1()?, vec![]),
        AxiomId::H2 => (ctx.h2()?, vec![]),
        AxiomId::Sandwich => (ctx.sandwich()?, vec![]),
        AxiomId::Mix => (ctx.mix()?, vec![]),
    };
    Ok(summarize(axiom, index, op.backend(), policy, excesses, flags))
}

/// One report per trial, in trial order; trials run in parallel.
pub fn check_axiom(
    op: &dyn DynamicOperator,
    axiom: AxiomId,
    trials: &[AxiomTrial],
    mu: f64,
    policy: &TolerancePolicy,
) -> Result<Vec<AxiomReport>> {
    trials
        .par_iter()
        .enumerate()
        .map(|(k, trial)| check_trial(op, axiom, trial, k, mu, policy))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RepresentationReport {
    pub axioms: Vec<AxiomReport>,
    /// Per trial: `max |reflected - unreflected|` when the unreflected solution
    /// stays strictly above the floor, `None` otherwise.
    pub above_floor: Vec<Option<f64>>,
    pub pass: bool,
}

/// Round trip for an operator built from `(gen, floor)`: every axiom must hold
/// with the declared `mu`, and wherever the plain solve of a trial's `X`
/// stays strictly above the floor the reflected solve must coincide with it.
pub fn representation_check(
    op: &super::operator::RbsdeOperator,
    trials: &[AxiomTrial],
    mu: f64,
    policy: &TolerancePolicy,
) -> Result<RepresentationReport> {
    let gen = op.generator();
    if !gen.is_z_only() {
        return Err(Error::Generator(format!(
            "representation needs a y-independent driver with g(t, 0) = 0, got {}",
            gen.label()
        )));
    }
    if gen.meta().lip_z > mu {
        return Err(Error::param(format!(
            "declared z-Lipschitz constant {} exceeds mu = {mu}",
            gen.meta().lip_z
        )));
    }
    let c = op.floor().upper_bound();
    if !op.floor().is_none() && !c.is_finite() {
        return Err(Error::param("floor must be bounded above"));
    }
    let mut axioms = Vec::new();
    for id in [AxiomId::D1, AxiomId::D2, AxiomId::D3, AxiomId::D4, AxiomId::H1, AxiomId::H2] {
        axioms.extend(check_axiom(op, id, trials, mu, policy)?);
    }
    let b = op.backend();
    let n = b.steps();
    let none = Obstacle::none();
    let mut above_floor = Vec::with_capacity(trials.len());
    let mut agree = true;
    for trial in trials {
        let x = b.map_positions(n, |w| (trial.x)(w));
        let plain = solve_from(b, gen, &none, &x, 0)?;
        let strictly = (0..=n).all(|i| match op.floor().values_at(b, i) {
            None => true,
            Some(s) => plain.y(i).values().iter().zip(s.values()).all(|(a, b)| a > b),
        });
        if strictly {
            let refl = solve_from(b, gen, op.floor(), &x, 0)?;
            let mut worst = 0.0f64;
            for i in 0..=n {
                worst = worst.max(refl.y(i).max_abs_diff(plain.y(i))?);
            }
            agree &= worst <= policy.tolerance(b.kind(), 0.0);
            above_floor.push(Some(worst));
        } else {
            above_floor.push(None);
        }
    }
    let pass = agree && axioms.iter().all(|r| r.pass);
    Ok(RepresentationReport {
        axioms,
        above_floor,
        pass,
    })
}
