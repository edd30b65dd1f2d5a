//! Backward Euler scheme for BSDEs and the `g`-expectations it defines.
//!
//! One step, from `i + 1` to `i`:
//!
//! ```text
//! Z_i   = E[Y_{i+1} dW_i | F_i] / dt
//! Yhat  = E[Y_{i+1} | F_i]
//! Ytil  = Yhat + g(t_i, Yhat, Z_i) dt
//! Y_i   = max(Ytil, S_i),   dK_i = Y_i - Ytil
//! ```
//!
//! Without a floor the last line is the identity and `dK = 0`.

use std::fmt;
use std::sync::Arc;

use crate::condexp::{Backend, BackendKind, RegressionSpec, StepValues};
use crate::error::{Error, Result};
use crate::generators::Generator;
use crate::local::LocalClaim;
use crate::paths::PathView;
use crate::rbsde::Obstacle;

type MarkovFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type PathFn = dyn for<'a> Fn(PathView<'a>) -> f64 + Send + Sync;

#[derive(Clone)]
enum Payoff {
    Markov(Arc<MarkovFn>),
    Path(Arc<PathFn>),
}

/// Terminal value `xi`, a function of `W_T` or (ensembles only) of the whole path.
#[derive(Clone)]
pub struct TerminalClaim {
    label: String,
    payoff: Payoff,
}

impl fmt::Debug for TerminalClaim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.payoff {
            Payoff::Markov(_) => "markov",
            Payoff::Path(_) => "path",
        };
        write!(f, "TerminalClaim({}, {kind})", self.label)
    }
}

impl TerminalClaim {
    pub fn markov(label: &str, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            label: label.to_string(),
            payoff: Payoff::Markov(Arc::new(f)),
        }
    }

    pub fn path(label: &str, f: impl for<'a> Fn(PathView<'a>) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            label: label.to_string(),
            payoff: Payoff::Path(Arc::new(f)),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::markov(&format!("constant({c})"), move |_| c)
    }

    /// `B_T` (first component).
    pub fn brownian() -> Self {
        Self::markov("B_T", |w| w[0])
    }

    pub fn brownian_squared() -> Self {
        Self::markov("B_T^2", |w| w[0] * w[0])
    }

    pub fn brownian_abs() -> Self {
        Self::markov("|B_T|", |w| w[0].abs())
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_markov(&self) -> bool {
        matches!(self.payoff, Payoff::Markov(_))
    }

    /// Evaluate a Markov payoff at a Brownian position.
    pub fn eval_markov(&self, w: &[f64]) -> Option<f64> {
        match &self.payoff {
            Payoff::Markov(f) => Some(f(w)),
            Payoff::Path(_) => None,
        }
    }

    /// Payoff values at the terminal step of `backend`.
    pub fn values(&self, backend: &Backend) -> Result<StepValues> {
        let n = backend.steps();
        let out = match (&self.payoff, backend) {
            (Payoff::Markov(f), _) => backend.map_positions(n, |w| f(w)),
            (Payoff::Path(f), Backend::Ensemble(e)) => StepValues::new(
                BackendKind::Ensemble,
                n,
                (0..e.paths().count()).map(|m| f(e.paths().path(m))).collect(),
            ),
            (Payoff::Path(_), Backend::Lattice(_)) => {
                return Err(Error::Backend(format!(
                    "path-dependent claim {} is not a node function on the lattice",
                    self.label
                )))
            }
        };
        if !out.all_finite() || !backend.expectation(&out.map(|v| v * v)).is_finite() {
            return Err(Error::param(format!(
                "claim {} is not finite / square-integrable on this backend",
                self.label
            )));
        }
        Ok(out)
    }
}

/// Discrete `(Y, Z, K)` over steps `start..=end`.
///
/// `K` is stored through its increments: `dK_i = K_{i+1} - K_i`, fixed at step
/// `i`. On the lattice the cumulative `K_i` depends on the path and is not a
/// node function; `expected_k` gives its mean, and ensembles expose `k_paths`.
#[derive(Debug, Clone)]
pub struct SolutionTriple {
    kind: BackendKind,
    start: usize,
    y: Vec<StepValues>,
    z: Vec<Vec<StepValues>>,
    dk: Vec<StepValues>,
    drift: Vec<StepValues>,
    generator: String,
    regression: Option<RegressionSpec>,
}

impl SolutionTriple {
    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.start + self.y.len() - 1
    }

    pub fn generator_label(&self) -> &str {
        &self.generator
    }

    pub fn regression(&self) -> Option<&RegressionSpec> {
        self.regression.as_ref()
    }

    fn offset(&self, i: usize) -> usize {
        assert!(
            i >= self.start && i <= self.end(),
            "step {i} outside solution range {}..={}",
            self.start,
            self.end()
        );
        i - self.start
    }

    pub fn y(&self, i: usize) -> &StepValues {
        &self.y[self.offset(i)]
    }

    /// Component `k` of `Z_i`, `start <= i < end`.
    pub fn z(&self, i: usize, k: usize) -> &StepValues {
        assert!(i < self.end());
        &self.z[self.offset(i)][k]
    }

    pub fn z_components(&self, i: usize) -> &[StepValues] {
        assert!(i < self.end());
        &self.z[self.offset(i)]
    }

    /// Reflection increment applied at step `i`, `start <= i < end`.
    pub fn dk(&self, i: usize) -> &StepValues {
        assert!(i < self.end());
        &self.dk[self.offset(i)]
    }

    /// `g(t_i, Yhat_i, Z_i) dt`.
    pub fn drift(&self, i: usize) -> &StepValues {
        assert!(i < self.end());
        &self.drift[self.offset(i)]
    }

    /// Value at the first step (a single number when `start == 0`).
    pub fn root_value(&self) -> f64 {
        self.y[0].get(0)
    }

    /// `E[K_i]` with `K_start = 0`.
    pub fn expected_k(&self, backend: &Backend, i: usize) -> f64 {
        (self.start..i).fold(0.0, |acc, j| acc + backend.expectation(self.dk(j)))
    }

    /// Cumulative `K_i` per path on an ensemble.
    pub fn k_paths(&self, i: usize) -> Result<StepValues> {
        if self.kind != BackendKind::Ensemble {
            return Err(Error::Backend("cumulative K per node is path dependent on the lattice".into()));
        }
        let len = self.y[0].len();
        let mut k = vec![0.0; len];
        for j in self.start..i {
            for (acc, d) in k.iter_mut().zip(self.dk(j).values()) {
                *acc += d;
            }
        }
        Ok(StepValues::new(BackendKind::Ensemble, i, k))
    }

    /// True when no reflection happened anywhere.
    pub fn k_is_zero(&self) -> bool {
        self.dk.iter().all(|d| d.values().iter().all(|&v| v == 0.0))
    }

    /// Per-path `Y_end + sum_i (g_i dt + dK_i)`; its sample mean estimates `Y_start`.
    pub fn pathwise_estimator(&self) -> Result<StepValues> {
        if self.kind != BackendKind::Ensemble {
            return Err(Error::Backend("pathwise estimator is defined on ensembles".into()));
        }
        let mut acc = self.y.last().expect("non-empty").values().to_vec();
        for (g, d) in self.drift.iter().zip(&self.dk) {
            for ((a, gv), dv) in acc.iter_mut().zip(g.values()).zip(d.values()) {
                *a += gv + dv;
            }
        }
        Ok(StepValues::new(BackendKind::Ensemble, self.start, acc))
    }

    /// Standard error of the root value on an ensemble; zero on the lattice.
    pub fn standard_error(&self, backend: &Backend) -> Result<f64> {
        match self.kind {
            BackendKind::Lattice => Ok(0.0),
            BackendKind::Ensemble => Ok(backend.standard_error(&self.pathwise_estimator()?)),
        }
    }

    /// Overwrite an increment; for building corrupted triples in checker tests.
    #[doc(hidden)]
    pub fn set_dk(&mut self, i: usize, values: StepValues) {
        let o = self.offset(i);
        self.dk[o] = values;
    }
}

/// Backward solve from `terminal` (at step `t`) down to step `start`.
pub fn solve_from(
    backend: &Backend,
    gen: &Generator,
    floor: &Obstacle,
    terminal: &StepValues,
    start: usize,
) -> Result<SolutionTriple> {
    let end = terminal.step();
    if terminal.kind() != backend.kind() || terminal.len() != backend.len_at(end) || end > backend.steps() {
        return Err(Error::Backend(format!(
            "terminal values (step {end}, len {}) do not match the backend",
            terminal.len()
        )));
    }
    if start > end {
        return Err(Error::param(format!("start step {start} after terminal step {end}")));
    }
    if !terminal.all_finite() {
        return Err(Error::Overflow { step: end });
    }
    if let Some(s) = floor.values_at(backend, end) {
        for (idx, (&v, &f)) in terminal.values().iter().zip(s.values()).enumerate() {
            if v < f {
                return Err(Error::TerminalBelowFloor {
                    step: end,
                    index: idx,
                    value: v,
                    floor: f,
                });
            }
        }
    }

    let grid = *backend.grid();
    let dt = grid.dt();
    let d = backend.dim();
    let steps = end - start;
    let mut ys = Vec::with_capacity(steps + 1);
    let mut zs = Vec::with_capacity(steps);
    let mut dks = Vec::with_capacity(steps);
    let mut drifts = Vec::with_capacity(steps);
    ys.push(terminal.clone());

    for i in (start..end).rev() {
        let proj = backend.project(ys.last().expect("non-empty"), i)?;
        let z: Vec<StepValues> = proj.weighted.iter().map(|w| w.map(|v| v / dt)).collect();
        let t = grid.time(i);
        let n = proj.mean.len();
        let mut zbuf = vec![0.0; d];
        let mut drift = Vec::with_capacity(n);
        let mut ytil = Vec::with_capacity(n);
        for m in 0..n {
            for (k, zk) in z.iter().enumerate() {
                zbuf[k] = zk.get(m);
            }
            let yhat = proj.mean.get(m);
            let g = gen.eval(t, yhat, &zbuf) * dt;
            drift.push(g);
            ytil.push(yhat + g);
        }
        let (y, dk) = match floor.values_at(backend, i) {
            None => {
                let zeros = vec![0.0; n];
                (ytil, zeros)
            }
            Some(s) => {
                let mut y = Vec::with_capacity(n);
                let mut dk = Vec::with_capacity(n);
                for (&v, &f) in ytil.iter().zip(s.values()) {
                    if v >= f {
                        y.push(v);
                        dk.push(0.0);
                    } else {
                        y.push(f);
                        dk.push(f - v);
                    }
                }
                (y, dk)
            }
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow { step: i });
        }
        let kind = backend.kind();
        ys.push(StepValues::new(kind, i, y));
        zs.push(z);
        dks.push(StepValues::new(kind, i, dk));
        drifts.push(StepValues::new(kind, i, drift));
    }

    ys.reverse();
    zs.reverse();
    dks.reverse();
    drifts.reverse();
    Ok(SolutionTriple {
        kind: backend.kind(),
        start,
        y: ys,
        z: zs,
        dk: dks,
        drift: drifts,
        generator: gen.label(),
        regression: backend.regression().cloned(),
    })
}

/// One backward step without reflection: `Yhat + g(t_i, Yhat, Z_i) dt`.
pub fn unreflected_step(
    backend: &Backend,
    gen: &Generator,
    values: &StepValues,
    i: usize,
) -> Result<StepValues> {
    let sol = solve_from(backend, gen, &Obstacle::none(), values, i)?;
    Ok(sol.y(i).clone())
}

/// Plain BSDE with terminal `xi` and driver `gen`, over the whole grid.
pub fn solve_bsde(xi: &TerminalClaim, gen: &Generator, backend: &Backend) -> Result<SolutionTriple> {
    let terminal = xi.values(backend)?;
    solve_from(backend, gen, &Obstacle::none(), &terminal, 0)
}

/// `E^mu[xi | F_t]`: the BSDE with driver `mu |z|`.
pub fn e_mu(xi: &TerminalClaim, mu: f64, backend: &Backend) -> Result<SolutionTriple> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::param(format!("mu must be >= 0, got {mu}")));
    }
    solve_bsde(xi, &Generator::emu(mu), backend)
}

/// `E^mu_{t,T}` applied to terminal values.
pub fn e_mu_values(values: &StepValues, mu: f64, backend: &Backend, t: usize) -> Result<StepValues> {
    let sol = solve_from(backend, &Generator::emu(mu), &Obstacle::none(), values, t)?;
    Ok(sol.y(t).clone())
}

/// Residual of `E^{-mu}_{t,T}[X + Y] = Y - E^mu_{t,T}[-X]` for `Y` measurable at `t`.
///
/// The left side is solved with `Y` folded into the terminal value (root by
/// root on the lattice); the right side solves `-X` under `E^mu` and shifts.
pub fn duality_check(
    x: &TerminalClaim,
    y_shift: &StepValues,
    mu: f64,
    backend: &Backend,
    t: usize,
) -> Result<f64> {
    if y_shift.step() != t || y_shift.len() != backend.len_at(t) || y_shift.kind() != backend.kind() {
        return Err(Error::Backend(format!("shift must be measurable at step {t}")));
    }
    let xv = x.values(backend)?;
    let neg = Generator::neg_emu(mu);
    let none = Obstacle::none();
    let local = LocalClaim::new(y_shift.clone()).with_term(backend.constant(t, 1.0), xv.clone())?;
    let lhs = local.evaluate_with(backend, |v| Ok(solve_from(backend, &neg, &none, v, t)?.y(t).clone()))?;
    let emu_neg_x = e_mu_values(&xv.map(|v| -v), mu, backend, t)?;
    let rhs = y_shift.zip_with(&emu_neg_x, |y, e| y - e)?;
    lhs.max_abs_diff(&rhs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub p: f64,
    pub mu: f64,
    pub t: usize,
    /// `E[E^mu_{t,T}[X]^p]`.
    pub lhs: f64,
    /// `exp(p mu^2 (T - t) / (2 (p - 1))) E[X^p]`.
    pub rhs: f64,
    pub factor: f64,
    /// Allowed excess of `lhs` over `rhs`.
    pub allowance: f64,
    pub pass: bool,
}

/// Relative slack on the lattice.
pub const MOMENT_LATTICE_SLACK: f64 = 1e-6;

/// `exp(p mu^2 tau / (2 (p - 1)))`.
pub fn moment_factor(p: f64, mu: f64, tau: f64) -> f64 {
    (0.5 * p / (p - 1.0) * mu * mu * tau).exp()
}

/// Checks `E[E^mu_{t,T}[X]^p] <= exp(p mu^2 (T-t) / (2(p-1))) E[X^p]` for `X >= 0`.
///
/// Lattice: relative slack `1e-6`. Ensemble: three standard errors of the
/// per-path difference.
pub fn moment_bound_check(
    x: &TerminalClaim,
    mu: f64,
    p: f64,
    backend: &Backend,
    t: usize,
) -> Result<MomentReport> {
    if !(p > 1.0 && p <= 2.0) {
        return Err(Error::param(format!("p must lie in (1, 2], got {p}")));
    }
    if t > backend.steps() {
        return Err(Error::param(format!("step {t} beyond the grid")));
    }
    let xv = x.values(backend)?;
    if xv.min() < 0.0 {
        return Err(Error::param("moment bound needs a nonnegative claim"));
    }
    let y = e_mu_values(&xv, mu, backend, t)?;
    let yp = y.map(|v| v.abs().powf(p));
    let xp = xv.map(|v| v.powf(p));
    let factor = moment_factor(p, mu, backend.grid().remaining(t));
    let lhs = backend.expectation(&yp);
    let rhs = factor * backend.expectation(&xp);
    let allowance = match backend.kind() {
        BackendKind::Lattice => MOMENT_LATTICE_SLACK * rhs,
        BackendKind::Ensemble => {
            let diff = StepValues::new(
                BackendKind::Ensemble,
                t,
                yp.values()
                    .iter()
                    .zip(xp.values())
                    .map(|(a, b)| a - factor * b)
                    .collect(),
            );
            3.0 * backend.standard_error(&diff)
        }
    };
    Ok(MomentReport {
        p,
        mu,
        t,
        lhs,
        rhs,
        factor,
        allowance,
        pass: lhs <= rhs + allowance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condexp::Ensemble;
    use crate::paths::{build_lattice, simulate_paths, TimeGrid};

    fn lattice(t: f64, n: usize) -> Backend {
        Backend::Lattice(build_lattice(TimeGrid::new(t, n).unwrap()).unwrap())
    }

    #[test]
    fn zero_driver_square_terminal_gives_horizon() {
        for n in [1, 2, 5, 16] {
            let b = lattice(1.0, n);
            let sol = solve_bsde(&TerminalClaim::brownian_squared(), &Generator::zero(), &b).unwrap();
            assert!((sol.root_value() - 1.0).abs() < 1e-13, "N={n}");
            assert!(sol.k_is_zero());
        }
    }

    #[test]
    fn constants_are_preserved() {
        let b = lattice(1.0, 6);
        for g in [Generator::zero(), Generator::emu(1.0), Generator::linear(vec![0.3])] {
            let sol = solve_bsde(&TerminalClaim::constant(2.5), &g, &b).unwrap();
            for i in 0..=6 {
                assert!(sol.y(i).values().iter().all(|&v| v == 2.5));
            }
            for i in 0..6 {
                assert!(sol.z(i, 0).values().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn linear_driver_matches_closed_form() {
        let mu = 0.7;
        let b = lattice(1.0, 10);
        let l = b.as_lattice().unwrap();
        for g in [Generator::linear(vec![mu]), Generator::emu(mu)] {
            let sol = solve_bsde(&TerminalClaim::brownian(), &g, &b).unwrap();
            for i in 0..=10 {
                let t = l.grid().time(i);
                for j in 0..=i {
                    let expect = l.position(i, j) + mu * (1.0 - t);
                    assert!((sol.y(i).get(j) - expect).abs() < 1e-12);
                }
            }
            for i in 0..10 {
                assert!(sol.z(i, 0).values().iter().all(|z| (z - 1.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn e_mu_monotone_in_mu() {
        let b = lattice(1.0, 12);
        let mut last = f64::NEG_INFINITY;
        for mu in [0.0, 0.25, 0.5, 1.0, 2.0] {
            let y0 = e_mu(&TerminalClaim::brownian_abs(), mu, &b).unwrap().root_value();
            assert!(y0 >= last);
            last = y0;
        }
        assert!(e_mu(&TerminalClaim::brownian_abs(), -1.0, &b).is_err());
    }

    #[test]
    fn restart_is_bitwise_compositional() {
        let b = lattice(1.0, 9);
        let g = Generator::emu(1.0);
        let full = solve_bsde(&TerminalClaim::brownian_abs(), &g, &b).unwrap();
        for j in 1..9 {
            let restarted = solve_from(&b, &g, &Obstacle::none(), full.y(j), 0).unwrap();
            for i in 0..=j {
                assert_eq!(restarted.y(i), full.y(i));
            }
        }
    }

    #[test]
    fn duality_simple_cases() {
        let b = lattice(1.0, 8);
        let r = duality_check(&TerminalClaim::constant(1.5), &b.constant(3, -0.5), 1.0, &b, 3).unwrap();
        assert!(r < 1e-14);
        let r = duality_check(&TerminalClaim::brownian(), &b.constant(4, 0.0), 0.8, &b, 4).unwrap();
        assert!(r < 1e-12);
    }

    #[test]
    fn moment_bound_constants_and_factor() {
        assert!((moment_factor(2.0, 1.0, 1.0) - std::f64::consts::E).abs() < 1e-15);
        let b = lattice(1.0, 4);
        let rep = moment_bound_check(&TerminalClaim::constant(2.0), 0.5, 1.5, &b, 0).unwrap();
        assert!(rep.pass && rep.lhs < rep.rhs);
        assert!(moment_bound_check(&TerminalClaim::constant(2.0), 0.5, 1.0, &b, 0).is_err());
        assert!(moment_bound_check(&TerminalClaim::constant(2.0), 0.5, 2.5, &b, 0).is_err());
    }

    #[test]
    fn path_claims_need_an_ensemble() {
        let b = lattice(1.0, 4);
        let c = TerminalClaim::path("max", |p| (0..p.len()).map(|i| p.at(i)[0]).fold(f64::MIN, f64::max));
        assert!(c.values(&b).is_err());
        let g = TimeGrid::new(1.0, 4).unwrap();
        let e = Backend::Ensemble(
            Ensemble::new(simulate_paths(g, 1, 200, 3, 0).unwrap(), RegressionSpec::default()).unwrap(),
        );
        let v = c.values(&e).unwrap();
        assert!(v.min() >= 0.0);
    }

    #[test]
    fn ensemble_translation_is_exact_up_to_rounding() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let e = Backend::Ensemble(
            Ensemble::new(simulate_paths(g, 1, 4000, 3, 0).unwrap(), RegressionSpec::default()).unwrap(),
        );
        let gen = Generator::emu(1.0);
        let a = solve_bsde(&TerminalClaim::brownian_abs(), &gen, &e).unwrap();
        let b = solve_bsde(&TerminalClaim::markov("|B_T|+3", |w| w[0].abs() + 3.0), &gen, &e).unwrap();
        for i in 0..=10 {
            let shifted = a.y(i).map(|v| v + 3.0);
            assert!(b.y(i).max_abs_diff(&shifted).unwrap() < 1e-11);
        }
    }
}
