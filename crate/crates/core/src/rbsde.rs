//! Reflected backward scheme: floors, the increasing process `K` and the
//! checks that characterize it.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsde::{solve_from, unreflected_step, SolutionTriple, TerminalClaim};
use crate::condexp::{Backend, BackendKind, Ensemble, RegressionSpec, StateExtractor, StepValues};
use crate::error::{Error, Result};
use crate::generators::Generator;
use crate::paths::{build_lattice, simulate_paths, TimeGrid};

type FloorFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

const OBSTACLE_PROBES: usize = 1000;

/// Lower barrier `S(t, W_t)` with a declared upper bound `C`, or no floor at all.
#[derive(Clone)]
pub struct Obstacle {
    label: String,
    floor: Option<Arc<FloorFn>>,
    upper_bound: f64,
    continuous: bool,
}

impl fmt::Debug for Obstacle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Obstacle")
            .field("label", &self.label)
            .field("upper_bound", &self.upper_bound)
            .field("continuous", &self.continuous)
            .finish()
    }
}

impl Obstacle {
    /// The `-inf` floor; solves reduce to the plain BSDE.
    pub fn none() -> Self {
        Self {
            label: "none".into(),
            floor: None,
            upper_bound: f64::NEG_INFINITY,
            continuous: true,
        }
    }

    /// Floor from a function of `(t, W_t)`, spot-checked against `upper_bound`
    /// on random probes with `t` in `[0, horizon]` and `|W^k| <= 5 sqrt(horizon)`.
    pub fn new(
        label: &str,
        upper_bound: f64,
        continuous: bool,
        horizon: f64,
        dim: usize,
        floor: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !upper_bound.is_finite() {
            return Err(Error::param("floor upper bound must be finite"));
        }
        if !(horizon > 0.0) || dim == 0 {
            return Err(Error::param("probe region needs horizon > 0 and dim >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x0b57_ac1e);
        let reach = 5.0 * horizon.sqrt();
        let mut w = vec![0.0; dim];
        for _ in 0..OBSTACLE_PROBES {
            let t = rng.random_range(0.0..=horizon);
            for x in w.iter_mut() {
                *x = rng.random_range(-reach..=reach);
            }
            let s = floor(t, &w);
            if s.is_nan() || s > upper_bound {
                return Err(Error::ObstacleViolation(format!(
                    "floor {label} is {s} at t = {t}, W = {w:?}, above the declared bound {upper_bound}"
                )));
            }
        }
        Ok(Self {
            label: label.to_string(),
            floor: Some(Arc::new(floor)),
            upper_bound,
            continuous,
        })
    }

    pub fn constant(c: f64) -> Self {
        Self {
            label: format!("constant({c})"),
            floor: Some(Arc::new(move |_, _| c)),
            upper_bound: c,
            continuous: true,
        }
    }

    /// `(strike - X_t)^+` on `X_t = spot exp((rate - sigma^2/2) t + sigma W_t)`; bounded by `strike`.
    pub fn american_put(strike: f64, spot: f64, rate: f64, sigma: f64) -> Self {
        Self {
            label: format!("put({strike})"),
            floor: Some(Arc::new(move |t, w| {
                let x = spot * ((rate - 0.5 * sigma * sigma) * t + sigma * w[0]).exp();
                (strike - x).max(0.0)
            })),
            upper_bound: strike,
            continuous: true,
        }
    }

    /// `S + delta` with bound `C + delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        match &self.floor {
            None => self.clone(),
            Some(f) => {
                let f = Arc::clone(f);
                Self {
                    label: format!("{}{delta:+}", self.label),
                    floor: Some(Arc::new(move |t, w| f(t, w) + delta)),
                    upper_bound: self.upper_bound + delta,
                    continuous: self.continuous,
                }
            }
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_none(&self) -> bool {
        self.floor.is_none()
    }

    /// Declared `C`; `-inf` without a floor.
    pub fn upper_bound(&self) -> f64 {
        self.upper_bound
    }

    pub fn is_continuous(&self) -> bool {
        self.continuous
    }

    pub fn eval(&self, t: f64, w: &[f64]) -> f64 {
        match &self.floor {
            None => f64::NEG_INFINITY,
            Some(f) => f(t, w),
        }
    }

    /// Floor values at step `i`; `None` without a floor.
    pub fn values_at(&self, backend: &Backend, i: usize) -> Option<StepValues> {
        let f = self.floor.as_ref()?;
        let t = backend.grid().time(i);
        Some(backend.map_positions(i, |w| f(t, w)))
    }
}

/// Reflected solve of `(xi, gen, floor)` over the whole grid.
pub fn solve_rbsde(
    xi: &TerminalClaim,
    gen: &Generator,
    floor: &Obstacle,
    backend: &Backend,
) -> Result<SolutionTriple> {
    let terminal = xi.values(backend)?;
    solve_from(backend, gen, floor, &terminal, 0)
}

/// Max over paths of `sum_i (Y_i - S_i) dK_i`.
///
/// On the lattice the maximum over all `2^N` paths is taken by a max-plus
/// backward pass over the nodes.
pub fn skorokhod_residual(sol: &SolutionTriple, floor: &Obstacle, backend: &Backend) -> f64 {
    if floor.is_none() {
        return 0.0;
    }
    let terms: Vec<Vec<f64>> = (sol.start()..sol.end())
        .map(|i| {
            let s = floor.values_at(backend, i).expect("floor present");
            sol.y(i)
                .values()
                .iter()
                .zip(s.values())
                .zip(sol.dk(i).values())
                .map(|((y, s), dk)| (y - s) * dk)
                .collect()
        })
        .collect();
    match sol.kind() {
        BackendKind::Ensemble => {
            let len = sol.y(sol.start()).len();
            (0..len)
                .map(|m| terms.iter().map(|t| t[m]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        }
        BackendKind::Lattice => {
            let mut best: Vec<f64> = vec![0.0; sol.y(sol.end()).len()];
            for (off, term) in terms.iter().enumerate().rev() {
                let i = sol.start() + off;
                best = (0..=i)
                    .map(|j| term[j] + best[j].max(best[j + 1]))
                    .collect();
            }
            best.into_iter().fold(f64::NEG_INFINITY, f64::max)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatnessViolation {
    pub step: usize,
    pub index: usize,
    pub y: f64,
    pub floor: f64,
    pub dk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatnessReport {
    /// Nodes/paths where the floor binds (`dK > 0`).
    pub pushes: usize,
    pub violations: Vec<FlatnessViolation>,
}

impl FlatnessReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every node/path where `dK_i > 0` although `Y_i > S_i`.
pub fn flatness_check(sol: &SolutionTriple, floor: &Obstacle, backend: &Backend) -> FlatnessReport {
    let mut report = FlatnessReport {
        pushes: 0,
        violations: Vec::new(),
    };
    for i in sol.start()..sol.end() {
        let dk = sol.dk(i);
        let s = floor
            .values_at(backend, i)
            .unwrap_or_else(|| backend.constant(i, f64::NEG_INFINITY));
        for (idx, ((&y, &f), &d)) in sol.y(i).values().iter().zip(s.values()).zip(dk.values()).enumerate() {
            if d > 0.0 {
                report.pushes += 1;
                if y > f {
                    report.violations.push(FlatnessViolation {
                        step: i,
                        index: idx,
                        y,
                        floor: f,
                        dk: d,
                    });
                }
            }
        }
    }
    report
}

#[derive(Debug, Clone)]
pub struct FloorShift {
    pub original: SolutionTriple,
    pub shifted: SolutionTriple,
    /// `max_i |Y^1_i - (Y^2_i + C)|`.
    pub residual: f64,
}

/// Solves `(xi, gen, S)` and `(xi - C, gen, S - C)` and compares `Y^1` with `Y^2 + C`.
pub fn floor_shift_solve(
    xi: &TerminalClaim,
    gen: &Generator,
    floor: &Obstacle,
    c: f64,
    backend: &Backend,
) -> Result<FloorShift> {
    if !gen.is_z_only() {
        return Err(Error::Generator(format!(
            "floor shift needs a y-independent driver with g(t, 0) = 0, got {}",
            gen.label()
        )));
    }
    let terminal = xi.values(backend)?;
    let original = solve_from(backend, gen, floor, &terminal, 0)?;
    let shifted = solve_from(backend, gen, &floor.shifted(-c), &terminal.map(|v| v - c), 0)?;
    let mut residual = 0.0f64;
    for i in 0..=backend.steps() {
        let back = shifted.y(i).map(|v| v + c);
        residual = residual.max(original.y(i).max_abs_diff(&back)?);
    }
    Ok(FloorShift {
        original,
        shifted,
        residual,
    })
}

#[derive(Debug, Clone)]
pub struct DoobMeyerReport {
    /// `max |M_s - Y_s|` over the nodes at step `s`.
    pub residual: f64,
    /// `E[K_t] - E[K_s]`.
    pub expected_push: f64,
    pub solution: SolutionTriple,
}

fn require_z_only(gen: &Generator, what: &str) -> Result<()> {
    if gen.is_z_only() {
        Ok(())
    } else {
        Err(Error::Generator(format!(
            "{what} needs a y-independent driver with g(t, 0) = 0, got {}",
            gen.label()
        )))
    }
}

/// Runs the unreflected recursion from `Y_t` down to `s`, adding back the
/// reflection increments: `M_j = step(M_{j+1}) + dK_j`. `Y + K` is a martingale
/// of the unreflected operator iff `M_s = Y_s`.
pub fn doob_meyer_verify(
    xi: &TerminalClaim,
    gen: &Generator,
    floor: &Obstacle,
    backend: &Backend,
    s: usize,
    t: usize,
) -> Result<DoobMeyerReport> {
    require_z_only(gen, "the Doob-Meyer check")?;
    if backend.kind() != BackendKind::Lattice {
        return Err(Error::Backend(
            "Doob-Meyer verification needs the lattice (K must be a node function per step)".into(),
        ));
    }
    if s > t || t > backend.steps() {
        return Err(Error::param(format!("need s <= t <= N, got s = {s}, t = {t}")));
    }
    let sol = solve_rbsde(xi, gen, floor, backend)?;
    let mut m = sol.y(t).clone();
    for j in (s..t).rev() {
        let stepped = unreflected_step(backend, gen, &m, j)?;
        m = stepped.zip_with(sol.dk(j), |a, b| a + b)?;
    }
    let residual = m.max_abs_diff(sol.y(s))?;
    let expected_push = sol.expected_k(backend, t) - sol.expected_k(backend, s);
    Ok(DoobMeyerReport {
        residual,
        expected_push,
        solution: sol,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupermartingaleReport {
    /// Largest `step_{s,t}(Y_t) - Y_s` over pairs and nodes; `<= 0` for a supermartingale.
    pub worst_margin: f64,
    /// Largest `Y_s - step_{s,t}(Y_t)`.
    pub largest_gap: f64,
    pub witness: (usize, usize, usize),
    pub pairs: usize,
}

impl SupermartingaleReport {
    pub fn pass(&self, tol: f64) -> bool {
        self.worst_margin <= tol
    }

    pub fn strict_somewhere(&self) -> bool {
        self.largest_gap > 0.0
    }
}

/// Applies the unreflected operator from every `t` back to every `s < t` on
/// the reflected `Y_t` and compares with `Y_s`.
pub fn supermartingale_check(
    xi: &TerminalClaim,
    gen: &Generator,
    floor: &Obstacle,
    backend: &Backend,
) -> Result<SupermartingaleReport> {
    require_z_only(gen, "the supermartingale check")?;
    let sol = solve_rbsde(xi, gen, floor, backend)?;
    let n = backend.steps();
    let none = Obstacle::none();
    let mut report = SupermartingaleReport {
        worst_margin: f64::NEG_INFINITY,
        largest_gap: 0.0,
        witness: (0, 0, 0),
        pairs: 0,
    };
    for t in 1..=n {
        let plain = solve_from(backend, gen, &none, sol.y(t), 0)?;
        for s in 0..t {
            report.pairs += 1;
            for (idx, (&p, &y)) in plain.y(s).values().iter().zip(sol.y(s).values()).enumerate() {
                let margin = p - y;
                if margin > report.worst_margin {
                    report.worst_margin = margin;
                    report.witness = (s, t, idx);
                }
                report.largest_gap = report.largest_gap.max(-margin);
            }
        }
    }
    Ok(report)
}

/// Backend choice for pricing.
#[derive(Debug, Clone, PartialEq)]
pub enum PricingBackend {
    Lattice,
    Ensemble {
        count: usize,
        seed: u64,
        stream: u64,
        degree: usize,
        ridge: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmericanPut {
    pub spot: f64,
    pub strike: f64,
    pub rate: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceResult {
    pub price: f64,
    pub standard_error: f64,
    pub backend: BackendKind,
}

impl AmericanPut {
    pub fn validate(&self) -> Result<()> {
        let ok = self.spot > 0.0
            && self.strike >= 0.0
            && self.sigma > 0.0
            && self.horizon > 0.0
            && self.steps >= 1
            && self.rate.is_finite()
            && self.sigma.is_finite()
            && self.spot.is_finite()
            && self.strike.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid American put parameters {self:?}")))
        }
    }

    pub fn claim(&self) -> TerminalClaim {
        let AmericanPut {
            spot,
            strike,
            rate,
            sigma,
            horizon,
            ..
        } = *self;
        TerminalClaim::markov("put payoff", move |w| {
            let x = spot * ((rate - 0.5 * sigma * sigma) * horizon + sigma * w[0]).exp();
            (strike - x).max(0.0)
        })
    }

    pub fn floor(&self) -> Obstacle {
        Obstacle::american_put(self.strike, self.spot, self.rate, self.sigma)
    }

    /// Regression state `(X_t, (K - X_t)^+)`: the forward price together with
    /// the exercise value, so the basis can follow the kink at the strike.
    pub fn state(&self) -> StateExtractor {
        let AmericanPut {
            spot,
            strike,
            rate,
            sigma,
            ..
        } = *self;
        StateExtractor::Custom {
            dim: 2,
            label: "put state (X, (K - X)^+)".into(),
            map: Arc::new(move |t, w| {
                let x = spot * ((rate - 0.5 * sigma * sigma) * t + sigma * w[0]).exp();
                vec![x, (strike - x).max(0.0)]
            }),
        }
    }

    pub fn backend(&self, choice: &PricingBackend) -> Result<Backend> {
        self.validate()?;
        let grid = TimeGrid::new(self.horizon, self.steps)?;
        match choice {
            PricingBackend::Lattice => Ok(Backend::Lattice(build_lattice(grid)?)),
            PricingBackend::Ensemble {
                count,
                seed,
                stream,
                degree,
                ridge,
            } => {
                let paths = simulate_paths(grid, 1, *count, *seed, *stream)?;
                let spec = RegressionSpec {
                    degree: *degree,
                    ridge: *ridge,
                    state: self.state(),
                };
                Ok(Backend::Ensemble(Ensemble::new(paths, spec)?))
            }
        }
    }
}

/// Reflected solve with driver `-r y`, payoff `(K - X_T)^+` and floor `(K - X_t)^+`.
pub fn price_american(put: &AmericanPut, choice: &PricingBackend) -> Result<PriceResult> {
    let backend = put.backend(choice)?;
    let sol = solve_rbsde(&put.claim(), &Generator::discount(put.rate), &put.floor(), &backend)?;
    Ok(PriceResult {
        price: sol.root_value(),
        standard_error: sol.standard_error(&backend)?,
        backend: backend.kind(),
    })
}
