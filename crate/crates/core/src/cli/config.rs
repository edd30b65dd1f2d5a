//! Plain-text experiment configuration: one `key = value` per line, `#` starts
//! a comment, blank lines are ignored. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::condexp::{Backend, Ensemble, RegressionSpec, StateExtractor};
use crate::error::{Error, Result};
use crate::generators::Generator;
use crate::lab::{AxiomId, TolerancePolicy};
use crate::paths::{build_lattice, simulate_paths, TimeGrid};
use crate::bsde::TerminalClaim;
use crate::rbsde::{AmericanPut, Obstacle};

pub const KEYS: &[&str] = &[
    "backend",
    "grid.T",
    "grid.N",
    "ensemble.M",
    "ensemble.d",
    "ensemble.seed",
    "ensemble.stream",
    "generator.name",
    "generator.params",
    "floor.name",
    "floor.params",
    "floor.C",
    "claim.name",
    "claim.params",
    "market.spot",
    "market.strike",
    "market.rate",
    "market.sigma",
    "regression.degree",
    "regression.ridge",
    "regression.state",
    "tolerance.lattice_abs",
    "tolerance.ensemble_se",
    "output",
    "check.axioms",
    "check.trials",
    "check.mu",
    "convergence.n_list",
    "extend.t",
    "extend.schedule",
    "doob_meyer.s",
    "doob_meyer.t",
    "oracle.steps",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendChoice {
    Lattice,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedSpec {
    pub name: String,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub spot: f64,
    pub strike: f64,
    pub rate: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub backend: BackendChoice,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub dim: usize,
    pub seed: u64,
    pub stream: u64,
    pub generator: Option<NamedSpec>,
    pub floor: NamedSpec,
    pub floor_bound: Option<f64>,
    pub claim: Option<NamedSpec>,
    pub market: Market,
    pub degree: usize,
    pub ridge: f64,
    /// `auto`, `brownian`, `gbm` or `put`.
    pub state: String,
    pub tolerance: TolerancePolicy,
    pub output: Option<PathBuf>,
    pub axioms: Vec<AxiomId>,
    pub trials: usize,
    pub mu: Option<f64>,
    pub n_list: Vec<usize>,
    pub extend_t: usize,
    pub extend_schedule: Vec<f64>,
    pub dm_s: usize,
    pub dm_t: Option<usize>,
    pub oracle_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backend: BackendChoice::Lattice,
            horizon: 1.0,
            steps: 50,
            paths: 10_000,
            dim: 1,
            seed: 42,
            stream: 0,
            generator: None,
            floor: NamedSpec {
                name: "none".into(),
                params: vec![],
            },
            floor_bound: None,
            claim: None,
            market: Market {
                spot: 100.0,
                strike: 100.0,
                rate: 0.05,
                sigma: 0.2,
            },
            degree: 4,
            ridge: 1e-8,
            state: "auto".into(),
            tolerance: TolerancePolicy::default(),
            output: None,
            axioms: AxiomId::ALL.to_vec(),
            trials: 4,
            mu: None,
            n_list: vec![2, 4, 8, 16],
            extend_t: 0,
            extend_schedule: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            dm_s: 0,
            dm_t: None,
            oracle_steps: 500,
        }
    }
}

fn cfg(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| cfg(format!("{key}: cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p.trim())).collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(cfg(format!("line {}: unknown key `{k}`", lineno + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(cfg(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }

        let mut c = Self::default();
        for (k, v) in &entries {
            let v = v.as_str();
            match k.as_str() {
                "backend" => {
                    c.backend = match v {
                        "lattice" => BackendChoice::Lattice,
                        "ensemble" => BackendChoice::Ensemble,
                        _ => return Err(cfg(format!("backend must be lattice or ensemble, got `{v}`"))),
                    }
                }
                "grid.T" => c.horizon = num(k, v)?,
                "grid.N" => c.steps = num(k, v)?,
                "ensemble.M" => c.paths = num(k, v)?,
                "ensemble.d" => c.dim = num(k, v)?,
                "ensemble.seed" => c.seed = num(k, v)?,
                "ensemble.stream" => c.stream = num(k, v)?,
                "generator.name" => c.generator.get_or_insert_with(empty_spec).name = v.to_string(),
                "generator.params" => c.generator.get_or_insert_with(empty_spec).params = list(k, v)?,
                "floor.name" => c.floor.name = v.to_string(),
                "floor.params" => c.floor.params = list(k, v)?,
                "floor.C" => c.floor_bound = Some(num(k, v)?),
                "claim.name" => c.claim.get_or_insert_with(empty_spec).name = v.to_string(),
                "claim.params" => c.claim.get_or_insert_with(empty_spec).params = list(k, v)?,
                "market.spot" => c.market.spot = num(k, v)?,
                "market.strike" => c.market.strike = num(k, v)?,
                "market.rate" => c.market.rate = num(k, v)?,
                "market.sigma" => c.market.sigma = num(k, v)?,
                "regression.degree" => c.degree = num(k, v)?,
                "regression.ridge" => c.ridge = num(k, v)?,
                "regression.state" => c.state = v.to_string(),
                "tolerance.lattice_abs" => c.tolerance.lattice_abs = num(k, v)?,
                "tolerance.ensemble_se" => c.tolerance.ensemble_se = num(k, v)?,
                "output" => c.output = Some(PathBuf::from(v)),
                "check.axioms" => {
                    c.axioms = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(|a| a.parse::<AxiomId>()).collect::<Result<_>>()?
                    }
                }
                "check.trials" => c.trials = num(k, v)?,
                "check.mu" => c.mu = Some(num(k, v)?),
                "convergence.n_list" => c.n_list = list(k, v)?,
                "extend.t" => c.extend_t = num(k, v)?,
                "extend.schedule" => c.extend_schedule = list(k, v)?,
                "doob_meyer.s" => c.dm_s = num(k, v)?,
                "doob_meyer.t" => c.dm_t = Some(num(k, v)?),
                "oracle.steps" => c.oracle_steps = num(k, v)?,
                _ => unreachable!("key list checked above"),
            }
        }
        for (what, spec) in [("generator", &c.generator), ("claim", &c.claim)] {
            if let Some(s) = spec {
                if s.name.is_empty() {
                    return Err(cfg(format!("{what}.params given without {what}.name")));
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) || self.steps == 0 {
            return Err(cfg("grid needs T > 0 and N >= 1"));
        }
        if self.paths == 0 || self.dim == 0 {
            return Err(cfg("ensemble needs M >= 1 and d >= 1"));
        }
        if self.backend == BackendChoice::Lattice && self.dim != 1 {
            return Err(cfg("the lattice backend is one-dimensional"));
        }
        if !(self.ridge >= 0.0) {
            return Err(cfg("regression.ridge must be >= 0"));
        }
        if !(self.tolerance.lattice_abs >= 0.0 && self.tolerance.ensemble_se >= 0.0) {
            return Err(cfg("tolerances must be >= 0"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn put(&self) -> AmericanPut {
        AmericanPut {
            spot: self.market.spot,
            strike: self.market.strike,
            rate: self.market.rate,
            sigma: self.market.sigma,
            horizon: self.horizon,
            steps: self.steps,
        }
    }

    fn claim_is_put(&self) -> bool {
        self.claim.as_ref().is_some_and(|c| c.name == "put")
    }

    pub fn state(&self) -> Result<StateExtractor> {
        let m = &self.market;
        match self.state.as_str() {
            "auto" if self.claim_is_put() => Ok(self.put().state()),
            "auto" | "brownian" => Ok(StateExtractor::Brownian),
            "gbm" => Ok(StateExtractor::GeometricBrownian {
                spot: m.spot,
                rate: m.rate,
                sigma: m.sigma,
            }),
            "put" => Ok(self.put().state()),
            other => Err(cfg(format!("unknown regression.state `{other}`"))),
        }
    }

    /// Backend on the configured grid with `steps` replaced by `n`.
    pub fn backend_with_steps(&self, n: usize) -> Result<Backend> {
        let grid = TimeGrid::new(self.horizon, n)?;
        match self.backend {
            BackendChoice::Lattice => Ok(Backend::Lattice(build_lattice(grid)?)),
            BackendChoice::Ensemble => {
                let paths = simulate_paths(grid, self.dim, self.paths, self.seed, self.stream)?;
                let spec = RegressionSpec {
                    degree: self.degree,
                    ridge: self.ridge,
                    state: self.state()?,
                };
                Ok(Backend::Ensemble(Ensemble::new(paths, spec)?))
            }
        }
    }

    pub fn backend(&self) -> Result<Backend> {
        self.backend_with_steps(self.steps)
    }

    pub fn generator(&self) -> Result<Generator> {
        let spec = self
            .generator
            .as_ref()
            .ok_or_else(|| cfg("generator.name is required"))?;
        let p = &spec.params;
        let one = |default: Option<f64>| -> Result<f64> {
            match (p.as_slice(), default) {
                ([v], _) => Ok(*v),
                ([], Some(d)) => Ok(d),
                _ => Err(cfg(format!("generator {} takes one parameter, got {p:?}", spec.name))),
            }
        };
        let g = match spec.name.as_str() {
            "zero" => Generator::zero(),
            "linear" => {
                if p.len() != self.dim {
                    return Err(cfg(format!("linear generator needs {} coefficients", self.dim)));
                }
                Generator::linear(p.clone())
            }
            "emu" => Generator::emu(one(None)?),
            "neg_emu" => Generator::neg_emu(one(None)?),
            "discount" => Generator::discount(one(Some(self.market.rate))?),
            other => return Err(cfg(format!("unknown generator `{other}`"))),
        };
        if let crate::generators::GeneratorKind::Emu(mu) | crate::generators::GeneratorKind::NegEmu(mu) = g.kind() {
            if !(*mu >= 0.0) {
                return Err(cfg("emu parameter must be >= 0"));
            }
        }
        Ok(g)
    }

    pub fn floor(&self) -> Result<Obstacle> {
        let p = &self.floor.params;
        let base = match self.floor.name.as_str() {
            "none" => return Ok(Obstacle::none()),
            "constant" => match p.as_slice() {
                [c] => Obstacle::constant(*c),
                _ => return Err(cfg("floor constant takes one parameter")),
            },
            "put" => {
                let m = &self.market;
                Obstacle::american_put(m.strike, m.spot, m.rate, m.sigma)
            }
            other => return Err(cfg(format!("unknown floor `{other}`"))),
        };
        match self.floor_bound {
            None => Ok(base),
            Some(c) => {
                let f = base.clone();
                Obstacle::new(base.label(), c, true, self.horizon, self.dim, move |t, w| f.eval(t, w))
                    .map_err(|e| cfg(e.to_string()))
            }
        }
    }

    pub fn claim(&self) -> Result<TerminalClaim> {
        let spec = self.claim.as_ref().ok_or_else(|| cfg("claim.name is required"))?;
        let p = spec.params.clone();
        let arity = |n: usize| -> Result<()> {
            if p.len() == n {
                Ok(())
            } else {
                Err(cfg(format!("claim {} takes {n} parameter(s), got {p:?}", spec.name)))
            }
        };
        let c = match spec.name.as_str() {
            "constant" => {
                arity(1)?;
                TerminalClaim::constant(p[0])
            }
            "brownian" => {
                arity(0)?;
                TerminalClaim::brownian()
            }
            "square" => {
                arity(0)?;
                TerminalClaim::brownian_squared()
            }
            "abs" => {
                arity(0)?;
                TerminalClaim::brownian_abs()
            }
            "max" => {
                arity(1)?;
                let c = p[0];
                TerminalClaim::markov(&format!("max(B_T, {c})"), move |w| w[0].max(c))
            }
            "put" => {
                arity(0)?;
                self.put().claim()
            }
            other => return Err(cfg(format!("unknown claim `{other}`"))),
        };
        Ok(c)
    }
}

fn empty_spec() -> NamedSpec {
    NamedSpec {
        name: String::new(),
        params: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let c = ExperimentConfig::parse(
            "# demo\nbackend = ensemble\ngrid.N = 10 # steps\ngenerator.name = emu\ngenerator.params = 1.5\n\
             claim.name = abs\ncheck.axioms = D1, h1,sandwich\nconvergence.n_list = 2,4\n",
        )
        .unwrap();
        assert_eq!(c.backend, BackendChoice::Ensemble);
        assert_eq!(c.steps, 10);
        assert_eq!(c.axioms, vec![AxiomId::D1, AxiomId::H1, AxiomId::Sandwich]);
        assert_eq!(c.n_list, vec![2, 4]);
        assert!(matches!(c.generator().unwrap().kind(), crate::generators::GeneratorKind::Emu(m) if *m == 1.5));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(ExperimentConfig::parse("grid.M = 3").is_err());
        assert!(ExperimentConfig::parse("grid.N = 3\ngrid.N = 4").is_err());
        assert!(ExperimentConfig::parse("grid.N").is_err());
        assert!(ExperimentConfig::parse("grid.N = three").is_err());
        assert!(ExperimentConfig::parse("check.axioms = D9").is_err());
        assert!(ExperimentConfig::parse("backend = tree").is_err());
    }

    #[test]
    fn claim_and_generator_have_no_default() {
        let c = ExperimentConfig::parse("").unwrap();
        assert!(c.claim().is_err());
        assert!(c.generator().is_err());
    }

    #[test]
    fn empty_axiom_list_is_kept_empty() {
        let c = ExperimentConfig::parse("check.axioms =").unwrap();
        assert!(c.axioms.is_empty());
    }
}
