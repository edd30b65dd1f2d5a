use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{BackendChoice, ExperimentConfig};
use crate::bsde::solve_from;
use crate::condexp::Backend;
use crate::error::{Error, Result};
use crate::generators::Generator;
use crate::lab::{check_axiom, extend_operator, AxiomReport, AxiomTrial, DynamicOperator, RbsdeOperator};
use crate::oracles::binomial_american_put;
use crate::rbsde::{doob_meyer_verify, price_american, PricingBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    CheckAxioms,
    PriceAmerican,
    Convergence,
    Extend,
    DoobMeyer,
}

/// CSV text of a run and whether its checks passed.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub csv: String,
    pub pass: bool,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECKS_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) if o.pass => EXIT_OK,
        Ok(_) => EXIT_CHECKS_FAILED,
        Err(e) if e.is_numerical() => EXIT_NUMERICAL,
        Err(_) => EXIT_CONFIG,
    }
}

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    match cmd {
        Command::Solve => solve(cfg),
        Command::CheckAxioms => check_axioms(cfg),
        Command::PriceAmerican => price(cfg),
        Command::Convergence => convergence(cfg),
        Command::Extend => extend(cfg),
        Command::DoobMeyer => doob_meyer(cfg),
    }
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn domination_mu(cfg: &ExperimentConfig, gen: &Generator) -> f64 {
    cfg.mu.or(gen.meta().dominating_mu).unwrap_or(gen.meta().lip_z)
}

fn solve(cfg: &ExperimentConfig) -> Result<Outcome> {
    let backend = cfg.backend()?;
    let (gen, floor, claim) = (cfg.generator()?, cfg.floor()?, cfg.claim()?);
    let terminal = claim.values(&backend)?;
    let sol = solve_from(&backend, &gen, &floor, &terminal, 0)?;
    let grid = backend.grid();
    let n = backend.steps();
    let rows = (0..=n).map(|i| {
        let z = if i < n {
            let comps = sol.z_components(i);
            let norm = comps[0].map(|_| 0.0);
            let norm = comps.iter().fold(norm, |acc, c| {
                acc.zip_with(c, |a, b| a + b * b).expect("same step")
            });
            format!("{:?}", backend.expectation(&norm.map(f64::sqrt)))
        } else {
            String::new()
        };
        format!(
            "{},{:?},{:?},{},{:?}",
            i,
            grid.time(i),
            backend.expectation(sol.y(i)),
            z,
            sol.expected_k(&backend, i)
        )
    });
    Ok(Outcome {
        csv: csv("step,t,mean_y,mean_abs_z,mean_k", rows),
        pass: true,
    })
}

/// Random nonnegative test function `a |w - c| + b w^2 / (1 + w^2) + e`.
fn random_claim(rng: &mut ChaCha8Rng, offset: f64) -> impl Fn(&[f64]) -> f64 + Send + Sync + 'static {
    let a: f64 = rng.random();
    let b: f64 = rng.random();
    let c: f64 = rng.random_range(-1.0..1.0);
    let e: f64 = rng.random();
    move |w: &[f64]| offset + a * (w[0] - c).abs() + b * w[0] * w[0] / (1.0 + w[0] * w[0]) + e
}

/// Deterministic trials from the config seed. Claims sit above `max(C, 0)` so
/// every axiom precondition on the floor and on signs holds.
pub fn random_trials(cfg: &ExperimentConfig, floor_bound: f64) -> Vec<AxiomTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offset = if floor_bound.is_finite() { floor_bound.max(0.0) } else { 0.0 };
    (0..cfg.trials)
        .map(|_| {
            let mut steps = [0usize; 3];
            for s in &mut steps {
                *s = rng.random_range(0..=cfg.steps);
            }
            steps.sort_unstable();
            let x = random_claim(&mut rng, offset);
            let y = random_claim(&mut rng, offset);
            let cut: f64 = rng.random_range(-0.5..0.5);
            AxiomTrial::new(steps[0], steps[1], steps[2], x, y)
                .with_event(move |w| w[0] >= cut)
                .with_constant(offset + 1.0)
        })
        .collect()
}

fn check_axioms(cfg: &ExperimentConfig) -> Result<Outcome> {
    if cfg.axioms.is_empty() {
        return Err(Error::Config("check.axioms is empty".into()));
    }
    if cfg.trials == 0 {
        return Err(Error::Config("check.trials must be >= 1".into()));
    }
    let gen = cfg.generator()?;
    let mu = domination_mu(cfg, &gen);
    let floor = cfg.floor()?;
    let trials = random_trials(cfg, floor.upper_bound());
    let op = RbsdeOperator::new(cfg.backend()?, gen, floor);
    let mut reports = Vec::new();
    for &id in &cfg.axioms {
        reports.extend(check_axiom(&op, id, &trials, mu, &cfg.tolerance)?);
    }
    let pass = reports.iter().all(|r| r.pass);
    Ok(Outcome {
        csv: csv(AxiomReport::CSV_HEADER, reports.iter().map(AxiomReport::csv_row)),
        pass,
    })
}

fn price(cfg: &ExperimentConfig) -> Result<Outcome> {
    let put = cfg.put();
    let choice = match cfg.backend {
        BackendChoice::Lattice => PricingBackend::Lattice,
        BackendChoice::Ensemble => PricingBackend::Ensemble {
            count: cfg.paths,
            seed: cfg.seed,
            stream: cfg.stream,
            degree: cfg.degree,
            ridge: cfg.ridge,
        },
    };
    let res = price_american(&put, &choice)?;
    let oracle = binomial_american_put(put.spot, put.strike, put.rate, put.sigma, put.horizon, cfg.oracle_steps)?;
    let rel = (res.price - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE);
    Ok(Outcome {
        csv: csv(
            "backend,price,standard_error,oracle,relative_error",
            [format!(
                "{},{:?},{:?},{:?},{:?}",
                res.backend, res.price, res.standard_error, oracle, rel
            )],
        ),
        pass: true,
    })
}

fn convergence(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ns = &cfg.n_list;
    if ns.len() < 2 {
        return Err(Error::Config("convergence.n_list needs at least two entries".into()));
    }
    if ns[0] == 0 || ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("convergence.n_list must be positive and increasing".into()));
    }
    let (gen, floor, claim) = (cfg.generator()?, cfg.floor()?, cfg.claim()?);
    let mut y0 = Vec::with_capacity(ns.len());
    for &n in ns {
        let backend: Backend = cfg.backend_with_steps(n)?;
        let sol = solve_from(&backend, &gen, &floor, &claim.values(&backend)?, 0)?;
        y0.push(sol.root_value());
    }
    let reference = *y0.last().expect("two entries");
    let rows = ns
        .iter()
        .zip(&y0)
        .map(|(n, y)| format!("{n},{y:?},{:?}", (y - reference).abs()));
    Ok(Outcome {
        csv: csv("N,y0,abs_err", rows),
        pass: true,
    })
}

fn extend(cfg: &ExperimentConfig) -> Result<Outcome> {
    let gen = cfg.generator()?;
    let mu = domination_mu(cfg, &gen);
    let claim = cfg.claim()?;
    let op = RbsdeOperator::new(cfg.backend()?, gen, cfg.floor()?);
    let x = claim.values(op.backend())?;
    let rep = extend_operator(&op, &x, cfg.extend_t, &cfg.extend_schedule, mu)?;
    let backend = op.backend();
    let rows = rep.schedule.iter().enumerate().map(|(k, n)| {
        let mean = backend.expectation(&rep.values[k]);
        if k == 0 {
            format!("{n:?},{mean:?},,")
        } else {
            format!("{n:?},{mean:?},{:?},{:?}", rep.differences[k - 1], rep.bounds[k - 1])
        }
    });
    Ok(Outcome {
        csv: csv("n,mean_y,l2_diff,bound", rows),
        pass: rep.pass,
    })
}

fn doob_meyer(cfg: &ExperimentConfig) -> Result<Outcome> {
    if cfg.backend != BackendChoice::Lattice {
        return Err(Error::Config("doob-meyer runs on the lattice backend".into()));
    }
    let backend = cfg.backend()?;
    let t = cfg.dm_t.unwrap_or(cfg.steps);
    let rep = doob_meyer_verify(&cfg.claim()?, &cfg.generator()?, &cfg.floor()?, &backend, cfg.dm_s, t)?;
    let tol = cfg.tolerance.lattice_abs;
    let pass = rep.residual <= tol;
    Ok(Outcome {
        csv: csv(
            "s,t,residual,expected_push,tolerance,pass",
            [format!(
                "{},{},{:e},{:?},{:e},{}",
                cfg.dm_s, t, rep.residual, rep.expected_push, tol, pass
            )],
        ),
        pass,
    })
}
