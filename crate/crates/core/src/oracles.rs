//! Independent reference values: closed forms, brute force over every lattice
//! path, and the Cox-Ross-Rubinstein tree for American puts.

use std::fmt;

use sha2::{Digest, Sha256};

use crate::bsde::TerminalClaim;
use crate::error::{Error, Result};
use crate::generators::Generator;
use crate::paths::TimeGrid;
use crate::rbsde::Obstacle;

/// Largest `N` for which all `2^N` paths are enumerated.
pub const MAX_EXHAUSTIVE_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    ClosedForm,
    Exhaustive,
    Tree,
}

impl fmt::Display for OracleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleMethod::ClosedForm => "closed_form",
            OracleMethod::Exhaustive => "exhaustive",
            OracleMethod::Tree => "tree",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub label: String,
    pub method: OracleMethod,
    pub values: Vec<f64>,
    pub params: Vec<(String, f64)>,
}

impl OracleResult {
    pub fn new(label: &str, method: OracleMethod, values: Vec<f64>, params: &[(&str, f64)]) -> Self {
        Self {
            label: label.to_string(),
            method,
            values,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn value(&self) -> f64 {
        self.values[0]
    }

    /// First 16 hex digits of SHA-256 over `label|method|k=v;...` with values in
    /// shortest round-trip form.
    pub fn params_hash(&self) -> String {
        let mut text = format!("{}|{}|", self.label, self.method);
        for (k, v) in &self.params {
            text.push_str(&format!("{k}={v:?};"));
        }
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `oracle,params_hash,value` for the fixture file.
    pub fn fixture_row(&self) -> String {
        format!("{},{},{:?}", self.label, self.params_hash(), self.value())
    }
}

/// `w + mu (T - t)`: the solution at `(t, W_t = w)` of the `E^mu` BSDE with terminal `B_T`.
pub fn closed_form_linear(mu: f64, t: f64, w: f64, horizon: f64) -> f64 {
    w + mu * (horizon - t)
}

/// Backward recursion on the full (non-recombining) binary tree of `grid`.
///
/// `leaf` receives the lattice node index at every step `0..=N` of one path.
/// Returns the values at depth `s`, indexed by the path prefix read as a
/// binary number (first move in the highest bit, `1` = up). Arithmetic is the
/// same as the recombining solver, so node functionals agree bit for bit.
pub fn exhaustive_tree(
    grid: &TimeGrid,
    gen: &Generator,
    floor: &Obstacle,
    leaf: impl Fn(&[usize]) -> f64,
    s: usize,
) -> Result<Vec<f64>> {
    let n = grid.steps();
    if n > MAX_EXHAUSTIVE_STEPS {
        return Err(Error::param(format!(
            "exhaustive enumeration allows N <= {MAX_EXHAUSTIVE_STEPS}, got {n}"
        )));
    }
    if s > n {
        return Err(Error::param(format!("depth {s} beyond N = {n}")));
    }
    let dt = grid.dt();
    let h = dt.sqrt();
    let position = |i: usize, j: usize| (2.0 * j as f64 - i as f64) * h;

    let mut nodes = vec![0usize; n + 1];
    let mut v: Vec<f64> = (0..1usize << n)
        .map(|p| {
            for (k, node) in nodes.iter_mut().enumerate() {
                *node = (p >> (n - k)).count_ones() as usize;
            }
            leaf(&nodes)
        })
        .collect();
    let t_n = grid.time(n);
    for (p, x) in v.iter().enumerate() {
        let f = floor.eval(t_n, &[position(n, p.count_ones() as usize)]);
        if *x < f || !x.is_finite() {
            return Err(Error::TerminalBelowFloor {
                step: n,
                index: p,
                value: *x,
                floor: f,
            });
        }
    }

    for i in (s..n).rev() {
        let t = grid.time(i);
        v = (0..1usize << i)
            .map(|p| {
                let down = v[2 * p];
                let up = v[2 * p + 1];
                let yhat = 0.5 * up + 0.5 * down;
                let z = (0.5 * up * h + 0.5 * down * (-h)) / dt;
                let ytil = yhat + gen.eval(t, yhat, &[z]) * dt;
                let f = floor.eval(t, &[position(i, p.count_ones() as usize)]);
                if ytil >= f {
                    ytil
                } else {
                    f
                }
            })
            .collect();
    }
    Ok(v)
}

/// Root value of the reflected (or, with `Obstacle::none()`, plain) scheme by enumeration.
pub fn exhaustive_expectation(
    grid: &TimeGrid,
    gen: &Generator,
    floor: &Obstacle,
    claim: &TerminalClaim,
) -> Result<OracleResult> {
    if !claim.is_markov() {
        return Err(Error::param("exhaustive_expectation takes a terminal node function"));
    }
    let n = grid.steps();
    let h = grid.dt().sqrt();
    let v = exhaustive_tree(
        grid,
        gen,
        floor,
        |nodes| {
            let w = (2.0 * nodes[n] as f64 - n as f64) * h;
            claim.eval_markov(&[w]).expect("markov claim")
        },
        0,
    )?;
    Ok(OracleResult::new(
        &format!("exhaustive[{}; {}; {}]", gen.label(), floor.label(), claim.label()),
        OracleMethod::Exhaustive,
        v,
        &[("T", grid.horizon()), ("N", n as f64)],
    ))
}

/// Cox-Ross-Rubinstein American put: `u = exp(sigma sqrt(dt))`, `d = 1/u`,
/// risk-neutral `p = (exp(r dt) - d) / (u - d)`, early exercise at every node.
pub fn binomial_american_put(
    spot: f64,
    strike: f64,
    rate: f64,
    sigma: f64,
    horizon: f64,
    steps: usize,
) -> Result<f64> {
    if !(spot > 0.0 && strike >= 0.0 && sigma > 0.0 && horizon > 0.0 && steps >= 1) {
        return Err(Error::param("binomial tree needs spot > 0, strike >= 0, sigma > 0, T > 0, N >= 1"));
    }
    let dt = horizon / steps as f64;
    let u = (sigma * dt.sqrt()).exp();
    let d = 1.0 / u;
    let growth = (rate * dt).exp();
    let p = (growth - d) / (u - d);
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!("degenerate risk-neutral probability {p}")));
    }
    let disc = 1.0 / growth;
    let price_at = |i: usize, j: usize| spot * u.powi(2 * j as i32 - i as i32);
    let mut v: Vec<f64> = (0..=steps).map(|j| (strike - price_at(steps, j)).max(0.0)).collect();
    for i in (0..steps).rev() {
        for j in 0..=i {
            let cont = disc * (p * v[j + 1] + (1.0 - p) * v[j]);
            v[j] = cont.max(strike - price_at(i, j));
        }
        v.truncate(i + 1);
    }
    Ok(v[0])
}

/// The tree price wrapped with its parameters.
pub fn binomial_american_put_result(
    spot: f64,
    strike: f64,
    rate: f64,
    sigma: f64,
    horizon: f64,
    steps: usize,
) -> Result<OracleResult> {
    let v = binomial_american_put(spot, strike, rate, sigma, horizon, steps)?;
    Ok(OracleResult::new(
        "crr_american_put",
        OracleMethod::Tree,
        vec![v],
        &[
            ("spot", spot),
            ("strike", strike),
            ("rate", rate),
            ("sigma", sigma),
            ("T", horizon),
            ("N", steps as f64),
        ],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_bsde;
    use crate::condexp::Backend;
    use crate::paths::build_lattice;

    #[test]
    fn closed_form_cases() {
        assert_eq!(closed_form_linear(0.0, 0.5, 0.3, 1.0), 0.3);
        assert_eq!(closed_form_linear(1.0, 0.0, 0.0, 1.0), 1.0);
        assert_eq!(closed_form_linear(2.0, 1.0, -1.0, 1.0), -1.0);
    }

    #[test]
    fn exhaustive_small_cases() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        let none = Obstacle::none();
        let sq = exhaustive_expectation(&g, &Generator::zero(), &none, &TerminalClaim::brownian_squared()).unwrap();
        assert!((sq.value() - 1.0).abs() < 1e-14);
        let c = exhaustive_expectation(&g, &Generator::emu(1.0), &none, &TerminalClaim::constant(0.7)).unwrap();
        assert_eq!(c.value(), 0.7);
        let lin = exhaustive_expectation(&g, &Generator::emu(1.0), &none, &TerminalClaim::brownian()).unwrap();
        assert!((lin.value() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn exhaustive_matches_recombining_bitwise() {
        let g = TimeGrid::new(1.0, 7).unwrap();
        let b = Backend::Lattice(build_lattice(g).unwrap());
        let claim = TerminalClaim::markov("cubic", |w| w[0].powi(3) - w[0]);
        for gen in [Generator::zero(), Generator::emu(1.0), Generator::discount(0.2)] {
            let sol = solve_bsde(&claim, &gen, &b).unwrap();
            let ex = exhaustive_expectation(&g, &gen, &Obstacle::none(), &claim).unwrap();
            assert_eq!(ex.value().to_bits(), sol.root_value().to_bits());
        }
    }

    #[test]
    fn rejects_large_trees() {
        let g = TimeGrid::new(1.0, 21).unwrap();
        assert!(exhaustive_tree(&g, &Generator::zero(), &Obstacle::none(), |_| 0.0, 0).is_err());
    }

    #[test]
    fn crr_edge_cases_and_monotonicity() {
        assert_eq!(binomial_american_put(100.0, 0.0, 0.05, 0.2, 1.0, 50).unwrap(), 0.0);
        let p = binomial_american_put(90.0, 100.0, 0.0, 1e-9, 1.0, 50).unwrap();
        assert!((p - 10.0).abs() < 1e-6);
        let mut last = 0.0;
        for k in [80.0, 90.0, 100.0, 110.0] {
            let v = binomial_american_put(100.0, k, 0.05, 0.2, 1.0, 100).unwrap();
            assert!(v >= last);
            last = v;
        }
        let mut last = 0.0;
        for s in [0.1, 0.2, 0.3, 0.5] {
            let v = binomial_american_put(100.0, 100.0, 0.05, s, 1.0, 100).unwrap();
            assert!(v >= last);
            last = v;
        }
        // r dt large against sigma sqrt(dt) pushes p above 1
        assert!(binomial_american_put(100.0, 100.0, 0.5, 0.01, 1.0, 4).is_err());
    }

    #[test]
    fn params_hash_is_stable_and_sensitive() {
        let a = binomial_american_put_result(100.0, 100.0, 0.05, 0.2, 1.0, 10).unwrap();
        let b = binomial_american_put_result(100.0, 100.0, 0.05, 0.2, 1.0, 10).unwrap();
        let c = binomial_american_put_result(100.0, 101.0, 0.05, 0.2, 1.0, 10).unwrap();
        assert_eq!(a.params_hash(), b.params_hash());
        assert_ne!(a.params_hash(), c.params_hash());
        assert_eq!(a.params_hash().len(), 16);
    }
}
