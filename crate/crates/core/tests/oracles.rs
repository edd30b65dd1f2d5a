//! Solver outputs against brute-force enumeration and frozen reference values.

use rbsde_lab::bsde::{duality_check, moment_bound_check, moment_factor, solve_bsde, TerminalClaim};
use rbsde_lab::condexp::{Backend, StepValues};
use rbsde_lab::generators::Generator;
use rbsde_lab::lab::{DynamicOperator, RbsdeOperator};
use rbsde_lab::oracles::{
    binomial_american_put_result, exhaustive_expectation, exhaustive_tree, OracleResult,
};
use rbsde_lab::paths::{build_lattice, TimeGrid};
use rbsde_lab::rbsde::{solve_rbsde, AmericanPut, Obstacle};

fn lattice(n: usize) -> (TimeGrid, Backend) {
    let g = TimeGrid::new(1.0, n).unwrap();
    (g, Backend::Lattice(build_lattice(g).unwrap()))
}

fn w_at(g: &TimeGrid, i: usize, j: usize) -> f64 {
    (2.0 * j as f64 - i as f64) * g.dt().sqrt()
}

/// Node at step `k` of the path whose first `s` moves are the bits of `prefix`.
fn node_of(prefix: usize, s: usize, k: usize) -> usize {
    (prefix >> (s - k)).count_ones() as usize
}

fn put8() -> AmericanPut {
    AmericanPut {
        spot: 100.0,
        strike: 100.0,
        rate: 0.05,
        sigma: 0.2,
        horizon: 1.0,
        steps: 8,
    }
}

#[test]
fn frozen_fixture_rows_reproduce() {
    let text = include_str!("fixtures/oracles.csv");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("oracle,params_hash,value"));
    let (_, b12) = lattice(12);
    let recomputed: Vec<OracleResult> = vec![
        binomial_american_put_result(100.0, 100.0, 0.05, 0.2, 1.0, 500).unwrap(),
        exhaustive_expectation(
            &TimeGrid::new(1.0, 12).unwrap(),
            &Generator::emu(1.0),
            &Obstacle::none(),
            &TerminalClaim::brownian_abs(),
        )
        .unwrap(),
    ];
    let mut seen = 0;
    for line in lines {
        let mut f = line.rsplitn(3, ',');
        let value: f64 = f.next().unwrap().parse().unwrap();
        let hash = f.next().unwrap();
        let label = f.next().unwrap();
        let r = recomputed.iter().find(|r| r.label == label).expect("known oracle");
        assert_eq!(r.params_hash(), hash, "{label}");
        assert_eq!(r.value(), value, "{label}");
        seen += 1;
    }
    assert_eq!(seen, recomputed.len());
    // the enumerated value is also what the recombining solver returns
    let sol = solve_bsde(&TerminalClaim::brownian_abs(), &Generator::emu(1.0), &b12).unwrap();
    assert_eq!(sol.root_value(), recomputed[1].value());
}

#[test]
fn exhaustive_matches_reflected_solver_bitwise() {
    let claims = [
        TerminalClaim::brownian_abs(),
        TerminalClaim::markov("max(B_T, 0.3)", |w| w[0].max(0.3)),
        TerminalClaim::markov("1 + sin", |w| 1.0 + (3.0 * w[0]).sin()),
    ];
    let gens = [Generator::zero(), Generator::emu(1.0), Generator::neg_emu(0.5), Generator::discount(0.1)];
    let floors = [Obstacle::none(), Obstacle::constant(0.0), Obstacle::constant(0.3)];
    for n in [1, 5, 12] {
        let (g, b) = lattice(n);
        for claim in &claims {
            for gen in &gens {
                for floor in &floors {
                    let sol = match solve_rbsde(claim, gen, floor, &b) {
                        Ok(s) => s,
                        Err(_) => {
                            assert!(exhaustive_expectation(&g, gen, floor, claim).is_err());
                            continue;
                        }
                    };
                    let ex = exhaustive_expectation(&g, gen, floor, claim).unwrap();
                    assert_eq!(
                        ex.value().to_bits(),
                        sol.root_value().to_bits(),
                        "N={n} {} {} {}",
                        claim.label(),
                        gen.label(),
                        floor.label()
                    );
                }
            }
        }
    }
}

#[test]
fn exhaustive_put_matches_lattice_put() {
    let put = put8();
    let (g, b) = lattice(8);
    let gen = Generator::discount(put.rate);
    let sol = solve_rbsde(&put.claim(), &gen, &put.floor(), &b).unwrap();
    let ex = exhaustive_expectation(&g, &gen, &put.floor(), &put.claim()).unwrap();
    assert_eq!(ex.value().to_bits(), sol.root_value().to_bits());
    assert!(!sol.k_is_zero());
}

#[test]
fn duality_by_enumeration() {
    let (g, b) = lattice(4);
    let n = 4;
    let cases: [(fn(f64) -> f64, fn(f64) -> f64, f64); 3] = [
        (|w| w, |w| w, 1.0),
        (|w| w.abs(), |w| w * w, 0.5),
        (|w| w.max(0.0), |_| 2.0, 2.0),
    ];
    for (x, y, mu) in cases {
        for t in 0..=n {
            let none = Obstacle::none();
            let lhs = exhaustive_tree(
                &g,
                &Generator::neg_emu(mu),
                &none,
                |nodes| x(w_at(&g, n, nodes[n])) + y(w_at(&g, t, nodes[t])),
                t,
            )
            .unwrap();
            let neg = exhaustive_tree(&g, &Generator::emu(mu), &none, |nodes| -x(w_at(&g, n, nodes[n])), t).unwrap();
            for p in 0..1usize << t {
                let yv = y(w_at(&g, t, p.count_ones() as usize));
                assert!((lhs[p] - (yv - neg[p])).abs() <= 1e-12, "t={t} p={p}");
            }
            let shift = b.map_positions(t, |w| y(w[0]));
            let claim = TerminalClaim::markov("x", move |w| x(w[0]));
            assert!(duality_check(&claim, &shift, mu, &b, t).unwrap() <= 1e-12);
        }
    }
}

#[test]
fn moment_bound_by_enumeration() {
    let n = 8;
    let (g, b) = lattice(n);
    let leaf_abs = |nodes: &[usize]| w_at(&g, n, nodes[n]).abs();
    for (p, mu) in [(2.0, 1.0), (1.5, 1.0), (2.0, 0.5)] {
        for t in [0, 3, 8] {
            let y = exhaustive_tree(&g, &Generator::emu(mu), &Obstacle::none(), leaf_abs, t).unwrap();
            let lhs = y.iter().map(|v| v.powf(p)).sum::<f64>() / y.len() as f64;
            let xp = (0..1usize << n)
                .map(|q| w_at(&g, n, q.count_ones() as usize).abs().powf(p))
                .sum::<f64>()
                / (1usize << n) as f64;
            let rhs = moment_factor(p, mu, g.remaining(t)) * xp;
            assert!(lhs <= rhs * (1.0 + 1e-6), "p={p} mu={mu} t={t}: {lhs} > {rhs}");
            let rep = moment_bound_check(&TerminalClaim::brownian_abs(), mu, p, &b, t).unwrap();
            assert!(rep.pass);
            assert!((rep.lhs - lhs).abs() <= 1e-12 * lhs.max(1.0));
        }
    }
}

#[test]
fn h1_domination_by_enumeration() {
    let n = 6;
    let (g, b) = lattice(n);
    let op = RbsdeOperator::new(b.clone(), Generator::emu(1.0), Obstacle::constant(0.0));
    let x = |w: f64| (w - 0.2).abs();
    let y = |w: f64| w * w + 0.1;
    let floor = Obstacle::constant(0.0);
    for t in 0..=n {
        let gen = Generator::emu(1.0);
        let xy = exhaustive_tree(&g, &gen, &floor, |nd| x(w_at(&g, n, nd[n])) + y(w_at(&g, n, nd[n])), t).unwrap();
        let xx = exhaustive_tree(&g, &gen, &floor, |nd| x(w_at(&g, n, nd[n])), t).unwrap();
        let yy = exhaustive_tree(&g, &gen, &Obstacle::none(), |nd| y(w_at(&g, n, nd[n])), t).unwrap();
        for p in 0..1usize << t {
            assert!(xy[p] - xx[p] <= yy[p] + 1e-12, "t={t} p={p}");
        }
        // the recombining operator agrees node by node
        let xv = b.map_positions(n, |w| x(w[0]) + y(w[0]));
        let e = op.eval(t, &xv).unwrap();
        for p in 0..1usize << t {
            assert!((e.get(node_of(p, t, t)) - xy[p]).abs() <= 1e-12);
        }
    }
}

/// `Y + K` is a martingale of the unreflected operator: enumerate every path
/// with leaf `X + K_N`, roll back without the floor and subtract `K_s`.
#[test]
fn doob_meyer_by_enumeration() {
    let put = put8();
    let n = put.steps;
    let (g, b) = lattice(n);
    let falling = Obstacle::new("1.5 - t", 1.5, true, 1.0, 1, |t, _| 1.5 - t).unwrap();
    let kinked = TerminalClaim::markov("max(|B_T|, 0.5)", |w| w[0].abs().max(0.5));
    let cases = [
        (put.claim(), put.floor(), Generator::zero()),
        (put.claim(), put.floor(), Generator::emu(1.0)),
        (kinked.clone(), falling.clone(), Generator::zero()),
        (kinked, falling, Generator::emu(1.0)),
    ];
    let mut active = 0;
    for (claim, floor, gen) in &cases {
        let sol = solve_rbsde(claim, gen, floor, &b).unwrap();
        let xn = sol.y(n).clone();
        let dk: Vec<StepValues> = (0..n).map(|j| sol.dk(j).clone()).collect();
        let k_along = |nodes: &[usize], upto: usize| -> f64 { (0..upto).map(|j| dk[j].get(nodes[j])).sum() };
        let rolled = exhaustive_tree(
            &g,
            &gen,
            &Obstacle::none(),
            |nodes| xn.get(nodes[n]) + k_along(nodes, n),
            0,
        )
        .unwrap();
        assert!((rolled[0] - sol.y(0).get(0) - sol.expected_k(&b, 0)).abs() <= 1e-12);
        for s in [0, 3, 5, n] {
            let v = exhaustive_tree(&g, &gen, &Obstacle::none(), |nodes| xn.get(nodes[n]) + k_along(nodes, n), s).unwrap();
            for (p, vp) in v.iter().enumerate() {
                let nodes: Vec<usize> = (0..=s).map(|k| node_of(p, s, k)).collect();
                let ks = k_along(&nodes, s);
                assert!((vp - ks - sol.y(s).get(nodes[s])).abs() <= 1e-12, "{} s={s} p={p}", gen.label());
            }
        }
        if sol.expected_k(&b, n) > 0.0 {
            active += 1;
        }
    }
    assert!(active >= 2, "reflection must be active in some cases");
}
