use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbsde-lab")).args(args).output().unwrap()
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn solve_emu_linear_claim_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "a.conf",
        "# closed form w + mu (T - t)\ngrid.T = 1\ngrid.N = 16\ngenerator.name = emu\ngenerator.params = 1.0\nclaim.name = brownian\n",
    );
    let out_path = dir.path().join("y.csv");
    let out = run(&["solve", cfg.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert!(!text.contains('\r'));
    assert!(text.starts_with("step,t,mean_y,mean_abs_z,mean_k\n"));
    let r = rows(&text);
    assert_eq!(r.len(), 17);
    for row in &r {
        let t: f64 = row[1].parse().unwrap();
        let y: f64 = row[2].parse().unwrap();
        assert!((y - (1.0 - t)).abs() <= 1e-12, "{row:?}");
        assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn misdeclared_mu_fails_checks_with_exit_one() {
    let dir = TempDir::new().unwrap();
    let base = "grid.N = 8\ngenerator.name = emu\ngenerator.params = 2\nfloor.name = constant\nfloor.params = 0\n\
                claim.name = abs\ncheck.axioms = H1\ncheck.trials = 4\n";
    let bad = write(dir.path(), "bad.conf", &format!("{base}check.mu = 1\n"));
    let out = run(&["check-axioms", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(rows(&stdout).iter().any(|r| r[4] == "false" && r[2].parse::<f64>().unwrap() > 0.0));

    let good = write(dir.path(), "good.conf", &format!("{base}check.mu = 2\n"));
    assert_eq!(run(&["check-axioms", good.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let cases = [
        ("check-axioms", "generator.name = zero\nclaim.name = abs\ncheck.axioms =\n"),
        ("solve", "generator.name = zero\nclaim.name = abs\nbogus = 1\n"),
        ("solve", "claim.name = abs\n"),
        ("convergence", "generator.name = zero\nclaim.name = square\nconvergence.n_list = 8\n"),
        ("solve", "generator.name = zero\nfloor.name = constant\nfloor.params = 1\nclaim.name = abs\n"),
    ];
    for (k, (cmd, text)) in cases.iter().enumerate() {
        let cfg = write(dir.path(), &format!("c{k}.conf"), text);
        let out = run(&[cmd, cfg.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "case {k}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(run(&["solve", "/nonexistent/config"]).status.code(), Some(2));
}

#[test]
fn degenerate_regression_exits_three() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "d.conf",
        "backend = ensemble\nensemble.M = 2\ngrid.N = 3\nregression.ridge = 0\ngenerator.name = zero\nclaim.name = abs\n",
    );
    assert_eq!(run(&["solve", cfg.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn convergence_of_exact_instance_has_zero_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.conf",
        "generator.name = zero\nclaim.name = square\nconvergence.n_list = 2,4,8,16,32\n",
    );
    let out = run(&["convergence", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("N,y0,abs_err\n"));
    for r in rows(&text) {
        assert!(r[2].parse::<f64>().unwrap() <= 1e-12);
    }
}

#[test]
fn price_american_reports_oracle() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "p.conf", "grid.N = 200\noracle.steps = 500\n");
    let out = run(&["price-american", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let r = &rows(&text)[0];
    assert_eq!(r[0], "lattice");
    assert_eq!(r[3], "6.08881011070329");
    assert!(r[4].parse::<f64>().unwrap() < 0.01);
}

#[test]
fn seed_override_changes_ensemble_output_only_through_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "s.conf",
        "backend = ensemble\nensemble.M = 500\ngrid.N = 4\ngenerator.name = emu\ngenerator.params = 1\nclaim.name = abs\nensemble.seed = 5\n",
    );
    let c = cfg.to_str().unwrap();
    let a = run(&["solve", c]).stdout;
    let b = run(&["solve", c, "--seed", "5"]).stdout;
    let d = run(&["solve", c, "--seed", "6"]).stdout;
    assert_eq!(a, b);
    assert_ne!(a, d);
}

#[test]
fn extend_and_doob_meyer_commands() {
    let dir = TempDir::new().unwrap();
    let ext = write(
        dir.path(),
        "e.conf",
        "grid.N = 10\ngenerator.name = emu\ngenerator.params = 1\nfloor.name = constant\nfloor.params = 0\n\
         claim.name = brownian\nextend.t = 2\nextend.schedule = 0,1,2,4,8\n",
    );
    let out = run(&["extend", ext.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(rows(&String::from_utf8(out.stdout).unwrap()).len(), 5);

    let dm = write(
        dir.path(),
        "d.conf",
        "grid.N = 8\ngenerator.name = zero\nfloor.name = put\nclaim.name = put\n",
    );
    let out = run(&["doob-meyer", dm.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn convergence_errors_shrink_under_doubling() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.conf",
        "generator.name = emu\ngenerator.params = 1\nclaim.name = abs\nconvergence.n_list = 4,8,16,32,64,128,256\n",
    );
    let out = run(&["convergence", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let errs: Vec<f64> = rows(&String::from_utf8(out.stdout).unwrap())
        .iter()
        .map(|r| r[2].parse().unwrap())
        .collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
}
