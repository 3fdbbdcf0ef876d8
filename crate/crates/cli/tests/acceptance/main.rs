//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line with its measured quantities.
//!
//! Reference RMSE targets for the scenario-2 grid come from the published
//! simulation tables of the original method at 1000 replications; the bands
//! here account for running 100.

mod oracle;

use std::fs;
use std::process::Command;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use zippca_core::blocks::run_gradient_checks;
use zippca_core::special::ln_factorial;
use zippca_core::{
    alpha0_hat, elbo_lpnm, elbo_poisson, fit, generate, initialize, mc_elbo_oracle,
    random_variational_instance, run_benchmark, Aggregation, BenchConfig, CountMatrix, FactorInit,
    FitOptions, Hyperparams, Mat, Scenario, ScenarioConfig, VariationalParams,
};

fn report(criterion: &str, pass: bool, detail: &str, started: Instant) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!(
        "criterion {criterion}: {status} — {detail} [{:.1}s]",
        started.elapsed().as_secs_f64()
    );
}

#[test]
fn a1_gradient_fidelity() {
    let started = Instant::now();
    let results = run_gradient_checks(10, 15, 3, 100, 1e-5, 42, None).unwrap();
    let worst = results
        .iter()
        .map(|(_, e)| *e)
        .fold(0.0_f64, f64::max);
    let pass = worst < 1e-4;
    let detail = format!(
        "7 blocks x 100 points (n=10, p=15, k=3), worst relative gradient error {worst:.3e} (< 1e-4)"
    );
    report("1 (gradient fidelity)", pass, &detail, started);
    assert!(pass, "{detail}");
}

#[test]
fn a2_elbo_monte_carlo_agreement() {
    let started = Instant::now();
    let mut hits = 0;
    let mut worst_gap = 0.0_f64;
    for seed in 0..20u64 {
        let (counts, delta, beta0, hyper) = random_variational_instance(5, 8, 2, 1000 + seed);
        let analytic = elbo_lpnm(&counts, &delta, &beta0, &hyper).unwrap().total;
        let (mc, se) = mc_elbo_oracle(&counts, &delta, &beta0, &hyper, 100_000, seed).unwrap();
        let gap = (mc - analytic).abs() / se;
        worst_gap = worst_gap.max(gap);
        if gap < 3.0 {
            hits += 1;
        }
    }
    let pass = hits >= 18;
    let detail =
        format!("{hits}/20 instances within 3 standard errors at 1e5 samples (worst gap {worst_gap:.2} se)");
    report("2 (Monte-Carlo bound agreement)", pass, &detail, started);
    assert!(pass, "{detail}");
}

#[test]
fn a3_poisson_equivalence() {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    for seed in 0..50u64 {
        let (counts, delta, beta0, hyper) = random_variational_instance(4, 6, 2, 3000 + seed);
        let lpnm = elbo_lpnm(&counts, &delta, &beta0, &hyper).unwrap().total;
        let alpha0: Vec<f64> = (0..counts.n())
            .map(|i| alpha0_hat(&counts, &delta, &beta0, i).unwrap())
            .collect();
        let poisson = elbo_poisson(&counts, &delta, &beta0, &alpha0, &hyper).unwrap();
        let mut constant = 0.0;
        for i in 0..counts.n() {
            let m_i = counts.depth(i) as f64;
            constant += m_i;
            for j in 0..counts.p() {
                constant -= counts.get(i, j) as f64 * m_i.ln() - ln_factorial(counts.get(i, j));
            }
        }
        let rel = ((poisson + constant) - lpnm).abs() / lpnm.abs().max(1.0);
        worst = worst.max(rel);
    }
    let pass = worst < 1e-8;
    let detail = format!("50 instances, worst relative identity error {worst:.3e} (< 1e-8)");
    report("3 (Poisson-form equivalence)", pass, &detail, started);
    assert!(pass, "{detail}");
}

/// Tiny-instance counts: n = 2, p = 3, every depth in 1..=6, no empty column.
fn tiny_counts(rng: &mut ChaCha8Rng) -> CountMatrix {
    loop {
        let rows: Vec<Vec<u64>> = (0..2)
            .map(|_| (0..3).map(|_| rng.gen_range(0..=2u64)).collect())
            .collect();
        let depths_ok = rows.iter().all(|r| {
            let d: u64 = r.iter().sum();
            (1..=6).contains(&d)
        });
        let cols_ok = (0..3).any(|j| rows.iter().any(|r| r[j] > 0));
        if depths_ok && cols_ok {
            if let Ok(c) = CountMatrix::new(rows) {
                return c;
            }
        }
    }
}

fn tiny_delta(counts: &CountMatrix, rng: &mut ChaCha8Rng) -> (VariationalParams, Vec<f64>) {
    let (n, p, k) = (counts.n(), counts.p(), 1);
    let pi = Mat::from_fn(n, p, |i, j| {
        if counts.get(i, j) == 0 {
            rng.gen_range(0.05..0.6)
        } else {
            0.0
        }
    });
    let delta = VariationalParams {
        pi,
        r: Mat::from_fn(p, k, |_, _| rng.gen_range(-0.7..0.7)),
        lambda2: Mat::from_fn(p, k, |_, _| rng.gen_range(0.05..0.8)),
        m: Mat::from_fn(n, k, |_, _| rng.gen_range(-0.7..0.7)),
        sigma2: Mat::from_fn(n, k, |_, _| rng.gen_range(0.05..0.8)),
        gamma1: (0..p).map(|_| rng.gen_range(0.5..5.0)).collect(),
        gamma2: (0..p).map(|_| rng.gen_range(0.5..5.0)).collect(),
    };
    let mut beta0: Vec<f64> = (0..p).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let mean = beta0.iter().sum::<f64>() / p as f64;
    for b in &mut beta0 {
        *b -= mean;
    }
    (delta, beta0)
}

#[test]
fn a4_lower_bound_property() {
    let started = Instant::now();
    let hyper = Hyperparams {
        k: 1,
        sigma_beta: vec![1.0],
        alpha1: 1.5,
        alpha2: 2.5,
        pi0: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4040);
    let mut worst_slack = f64::NEG_INFINITY;
    for _ in 0..10 {
        let counts = tiny_counts(&mut rng);
        let (delta, beta0) = tiny_delta(&counts, &mut rng);
        let log_evidence = oracle::log_evidence_rank_one(&counts, &beta0, &hyper, 40);

        // Constants omitted from the working bound: Gaussian entropy halves
        // and the multinomial coefficient.
        let mut constants = 0.5 * (counts.p() as f64 + counts.n() as f64);
        for l in 0..hyper.k {
            constants -= 0.5 * counts.p() as f64 * hyper.sigma_beta[l].ln();
        }
        for i in 0..counts.n() {
            constants += ln_factorial(counts.depth(i));
            for &x in counts.row(i) {
                constants -= ln_factorial(x);
            }
        }

        for point in 0..2 {
            let (delta_point, beta0_point) = if point == 0 {
                (delta.clone(), beta0.clone())
            } else {
                let (init_delta, _) = initialize(&counts, &hyper, 0).unwrap();
                (init_delta, beta0.clone())
            };
            let bound = elbo_lpnm(&counts, &delta_point, &beta0_point, &hyper).unwrap().total + constants;
            let slack = bound - log_evidence;
            worst_slack = worst_slack.max(slack);
        }
    }
    let pass = worst_slack <= 1e-6;
    let detail = format!(
        "10 tiny instances (n=2, p=3, depths <= 6, k=1), worst bound-vs-evidence slack {worst_slack:.3e} (<= 1e-6)"
    );
    report("4 (lower-bound property)", pass, &detail, started);
    assert!(pass, "{detail}");
}

#[test]
fn a5_monotone_ascent() {
    let started = Instant::now();
    let hyper = Hyperparams {
        k: 2,
        sigma_beta: vec![1.0; 2],
        alpha1: 2.0,
        alpha2: 3.0,
        pi0: 0.5,
    };
    let mut violations = 0usize;
    let mut worst_drop = 0.0_f64;
    for seed in 0..50u64 {
        let ds = generate(&ScenarioConfig {
            scenario: Scenario::S2,
            n: 30,
            p: 40,
            k: 2,
            seed: 5000 + seed,
        })
        .unwrap();
        let result = fit(
            &ds.counts,
            &hyper,
            &FitOptions {
                seed,
                ..FitOptions::default()
            },
        )
        .unwrap();
        for (pre, post) in &result.sweep_elbo {
            if *post < pre - 1e-8 {
                violations += 1;
                worst_drop = worst_drop.max(pre - post);
            }
        }
    }
    let pass = violations == 0;
    let detail = format!(
        "50 fits (n=30, p=40, k=2): {violations} continuous-sweep decreases beyond 1e-8 (worst {worst_drop:.3e})"
    );
    report("5 (monotone ascent)", pass, &detail, started);
    assert!(pass, "{detail}");
}

struct Band {
    name: &'static str,
    value: f64,
    center: f64,
    halfwidth: f64,
}

impl Band {
    fn ok(&self) -> bool {
        (self.value - self.center).abs() <= self.halfwidth
    }

    fn describe(&self) -> String {
        format!(
            "{}={:.4} [{:.4}, {:.4}]{}",
            self.name,
            self.value,
            self.center - self.halfwidth,
            self.center + self.halfwidth,
            if self.ok() { "" } else { " <-- out of band" }
        )
    }
}

fn scenario2_bench(n: usize, p: usize, base_seed: u64) -> zippca_core::CellRecord {
    let config = BenchConfig {
        scenario: Scenario::S2,
        ks: vec![2],
        shapes: vec![(n, p)],
        replications: 100,
        base_seed,
        alpha1: 2.0,
        alpha2: 3.0,
        pi0: 0.5,
        max_outer_iter: 200,
        elbo_rel_tol: 1e-6,
        factor_init: FactorInit::Zero,
        threads: 0,
        aggregation: Aggregation::MeanOfRmse,
        align: false,
    };
    run_benchmark(&config).unwrap().cells.remove(0)
}

#[test]
fn a6_scenario2_rmse_reproduction_50x100() {
    let started = Instant::now();
    let cell = scenario2_bench(50, 100, 20240101);
    let bands = [
        Band { name: "rmse_B", value: cell.rmse_b, center: 0.3165, halfwidth: 0.03 },
        Band { name: "rmse_F", value: cell.rmse_f, center: 0.9989, halfwidth: 0.05 },
        Band { name: "rmse_beta0", value: cell.rmse_beta0, center: 1.0090, halfwidth: 0.10 },
        Band { name: "rmse_eta", value: cell.rmse_eta, center: 0.0653, halfwidth: 0.02 },
    ];
    let pass = bands.iter().all(Band::ok);
    let describes: Vec<String> = bands.iter().map(Band::describe).collect();
    let detail = format!(
        "scenario 2, (n,p)=(50,100), k=2, 100 replications: {} ({} converged)",
        describes.join("; "),
        cell.n_converged
    );
    report("6 (reference RMSE table, 50x100)", pass, &detail, started);
    assert!(pass, "{detail}");
}

#[test]
fn a7_scenario2_rmse_spot_check_100x50() {
    let started = Instant::now();
    let cell = scenario2_bench(100, 50, 20240202);
    let bands = [
        Band { name: "rmse_B", value: cell.rmse_b, center: 0.3168, halfwidth: 0.03 },
        Band { name: "rmse_F", value: cell.rmse_f, center: 0.9999, halfwidth: 0.05 },
    ];
    let pass = bands.iter().all(Band::ok);
    let describes: Vec<String> = bands.iter().map(Band::describe).collect();
    let detail = format!(
        "scenario 2, (n,p)=(100,50), k=2, 100 replications: {}",
        describes.join("; ")
    );
    report("7 (reference RMSE spot check, 100x50)", pass, &detail, started);
    assert!(pass, "{detail}");
}

#[test]
fn a8_scenario1_zero_fraction() {
    let started = Instant::now();
    let mut zero_cells = 0usize;
    let mut total_cells = 0usize;
    for seed in 0..50u64 {
        let ds = generate(&ScenarioConfig {
            scenario: Scenario::S1,
            n: 50,
            p: 100,
            k: 2,
            seed: 8000 + seed,
        })
        .unwrap();
        for i in 0..50 {
            zero_cells += ds.counts.row(i).iter().filter(|&&v| v == 0).count();
            total_cells += 100;
        }
    }
    let fraction = zero_cells as f64 / total_cells as f64;
    let pass = (0.40..=0.60).contains(&fraction);
    let detail = format!(
        "scenario 1 (n=50, p=100, k=2, 50 seeds): overall zero fraction {fraction:.4} (target [0.40, 0.60])"
    );
    report("8 (scenario-1 sparsity level)", pass, &detail, started);
    assert!(pass, "{detail}");
}

#[test]
fn a9_cli_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_zippca");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().expect("binary runs");
        assert!(
            out.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };

    // simulate twice
    let sim_a = dir.path().join("sim_a");
    let sim_b = dir.path().join("sim_b");
    for d in [&sim_a, &sim_b] {
        run(&[
            "simulate", "--scenario", "s2", "--n", "15", "--p", "25", "--k", "2", "--seed", "11",
            "--output-dir", d.to_str().unwrap(),
        ]);
    }
    let mut identical = fs::read(sim_a.join("counts.csv")).unwrap() == fs::read(sim_b.join("counts.csv")).unwrap()
        && fs::read(sim_a.join("truth.json")).unwrap() == fs::read(sim_b.join("truth.json")).unwrap();

    // fit twice
    let fit_a = dir.path().join("fit_a");
    let fit_b = dir.path().join("fit_b");
    for d in [&fit_a, &fit_b] {
        run(&[
            "fit", "--input", sim_a.join("counts.csv").to_str().unwrap(),
            "--output-dir", d.to_str().unwrap(),
            "--k", "2", "--alpha1", "2", "--alpha2", "3", "--seed", "4",
        ]);
    }
    for name in ["rho_hat.csv", "B_hat.csv", "F_hat.csv", "eta_hat.csv", "beta0_hat.csv", "elbo_trace.csv"] {
        identical &= fs::read(fit_a.join(name)).unwrap() == fs::read(fit_b.join(name)).unwrap();
    }

    // bench twice
    let cfg = dir.path().join("bench.json");
    fs::write(
        &cfg,
        r#"{"scenario":"s2","ks":[2],"shapes":[[10,16]],"replications":3,"base_seed":77,
            "alpha1":2.0,"alpha2":3.0,"threads":1,"max_outer_iter":25}"#,
    )
    .unwrap();
    let bench_a = dir.path().join("bench_a");
    let bench_b = dir.path().join("bench_b");
    for d in [&bench_a, &bench_b] {
        run(&["bench", "--config", cfg.to_str().unwrap(), "--output-dir", d.to_str().unwrap()]);
    }
    identical &= fs::read(bench_a.join("rmse_report.csv")).unwrap() == fs::read(bench_b.join("rmse_report.csv")).unwrap();
    identical &= fs::read(bench_a.join("rmse_report.txt")).unwrap() == fs::read(bench_b.join("rmse_report.txt")).unwrap();

    let detail = "repeated simulate/fit/bench runs with fixed seeds produce byte-identical outputs".to_string();
    report("9 (end-to-end determinism)", identical, &detail, started);
    assert!(identical, "outputs differed between identical runs");
}
