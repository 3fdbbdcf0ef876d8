//! Replication harness: generate, fit, score against the generating truth,
//! and render per-cell RMSE tables.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit, FactorInit, FitOptions};
use crate::model::Hyperparams;
use crate::numeric::Mat;
use crate::sim::{generate, Scenario, ScenarioConfig};

/// How per-replication errors are pooled into one number per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the per-replication RMSEs (the reporting convention here).
    #[default]
    MeanOfRmse,
    /// RMSE of the pooled squared errors across replications.
    Pooled,
}

/// Grid specification for a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scenario: Scenario,
    pub ks: Vec<usize>,
    /// (n, p) pairs.
    pub shapes: Vec<(usize, usize)>,
    pub replications: usize,
    pub base_seed: u64,
    #[serde(default = "default_alpha1")]
    pub alpha1: f64,
    #[serde(default = "default_alpha2")]
    pub alpha2: f64,
    #[serde(default = "default_pi0")]
    pub pi0: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer_iter: usize,
    #[serde(default = "default_tol")]
    pub elbo_rel_tol: f64,
    #[serde(default)]
    pub factor_init: FactorInit,
    /// Worker threads for the replication pool; 0 means all available.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Rotate factor/loading estimates onto the truth (orthogonal
    /// Procrustes) before scoring. Off by default: raw elementwise scoring.
    #[serde(default)]
    pub align: bool,
}

fn default_alpha1() -> f64 {
    1.0
}
fn default_alpha2() -> f64 {
    1.0
}
fn default_pi0() -> f64 {
    0.5
}
fn default_max_outer() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-6
}

impl BenchConfig {
    /// Desk-scale default: scenario 2 with the Beta(2, 3) prior matched to
    /// the generator, 100 replications, (n, p) = (50, 100), k in {2, 5}.
    pub fn desk_default() -> Self {
        BenchConfig {
            scenario: Scenario::S2,
            ks: vec![2, 5],
            shapes: vec![(50, 100)],
            replications: 100,
            base_seed: 20240101,
            alpha1: 2.0,
            alpha2: 3.0,
            pi0: 0.5,
            max_outer_iter: 200,
            elbo_rel_tol: 1e-6,
            factor_init: FactorInit::Zero,
            threads: 0,
            aggregation: Aggregation::MeanOfRmse,
            align: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Validation("replications must be at least 1".into()));
        }
        if self.ks.is_empty() || self.shapes.is_empty() {
            return Err(Error::Validation("the (k, shape) grid is empty".into()));
        }
        for &(n, p) in &self.shapes {
            if n == 0 || p == 0 {
                return Err(Error::Validation("shapes must be positive".into()));
            }
            for &k in &self.ks {
                if k >= p {
                    return Err(Error::Validation(format!("k = {k} must be below p = {p}")));
                }
            }
        }
        Ok(())
    }
}

/// One grid cell of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub scenario: Scenario,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub rmse_beta0: f64,
    pub rmse_eta: f64,
    pub rmse_b: f64,
    pub rmse_f: f64,
    pub n_converged: usize,
    pub replications: usize,
    /// Wall-clock seconds for the cell; reported on stdout only, never in
    /// the deterministic artifacts.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub cells: Vec<CellRecord>,
}

/// Root mean squared elementwise difference; no alignment, no weighting.
pub fn rmse_slices(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() || truth.is_empty() {
        return Err(Error::Validation(format!(
            "rmse: shapes disagree ({} vs {})",
            truth.len(),
            estimate.len()
        )));
    }
    let ss: f64 = truth
        .iter()
        .zip(estimate)
        .map(|(t, e)| (e - t) * (e - t))
        .sum();
    Ok((ss / truth.len() as f64).sqrt())
}

/// Grid form of [`rmse_slices`]; shapes must match exactly.
pub fn rmse(truth: &Mat, estimate: &Mat) -> Result<f64> {
    if truth.rows() != estimate.rows() || truth.cols() != estimate.cols() {
        return Err(Error::Validation("rmse: grid shapes disagree".into()));
    }
    rmse_slices(truth.as_slice(), estimate.as_slice())
}

struct RepScore {
    se_beta0: f64,
    se_eta: f64,
    se_b: f64,
    se_f: f64,
    len_beta0: usize,
    len_eta: usize,
    len_b: usize,
    len_f: usize,
    converged: bool,
}

fn sum_sq(truth: &[f64], est: &[f64]) -> f64 {
    truth.iter().zip(est).map(|(t, e)| (e - t) * (e - t)).sum()
}

/// Orthogonal Procrustes rotation aligning `estimate` onto `truth`
/// (columns assumed comparable); returns the rotated estimate.
fn procrustes_align(estimate: &Mat, truth: &Mat) -> Mat {
    let (rows, k) = (estimate.rows(), estimate.cols());
    if k == 0 || rows == 0 {
        return estimate.clone();
    }
    let e = DMatrix::from_fn(rows, k, |i, j| estimate.get(i, j));
    let t = DMatrix::from_fn(rows, k, |i, j| truth.get(i, j));
    let cross = e.transpose() * t;
    let svd = cross.svd(true, true);
    let rot = svd.u.unwrap() * svd.v_t.unwrap();
    let aligned = e * rot;
    Mat::from_fn(rows, k, |i, j| aligned[(i, j)])
}

fn run_replication(config: &BenchConfig, n: usize, p: usize, k: usize, rep: usize) -> Result<RepScore> {
    let seed = config.base_seed.wrapping_add(rep as u64);
    let ds = generate(&ScenarioConfig {
        scenario: config.scenario,
        n,
        p,
        k,
        seed,
    })?;
    let hyper = Hyperparams {
        k,
        sigma_beta: vec![1.0; k],
        alpha1: config.alpha1,
        alpha2: config.alpha2,
        pi0: config.pi0,
    };
    let opts = FitOptions {
        max_outer_iter: config.max_outer_iter,
        elbo_rel_tol: config.elbo_rel_tol,
        seed,
        jacobi_parallel: false,
        factor_init: config.factor_init,
    };
    let result = fit(&ds.counts, &hyper, &opts)?;

    let (b_hat, f_hat) = if config.align {
        (
            procrustes_align(&result.theta_hat.b, &ds.truth_theta.b),
            procrustes_align(&result.f_hat, &ds.truth_latent.f),
        )
    } else {
        (result.theta_hat.b.clone(), result.f_hat.clone())
    };

    Ok(RepScore {
        se_beta0: sum_sq(&ds.truth_theta.beta0, &result.theta_hat.beta0),
        se_eta: sum_sq(&ds.truth_theta.eta, &result.theta_hat.eta),
        se_b: sum_sq(ds.truth_theta.b.as_slice(), b_hat.as_slice()),
        se_f: sum_sq(ds.truth_latent.f.as_slice(), f_hat.as_slice()),
        len_beta0: p,
        len_eta: p,
        len_b: p * k,
        len_f: n * k,
        converged: result.converged,
    })
}

fn aggregate(scores: &[RepScore], pick: impl Fn(&RepScore) -> (f64, usize), how: Aggregation) -> f64 {
    match how {
        Aggregation::MeanOfRmse => {
            let total: f64 = scores
                .iter()
                .map(|s| {
                    let (ss, len) = pick(s);
                    (ss / len as f64).sqrt()
                })
                .sum();
            total / scores.len() as f64
        }
        Aggregation::Pooled => {
            let (ss, len) = scores.iter().fold((0.0, 0usize), |(a, l), s| {
                let (ss, len) = pick(s);
                (a + ss, l + len)
            });
            (ss / len as f64).sqrt()
        }
    }
}

/// Run the full grid. Replication seeds are fixed by index, and per-cell
/// aggregation runs in index order, so the report is a pure function of the
/// configuration regardless of the worker pool.
pub fn run_benchmark(config: &BenchConfig) -> Result<RmseReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Validation(format!("worker pool: {e}")))?;

    let mut cells = Vec::new();
    for &(n, p) in &config.shapes {
        for &k in &config.ks {
            let start = Instant::now();
            let scores: Vec<Result<RepScore>> = pool.install(|| {
                (0..config.replications)
                    .into_par_iter()
                    .map(|rep| run_replication(config, n, p, k, rep))
                    .collect()
            });
            let scores: Vec<RepScore> = scores.into_iter().collect::<Result<_>>()?;
            let n_converged = scores.iter().filter(|s| s.converged).count();
            cells.push(CellRecord {
                scenario: config.scenario,
                n,
                p,
                k,
                rmse_beta0: aggregate(&scores, |s| (s.se_beta0, s.len_beta0), config.aggregation),
                rmse_eta: aggregate(&scores, |s| (s.se_eta, s.len_eta), config.aggregation),
                rmse_b: aggregate(&scores, |s| (s.se_b, s.len_b), config.aggregation),
                rmse_f: aggregate(&scores, |s| (s.se_f, s.len_f), config.aggregation),
                n_converged,
                replications: config.replications,
                wall_time_secs: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(RmseReport { cells })
}

fn fmt10(v: f64) -> String {
    format!("{v:.9e}")
}

impl RmseReport {
    /// Deterministic CSV (intercepts, zero-inflation, loadings, factors).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,n,p,k,rmse_beta0,rmse_eta,rmse_B,rmse_F,n_converged,replications\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                c.scenario,
                c.n,
                c.p,
                c.k,
                fmt10(c.rmse_beta0),
                fmt10(c.rmse_eta),
                fmt10(c.rmse_b),
                fmt10(c.rmse_f),
                c.n_converged,
                c.replications
            ));
        }
        out
    }

    /// Aligned text table in the same column order.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<9} {:>5} {:>5} {:>3} {:>12} {:>12} {:>12} {:>12} {:>10}\n",
            "scenario", "n", "p", "k", "beta0", "eta", "B", "F", "converged"
        ));
        for c in &self.cells {
            out.push_str(&format!(
                "{:<9} {:>5} {:>5} {:>3} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>7}/{:<3}\n",
                c.scenario.to_string(),
                c.n,
                c.p,
                c.k,
                c.rmse_beta0,
                c.rmse_eta,
                c.rmse_b,
                c.rmse_f,
                c.n_converged,
                c.replications
            ));
        }
        out
    }
}
