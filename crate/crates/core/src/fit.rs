//! Classification variational fit: initialization, the hard zero-inflation
//! classification step, block-coordinate sweeps, convergence, and the final
//! posterior-mean estimators.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    beta0_block, gamma1_block, gamma2_block, lambda2_block, m_block, r_block, sigma2_block,
    GAMMA_FLOOR, VAR_CEIL, VAR_FLOOR,
};
use crate::elbo::{elbo_lpnm, pi_hat, VariationalParams};
use crate::error::{Error, Result};
use crate::model::{underlying_compositions, CountMatrix, Hyperparams, ModelParams};
use crate::numeric::Mat;
use crate::optim::{bounded_quasi_newton, BlockProblem};

/// Projected-gradient tolerance and iteration cap for each block solve.
const BLOCK_TOL: f64 = 1e-6;
const BLOCK_MAX_ITER: usize = 200;

/// How the loading/factor means are seeded.
///
/// `Zero` starts both at the prior mean. The all-zero point is an exact
/// stationary point of the block updates, so the fitted loadings and factors
/// stay at zero; this matches the behavior of the original R implementation
/// on simulated data and is the default. `Spectral` seeds them from a
/// truncated SVD of the standardized log1p counts and actually pursues the
/// factor structure; use it for exploratory factor analysis on real data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorInit {
    #[default]
    Zero,
    Spectral,
}

/// Outer-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_outer_iter: usize,
    pub elbo_rel_tol: f64,
    pub seed: u64,
    /// Solve independent blocks within a sweep stage against a frozen
    /// snapshot (Jacobi) instead of sequentially (Gauss-Seidel).
    pub jacobi_parallel: bool,
    pub factor_init: FactorInit,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_outer_iter: 200,
            elbo_rel_tol: 1e-6,
            seed: 0,
            jacobi_parallel: false,
            factor_init: FactorInit::Zero,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iter == 0 {
            return Err(Error::Validation("max_outer_iter must be at least 1".into()));
        }
        if !(self.elbo_rel_tol > 0.0) {
            return Err(Error::Validation("elbo_rel_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Fit output: point estimates, the variational state, and convergence
/// diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ModelParams,
    pub delta_hat: VariationalParams,
    /// n x p estimated compositions (rows sum to one).
    pub rho_hat: Mat,
    /// n x k factor estimates (the variational means).
    pub f_hat: Mat,
    /// Bound value recorded after the intercept step of each outer iteration.
    pub elbo_trace: Vec<f64>,
    /// Bound value (after classification, after the full sweep) per outer
    /// iteration; the classification step itself may move the bound either
    /// way, the span between these two may not decrease.
    pub sweep_elbo: Vec<(f64, f64)>,
    pub outer_iterations: usize,
    pub converged: bool,
}

/// Initial variational state and intercepts, using the default factor seed.
pub fn initialize(counts: &CountMatrix, hyper: &Hyperparams, seed: u64) -> Result<(VariationalParams, Vec<f64>)> {
    initialize_with(counts, hyper, seed, FactorInit::default())
}

/// Initial state: intercepts from smoothed column abundances (centered),
/// Beta parameters from per-column zero counts, variances at 0.5, Bernoulli
/// means 0.5 on the zero cells, and factor/loading means per `factor_init`.
pub fn initialize_with(
    counts: &CountMatrix,
    hyper: &Hyperparams,
    seed: u64,
    factor_init: FactorInit,
) -> Result<(VariationalParams, Vec<f64>)> {
    let _ = seed; // all initialization paths are deterministic in the data
    let (n, p, k) = (counts.n(), counts.p(), hyper.k);
    hyper.validate(p)?;

    let col_sums = counts.col_sums();
    let total: f64 = col_sums.iter().map(|&c| c as f64 + 0.5).sum();
    let mut beta0: Vec<f64> = col_sums
        .iter()
        .map(|&c| ((c as f64 + 0.5) / total).ln())
        .collect();
    let mean = beta0.iter().sum::<f64>() / p as f64;
    for b in &mut beta0 {
        *b -= mean;
    }

    let (m, r) = match factor_init {
        FactorInit::Zero => (Mat::zeros(n, k), Mat::zeros(p, k)),
        FactorInit::Spectral => spectral_seed(counts, k),
    };

    let pi = Mat::from_fn(n, p, |i, j| if counts.get(i, j) == 0 { 0.5 } else { 0.0 });
    let gamma1: Vec<f64> = (0..p)
        .map(|j| hyper.alpha1 + counts.col_zero_count(j) as f64)
        .collect();
    let gamma2: Vec<f64> = (0..p)
        .map(|j| hyper.alpha2 + (n - counts.col_zero_count(j)) as f64)
        .collect();

    Ok((
        VariationalParams {
            pi,
            r,
            lambda2: Mat::filled(p, k, 0.5),
            m,
            sigma2: Mat::filled(n, k, 0.5),
            gamma1,
            gamma2,
        },
        beta0,
    ))
}

/// Top-k left/right factors of the column-standardized log1p count matrix,
/// with the singular values split evenly between the two sides.
fn spectral_seed(counts: &CountMatrix, k: usize) -> (Mat, Mat) {
    let (n, p) = (counts.n(), counts.p());
    let mut y = DMatrix::<f64>::from_fn(n, p, |i, j| (counts.get(i, j) as f64).ln_1p());
    for j in 0..p {
        let mean = y.column(j).sum() / n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let c = y[(i, j)] - mean;
            y[(i, j)] = c;
            var += c * c;
        }
        let sd = (var / n as f64).sqrt();
        if sd > 1e-12 {
            for i in 0..n {
                y[(i, j)] /= sd;
            }
        }
    }
    let svd = y.svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let available = svd.singular_values.len().min(k);
    let mut m = Mat::zeros(n, k);
    let mut r = Mat::zeros(p, k);
    for l in 0..available {
        let sv = svd.singular_values[l];
        // A (near-)zero singular value leaves the direction undefined.
        if !(sv > 1e-12) {
            continue;
        }
        let scale = sv.sqrt();
        for i in 0..n {
            m.set(i, l, scale * u[(i, l)]);
        }
        for j in 0..p {
            r.set(j, l, scale * v_t[(l, j)]);
        }
    }
    (m, r)
}

/// Hard classification of the zero-inflation probabilities at threshold
/// `pi0` (inclusive).
pub fn classify_pi(pi_hat_grid: &Mat, pi0: f64) -> Mat {
    Mat::from_fn(pi_hat_grid.rows(), pi_hat_grid.cols(), |i, j| {
        if pi_hat_grid.get(i, j) >= pi0 {
            1.0
        } else {
            0.0
        }
    })
}

/// If classification masked every taxon of some sample, revert the cell
/// whose posterior zero probability is smallest. Returns how many rows were
/// repaired.
pub fn repair_degenerate_rows(pi: &mut Mat, pi_hat_grid: &Mat) -> usize {
    let mut repaired = 0;
    for i in 0..pi.rows() {
        if pi.row(i).iter().all(|&v| v >= 1.0) {
            let mut best = 0;
            let mut best_val = f64::INFINITY;
            for j in 0..pi.cols() {
                let v = pi_hat_grid.get(i, j);
                if v < best_val {
                    best_val = v;
                    best = j;
                }
            }
            pi.set(i, best, 0.0);
            repaired += 1;
        }
    }
    repaired
}

/// Posterior-mean estimate of the zero-inflation probabilities.
pub fn estimate_eta(gamma1: &[f64], gamma2: &[f64]) -> Result<Vec<f64>> {
    if gamma1.len() != gamma2.len() {
        return Err(Error::Validation("gamma vectors differ in length".into()));
    }
    if gamma1.iter().chain(gamma2).any(|&g| !(g > 0.0)) {
        return Err(Error::Validation("gamma parameters must be positive".into()));
    }
    Ok(gamma1
        .iter()
        .zip(gamma2)
        .map(|(&g1, &g2)| g1 / (g1 + g2))
        .collect())
}

enum Stage {
    Gamma1,
    Gamma2,
    R,
    Lambda2,
    M,
    Sigma2,
}

fn stage_indices(stage: &Stage, n: usize, p: usize) -> usize {
    match stage {
        Stage::M | Stage::Sigma2 => n,
        _ => p,
    }
}

fn build_stage_block(
    stage: &Stage,
    idx: usize,
    counts: &CountMatrix,
    delta: &VariationalParams,
    beta0: &[f64],
    hyper: &Hyperparams,
) -> BlockProblem {
    match stage {
        Stage::Gamma1 => gamma1_block(idx, counts, delta, hyper),
        Stage::Gamma2 => gamma2_block(idx, counts, delta, hyper),
        Stage::R => r_block(idx, counts, delta, beta0, hyper),
        Stage::Lambda2 => lambda2_block(idx, counts, delta, beta0, hyper),
        Stage::M => m_block(idx, counts, delta, beta0, hyper),
        Stage::Sigma2 => sigma2_block(idx, counts, delta, beta0, hyper),
    }
}

fn stage_point(stage: &Stage, idx: usize, delta: &VariationalParams) -> Vec<f64> {
    match stage {
        Stage::Gamma1 => vec![delta.gamma1[idx].max(GAMMA_FLOOR)],
        Stage::Gamma2 => vec![delta.gamma2[idx].max(GAMMA_FLOOR)],
        Stage::R => delta.r.row(idx).to_vec(),
        Stage::Lambda2 => delta
            .lambda2
            .row(idx)
            .iter()
            .map(|v| v.clamp(VAR_FLOOR, VAR_CEIL))
            .collect(),
        Stage::M => delta.m.row(idx).to_vec(),
        Stage::Sigma2 => delta
            .sigma2
            .row(idx)
            .iter()
            .map(|v| v.clamp(VAR_FLOOR, VAR_CEIL))
            .collect(),
    }
}

fn store_stage_solution(stage: &Stage, idx: usize, delta: &mut VariationalParams, solution: Vec<f64>) {
    match stage {
        Stage::Gamma1 => delta.gamma1[idx] = solution[0],
        Stage::Gamma2 => delta.gamma2[idx] = solution[0],
        Stage::R => delta.r.row_mut(idx).copy_from_slice(&solution),
        Stage::Lambda2 => delta.lambda2.row_mut(idx).copy_from_slice(&solution),
        Stage::M => delta.m.row_mut(idx).copy_from_slice(&solution),
        Stage::Sigma2 => delta.sigma2.row_mut(idx).copy_from_slice(&solution),
    }
}

fn solve_block(problem: &BlockProblem, x0: &[f64], context: &str) -> Result<Vec<f64>> {
    let report = bounded_quasi_newton(problem, x0, BLOCK_TOL, BLOCK_MAX_ITER)
        .map_err(|e| Error::NonFinite(format!("{context}: {e}")))?;
    Ok(report.solution)
}

fn run_stage(
    stage: Stage,
    counts: &CountMatrix,
    delta: &mut VariationalParams,
    beta0: &[f64],
    hyper: &Hyperparams,
    jacobi: bool,
    outer: usize,
) -> Result<()> {
    let count = stage_indices(&stage, counts.n(), counts.p());
    if jacobi {
        // Every block of the stage sees the same frozen snapshot.
        let snapshot = delta.clone();
        let solutions: Vec<Result<Vec<f64>>> = (0..count)
            .into_par_iter()
            .map(|idx| {
                let problem = build_stage_block(&stage, idx, counts, &snapshot, beta0, hyper);
                let x0 = stage_point(&stage, idx, &snapshot);
                solve_block(&problem, &x0, &format!("outer {outer}, block {idx}"))
            })
            .collect();
        for (idx, sol) in solutions.into_iter().enumerate() {
            store_stage_solution(&stage, idx, delta, sol?);
        }
    } else {
        for idx in 0..count {
            let problem = build_stage_block(&stage, idx, counts, delta, beta0, hyper);
            let x0 = stage_point(&stage, idx, delta);
            let sol = solve_block(&problem, &x0, &format!("outer {outer}, block {idx}"))?;
            store_stage_solution(&stage, idx, delta, sol);
        }
    }
    Ok(())
}

/// Run the classification variational fit to convergence.
pub fn fit(counts: &CountMatrix, hyper: &Hyperparams, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    hyper.validate(counts.p())?;
    let (mut delta, mut beta0) = initialize_with(counts, hyper, opts.seed, opts.factor_init)?;

    let mut elbo_trace = Vec::new();
    let mut sweep_elbo = Vec::new();
    let mut converged = false;
    let mut outer = 0;
    let mut prev = None;

    while outer < opts.max_outer_iter {
        outer += 1;

        // (a) classification of the zero-inflation indicators
        let pihat = pi_hat(counts, &delta, &beta0)?;
        let mut new_pi = classify_pi(&pihat, hyper.pi0);
        repair_degenerate_rows(&mut new_pi, &pihat);
        if (0..new_pi.rows()).any(|i| new_pi.row(i).iter().all(|&v| v >= 1.0)) {
            return Err(Error::DegenerateSupport(format!(
                "outer {outer}: a sample lost all support even after repair"
            )));
        }
        delta.pi = new_pi;

        let elbo_pre = elbo_lpnm(counts, &delta, &beta0, hyper)?.total;
        if !elbo_pre.is_finite() {
            return Err(Error::NonFinite(format!(
                "outer {outer}: bound became non-finite after classification (trace so far: {elbo_trace:?})"
            )));
        }

        // (b) variational block sweeps
        for stage in [Stage::Gamma1, Stage::Gamma2, Stage::R, Stage::Lambda2, Stage::M, Stage::Sigma2] {
            run_stage(stage, counts, &mut delta, &beta0, hyper, opts.jacobi_parallel, outer)?;
        }

        // (c) joint intercept update, then remove the softmax shift degeneracy
        let problem = beta0_block(counts, &delta);
        let solution = solve_block(&problem, &beta0, &format!("outer {outer}, intercepts"))?;
        let mean = solution.iter().sum::<f64>() / solution.len() as f64;
        beta0 = solution.into_iter().map(|v| v - mean).collect();

        let elbo_post = elbo_lpnm(counts, &delta, &beta0, hyper)?.total;
        if !elbo_post.is_finite() {
            return Err(Error::NonFinite(format!(
                "outer {outer}: bound became non-finite after the sweep (trace so far: {elbo_trace:?})"
            )));
        }
        elbo_trace.push(elbo_post);
        sweep_elbo.push((elbo_pre, elbo_post));

        if let Some(last) = prev {
            let delta_elbo: f64 = elbo_post - last;
            if delta_elbo.abs() / elbo_post.abs().max(f64::MIN_POSITIVE) < opts.elbo_rel_tol {
                converged = true;
                break;
            }
        }
        prev = Some(elbo_post);
    }

    let eta = estimate_eta(&delta.gamma1, &delta.gamma2)?;
    let rho_hat = underlying_compositions(&beta0, &delta.r, &delta.m)?;
    let theta_hat = ModelParams {
        beta0,
        b: delta.r.clone(),
        eta,
    };
    Ok(FitResult {
        f_hat: delta.m.clone(),
        delta_hat: delta,
        rho_hat,
        theta_hat,
        elbo_trace,
        sweep_elbo,
        outer_iterations: outer,
        converged,
    })
}
