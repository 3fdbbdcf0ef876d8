//! The seven block-coordinate subproblems of the variational fit, each as an
//! objective/analytic-gradient pair over a snapshot of the remaining state.
//!
//! Every objective below differs from the full bound by a constant when the
//! other blocks are frozen, so block ascent is bound ascent. The closures own
//! copies of the state they need; a built problem stays valid while the
//! caller mutates the live fit state.

use std::str::FromStr;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::elbo::{log_mgf_cell, log_mgf_matrix, log_weights, VariationalParams};
use crate::error::{Error, Result};
use crate::model::{CountMatrix, Hyperparams};
use crate::numeric::{log_add_exp, log_sum_exp, Mat};
use crate::optim::{grad_check, BlockProblem};
use crate::special::{digamma, ln_beta, trigamma};

/// Lower bound for the Beta variational parameters.
pub const GAMMA_FLOOR: f64 = 1e-6;
/// Box for the variational variances.
pub const VAR_FLOOR: f64 = 1e-8;
pub const VAR_CEIL: f64 = 1.0 - 1e-8;

fn sum_pi_col(delta: &VariationalParams, j: usize) -> f64 {
    (0..delta.n()).map(|i| delta.pi.get(i, j)).sum()
}

/// First Beta parameter of q(eta_j); the partner parameter stays at its
/// latest sweep value.
pub fn gamma1_block(j: usize, counts: &CountMatrix, delta: &VariationalParams, hyper: &Hyperparams) -> BlockProblem {
    let n = counts.n() as f64;
    let s_pi = sum_pi_col(delta, j);
    let g2 = delta.gamma2[j];
    let (a1, a2) = (hyper.alpha1, hyper.alpha2);
    let objective = move |x: &[f64]| {
        let g1 = x[0];
        s_pi * digamma(g1) - n * digamma(g1 + g2)
            + (a1 - g1) * (digamma(g1) - digamma(g1 + g2))
            - (a2 - g2) * digamma(g1 + g2)
            + ln_beta(g1, g2)
    };
    let gradient = move |x: &[f64]| {
        let g1 = x[0];
        vec![
            s_pi * trigamma(g1) - n * trigamma(g1 + g2)
                + (a1 - g1) * (trigamma(g1) - trigamma(g1 + g2))
                - (a2 - g2) * trigamma(g1 + g2),
        ]
    };
    BlockProblem::new(1, objective, gradient).with_bounds(vec![GAMMA_FLOOR], vec![f64::INFINITY])
}

/// Second Beta parameter of q(eta_j), given the freshly updated first one.
pub fn gamma2_block(j: usize, counts: &CountMatrix, delta: &VariationalParams, hyper: &Hyperparams) -> BlockProblem {
    let n = counts.n() as f64;
    let s_pi = sum_pi_col(delta, j);
    let g1 = delta.gamma1[j];
    let (a1, a2) = (hyper.alpha1, hyper.alpha2);
    let objective = move |x: &[f64]| {
        let g2 = x[0];
        (n - s_pi) * digamma(g2) - n * digamma(g1 + g2)
            + (a2 - g2) * (digamma(g2) - digamma(g1 + g2))
            - (a1 - g1) * digamma(g1 + g2)
            + ln_beta(g1, g2)
    };
    let gradient = move |x: &[f64]| {
        let g2 = x[0];
        vec![
            (n - s_pi) * trigamma(g2) - n * trigamma(g1 + g2)
                + (a2 - g2) * (trigamma(g2) - trigamma(g1 + g2))
                - (a1 - g1) * trigamma(g1 + g2),
        ]
    };
    BlockProblem::new(1, objective, gradient).with_bounds(vec![GAMMA_FLOOR], vec![f64::INFINITY])
}

/// Context shared by the per-taxon (r, lambda2) builders: the log-weights of
/// all other taxa and the data slices for column j.
struct TaxonContext {
    k: usize,
    beta0_j: f64,
    /// log sum over j' != j of exp(a_ij'), per sample.
    log_rest: Vec<f64>,
    /// log(1 - pi_ij) for column j (-inf where masked).
    log_w: Vec<f64>,
    x_col: Vec<f64>,
    depths: Vec<f64>,
    m: Mat,
    sigma2: Mat,
}

fn taxon_context(j: usize, counts: &CountMatrix, delta: &VariationalParams, beta0: &[f64]) -> TaxonContext {
    let n = counts.n();
    let l_mat = log_mgf_matrix(delta).expect("variances validated upstream");
    let a = log_weights(delta, beta0, &l_mat);
    let mut log_rest = Vec::with_capacity(n);
    let mut scratch = Vec::with_capacity(counts.p() - 1);
    for i in 0..n {
        scratch.clear();
        for (jj, &v) in a.row(i).iter().enumerate() {
            if jj != j {
                scratch.push(v);
            }
        }
        log_rest.push(log_sum_exp(&scratch));
    }
    let log_w = (0..n)
        .map(|i| {
            let pi = delta.pi.get(i, j);
            if pi >= 1.0 { f64::NEG_INFINITY } else { (1.0 - pi).ln() }
        })
        .collect();
    TaxonContext {
        k: delta.k(),
        beta0_j: beta0[j],
        log_rest,
        log_w,
        x_col: (0..n).map(|i| counts.get(i, j) as f64).collect(),
        depths: counts.depths().iter().map(|&d| d as f64).collect(),
        m: delta.m.clone(),
        sigma2: delta.sigma2.clone(),
    }
}

impl TaxonContext {
    /// log denominator and the j-th term's share for sample i, given the
    /// candidate value of L_ij.
    #[inline]
    fn denom(&self, i: usize, l_ij: f64) -> (f64, f64) {
        let own = self.log_w[i] + self.beta0_j + l_ij;
        let log_d = log_add_exp(self.log_rest[i], own);
        ((own - log_d).exp(), log_d)
    }
}

/// Mean of q(beta_j); unbounded.
pub fn r_block(
    j: usize,
    counts: &CountMatrix,
    delta: &VariationalParams,
    beta0: &[f64],
    hyper: &Hyperparams,
) -> BlockProblem {
    let ctx = Arc::new(taxon_context(j, counts, delta, beta0));
    let lambda2_j = delta.lambda2.row(j).to_vec();
    let sigma_beta = hyper.sigma_beta.clone();
    let k = ctx.k;
    // lambda-only prior parts, kept so the objective matches the bound up to
    // terms free of this block.
    let lambda_const: f64 = -0.5
        * lambda2_j
            .iter()
            .zip(&sigma_beta)
            .map(|(&l2, &sb)| l2 / sb - l2.ln())
            .sum::<f64>();

    let c = Arc::clone(&ctx);
    let l2 = lambda2_j.clone();
    let sb = sigma_beta.clone();
    let objective = move |r: &[f64]| {
        let mut val = lambda_const;
        for l in 0..k {
            val -= 0.5 * r[l] * r[l] / sb[l];
        }
        for i in 0..c.depths.len() {
            let mi = c.m.row(i);
            if c.x_col[i] > 0.0 {
                let mut dot = 0.0;
                for l in 0..k {
                    dot += mi[l] * r[l];
                }
                val += c.x_col[i] * dot;
            }
            if c.depths[i] > 0.0 {
                let l_ij = log_mgf_cell(mi, c.sigma2.row(i), r, &l2);
                let (_, log_d) = c.denom(i, l_ij);
                val -= c.depths[i] * log_d;
            }
        }
        val
    };

    let c = ctx;
    let gradient = move |r: &[f64]| {
        let mut g: Vec<f64> = (0..k).map(|l| -r[l] / sigma_beta[l]).collect();
        for i in 0..c.depths.len() {
            let mi = c.m.row(i);
            let s2i = c.sigma2.row(i);
            if c.x_col[i] > 0.0 {
                for l in 0..k {
                    g[l] += c.x_col[i] * mi[l];
                }
            }
            if c.depths[i] == 0.0 {
                continue;
            }
            let l_ij = log_mgf_cell(mi, s2i, r, &lambda2_j);
            let (frac, _) = c.denom(i, l_ij);
            if frac > 0.0 {
                let scale = c.depths[i] * frac;
                for l in 0..k {
                    let t = (mi[l] + s2i[l] * r[l]) / (1.0 - s2i[l] * lambda2_j[l]);
                    g[l] -= scale * t;
                }
            }
        }
        g
    };
    BlockProblem::new(k, objective, gradient)
}

/// Diagonal variances of q(beta_j); box-constrained inside (0, 1).
pub fn lambda2_block(
    j: usize,
    counts: &CountMatrix,
    delta: &VariationalParams,
    beta0: &[f64],
    hyper: &Hyperparams,
) -> BlockProblem {
    let ctx = Arc::new(taxon_context(j, counts, delta, beta0));
    let r_j = delta.r.row(j).to_vec();
    let sigma_beta = hyper.sigma_beta.clone();
    let k = ctx.k;

    let c = Arc::clone(&ctx);
    let rj = r_j.clone();
    let sb = sigma_beta.clone();
    let objective = move |l2: &[f64]| {
        let mut val = 0.0;
        for l in 0..k {
            val -= 0.5 * (l2[l] / sb[l] - l2[l].ln());
        }
        for i in 0..c.depths.len() {
            if c.depths[i] == 0.0 {
                continue;
            }
            let l_ij = log_mgf_cell(c.m.row(i), c.sigma2.row(i), &rj, l2);
            let (_, log_d) = c.denom(i, l_ij);
            val -= c.depths[i] * log_d;
        }
        val
    };

    let c = ctx;
    let gradient = move |l2: &[f64]| {
        let mut g: Vec<f64> = (0..k).map(|l| -0.5 * (1.0 / sigma_beta[l] - 1.0 / l2[l])).collect();
        for i in 0..c.depths.len() {
            if c.depths[i] == 0.0 {
                continue;
            }
            let mi = c.m.row(i);
            let s2i = c.sigma2.row(i);
            let l_ij = log_mgf_cell(mi, s2i, &r_j, l2);
            let (frac, _) = c.denom(i, l_ij);
            if frac > 0.0 {
                let scale = 0.5 * c.depths[i] * frac;
                for l in 0..k {
                    let d = 1.0 - s2i[l] * l2[l];
                    let w = s2i[l] / d
                        + mi[l] * mi[l] / (d * d)
                        + s2i[l] * (2.0 * mi[l] * r_j[l] + s2i[l] * r_j[l] * r_j[l]) / (d * d);
                    g[l] -= scale * w;
                }
            }
        }
        g
    };
    BlockProblem::new(k, objective, gradient).with_bounds(vec![VAR_FLOOR; k], vec![VAR_CEIL; k])
}

/// Context for the per-sample (m, sigma2) builders.
struct SampleContext {
    k: usize,
    depth: f64,
    x_row: Vec<f64>,
    /// log(1 - pi_ij) + beta0_j per taxon (-inf where masked).
    log_w_beta: Vec<f64>,
    r: Mat,
    lambda2: Mat,
}

fn sample_context(i: usize, counts: &CountMatrix, delta: &VariationalParams, beta0: &[f64]) -> SampleContext {
    let p = counts.p();
    let log_w_beta = (0..p)
        .map(|j| {
            let pi = delta.pi.get(i, j);
            if pi >= 1.0 {
                f64::NEG_INFINITY
            } else {
                (1.0 - pi).ln() + beta0[j]
            }
        })
        .collect();
    SampleContext {
        k: delta.k(),
        depth: counts.depth(i) as f64,
        x_row: counts.row(i).iter().map(|&v| v as f64).collect(),
        log_w_beta,
        r: delta.r.clone(),
        lambda2: delta.lambda2.clone(),
    }
}

impl SampleContext {
    /// Fractions exp(a_ij - log D_i) and the log denominator for a candidate
    /// (m_i, sigma2_i).
    fn fractions(&self, m_i: &[f64], sigma2_i: &[f64], fracs: &mut [f64]) -> f64 {
        let p = self.x_row.len();
        let mut max = f64::NEG_INFINITY;
        for j in 0..p {
            let a = if self.log_w_beta[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                self.log_w_beta[j] + log_mgf_cell(m_i, sigma2_i, self.r.row(j), self.lambda2.row(j))
            };
            fracs[j] = a;
            if a > max {
                max = a;
            }
        }
        let mut total = 0.0;
        for f in fracs.iter_mut() {
            *f = (*f - max).exp();
            total += *f;
        }
        for f in fracs.iter_mut() {
            *f /= total;
        }
        max + total.ln()
    }
}

/// Mean of q(f_i); unbounded.
pub fn m_block(
    i: usize,
    counts: &CountMatrix,
    delta: &VariationalParams,
    beta0: &[f64],
    hyper: &Hyperparams,
) -> BlockProblem {
    let _ = hyper;
    let ctx = Arc::new(sample_context(i, counts, delta, beta0));
    let sigma2_i = delta.sigma2.row(i).to_vec();
    let k = ctx.k;
    let sigma_const: f64 = -0.5 * sigma2_i.iter().map(|&s| s - s.ln()).sum::<f64>();

    let c = Arc::clone(&ctx);
    let s2 = sigma2_i.clone();
    let objective = move |m: &[f64]| {
        let mut val = sigma_const;
        for l in 0..k {
            val -= 0.5 * m[l] * m[l];
        }
        for j in 0..c.x_row.len() {
            if c.x_row[j] > 0.0 {
                let rj = c.r.row(j);
                let mut dot = 0.0;
                for l in 0..k {
                    dot += m[l] * rj[l];
                }
                val += c.x_row[j] * dot;
            }
        }
        if c.depth > 0.0 {
            let mut fracs = vec![0.0; c.x_row.len()];
            let log_d = c.fractions(m, &s2, &mut fracs);
            val -= c.depth * log_d;
        }
        val
    };

    let c = ctx;
    let gradient = move |m: &[f64]| {
        let mut g: Vec<f64> = (0..k).map(|l| -m[l]).collect();
        let mut fracs = vec![0.0; c.x_row.len()];
        if c.depth > 0.0 {
            c.fractions(m, &sigma2_i, &mut fracs);
        }
        for j in 0..c.x_row.len() {
            let rj = c.r.row(j);
            if c.x_row[j] > 0.0 {
                for l in 0..k {
                    g[l] += c.x_row[j] * rj[l];
                }
            }
            if fracs[j] > 0.0 {
                let l2j = c.lambda2.row(j);
                let scale = c.depth * fracs[j];
                for l in 0..k {
                    let u = (rj[l] + l2j[l] * m[l]) / (1.0 - sigma2_i[l] * l2j[l]);
                    g[l] -= scale * u;
                }
            }
        }
        g
    };
    BlockProblem::new(k, objective, gradient)
}

/// Diagonal variances of q(f_i); box-constrained inside (0, 1).
pub fn sigma2_block(
    i: usize,
    counts: &CountMatrix,
    delta: &VariationalParams,
    beta0: &[f64],
    hyper: &Hyperparams,
) -> BlockProblem {
    let _ = hyper;
    let ctx = Arc::new(sample_context(i, counts, delta, beta0));
    let m_i = delta.m.row(i).to_vec();
    let k = ctx.k;

    let c = Arc::clone(&ctx);
    let mi = m_i.clone();
    let objective = move |s2: &[f64]| {
        let mut val = 0.0;
        for l in 0..k {
            val -= 0.5 * (s2[l] - s2[l].ln());
        }
        if c.depth > 0.0 {
            let mut fracs = vec![0.0; c.x_row.len()];
            let log_d = c.fractions(&mi, s2, &mut fracs);
            val -= c.depth * log_d;
        }
        val
    };

    let c = ctx;
    let gradient = move |s2: &[f64]| {
        let mut g: Vec<f64> = (0..k).map(|l| -0.5 * (1.0 - 1.0 / s2[l])).collect();
        let mut fracs = vec![0.0; c.x_row.len()];
        if c.depth > 0.0 {
            c.fractions(&m_i, s2, &mut fracs);
        }
        for j in 0..c.x_row.len() {
            if fracs[j] > 0.0 {
                let rj = c.r.row(j);
                let l2j = c.lambda2.row(j);
                let scale = 0.5 * c.depth * fracs[j];
                for l in 0..k {
                    let d = 1.0 - s2[l] * l2j[l];
                    let s_term = l2j[l] / d
                        + l2j[l] * l2j[l] * m_i[l] * m_i[l] / (d * d)
                        + (rj[l] * rj[l] + 2.0 * l2j[l] * rj[l] * m_i[l]) / (d * d);
                    g[l] -= scale * s_term;
                }
            }
        }
        g
    };
    BlockProblem::new(k, objective, gradient).with_bounds(vec![VAR_FLOOR; k], vec![VAR_CEIL; k])
}

/// All p intercepts as one joint problem; the shared log-normalizer couples
/// them, and the solution is only identified up to an additive shift.
pub fn beta0_block(counts: &CountMatrix, delta: &VariationalParams) -> BlockProblem {
    let (n, p) = (counts.n(), counts.p());
    let l_mat = log_mgf_matrix(delta).expect("variances validated upstream");
    let log_pi_w = Mat::from_fn(n, p, |i, j| {
        let pi = delta.pi.get(i, j);
        if pi >= 1.0 { f64::NEG_INFINITY } else { (1.0 - pi).ln() }
    });
    let col_sums: Vec<f64> = counts.col_sums().iter().map(|&v| v as f64).collect();
    let depths: Vec<f64> = counts.depths().iter().map(|&d| d as f64).collect();

    let shared = Arc::new((l_mat, log_pi_w, col_sums, depths));

    let c = Arc::clone(&shared);
    let objective = move |beta0: &[f64]| {
        let (l_mat, log_pi_w, col_sums, depths) = &*c;
        let mut val = 0.0;
        for j in 0..beta0.len() {
            val += col_sums[j] * beta0[j];
        }
        let mut row = vec![0.0; beta0.len()];
        for i in 0..depths.len() {
            for j in 0..beta0.len() {
                row[j] = log_pi_w.get(i, j) + beta0[j] + l_mat.get(i, j);
            }
            val -= depths[i] * log_sum_exp(&row);
        }
        val
    };

    let c = shared;
    let gradient = move |beta0: &[f64]| {
        let (l_mat, log_pi_w, col_sums, depths) = &*c;
        let p = beta0.len();
        let mut g = col_sums.clone();
        let mut row = vec![0.0; p];
        for i in 0..depths.len() {
            let mut max = f64::NEG_INFINITY;
            for j in 0..p {
                row[j] = log_pi_w.get(i, j) + beta0[j] + l_mat.get(i, j);
                if row[j] > max {
                    max = row[j];
                }
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for j in 0..p {
                g[j] -= depths[i] * row[j] / total;
            }
        }
        g
    };
    BlockProblem::new(p, objective, gradient)
}

/// The seven block families, for the gradient-check harness and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Gamma1,
    Gamma2,
    R,
    Lambda2,
    M,
    Sigma2,
    Beta0,
}

impl BlockKind {
    pub const ALL: [BlockKind; 7] = [
        BlockKind::Gamma1,
        BlockKind::Gamma2,
        BlockKind::R,
        BlockKind::Lambda2,
        BlockKind::M,
        BlockKind::Sigma2,
        BlockKind::Beta0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Gamma1 => "gamma1",
            BlockKind::Gamma2 => "gamma2",
            BlockKind::R => "r",
            BlockKind::Lambda2 => "lambda2",
            BlockKind::M => "m",
            BlockKind::Sigma2 => "sigma2",
            BlockKind::Beta0 => "beta0",
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma1" => Ok(BlockKind::Gamma1),
            "gamma2" => Ok(BlockKind::Gamma2),
            "r" => Ok(BlockKind::R),
            "lambda2" => Ok(BlockKind::Lambda2),
            "m" => Ok(BlockKind::M),
            "sigma2" => Ok(BlockKind::Sigma2),
            "beta0" => Ok(BlockKind::Beta0),
            other => Err(Error::Validation(format!("unknown block '{other}'"))),
        }
    }
}

/// Build the block of the given kind at a concrete row/column index.
pub fn build_block(
    kind: BlockKind,
    index: usize,
    counts: &CountMatrix,
    delta: &VariationalParams,
    beta0: &[f64],
    hyper: &Hyperparams,
) -> BlockProblem {
    match kind {
        BlockKind::Gamma1 => gamma1_block(index, counts, delta, hyper),
        BlockKind::Gamma2 => gamma2_block(index, counts, delta, hyper),
        BlockKind::R => r_block(index, counts, delta, beta0, hyper),
        BlockKind::Lambda2 => lambda2_block(index, counts, delta, beta0, hyper),
        BlockKind::M => m_block(index, counts, delta, beta0, hyper),
        BlockKind::Sigma2 => sigma2_block(index, counts, delta, beta0, hyper),
        BlockKind::Beta0 => beta0_block(counts, delta),
    }
}

/// Current value of the block's own variable in `delta`/`beta0`; the natural
/// evaluation point for gradient checks.
pub fn block_point(
    kind: BlockKind,
    index: usize,
    delta: &VariationalParams,
    beta0: &[f64],
) -> Vec<f64> {
    match kind {
        BlockKind::Gamma1 => vec![delta.gamma1[index]],
        BlockKind::Gamma2 => vec![delta.gamma2[index]],
        BlockKind::R => delta.r.row(index).to_vec(),
        BlockKind::Lambda2 => delta.lambda2.row(index).to_vec(),
        BlockKind::M => delta.m.row(index).to_vec(),
        BlockKind::Sigma2 => delta.sigma2.row(index).to_vec(),
        BlockKind::Beta0 => beta0.to_vec(),
    }
}

fn sign_flip_first(problem: BlockProblem) -> BlockProblem {
    let dim = problem.dim;
    let lower = problem.lower.clone();
    let upper = problem.upper.clone();
    let shared = Arc::new(problem);
    let po = Arc::clone(&shared);
    let pg = shared;
    let mut flipped = BlockProblem::new(
        dim,
        move |x: &[f64]| po.objective(x),
        move |x: &[f64]| {
            let mut g = pg.gradient(x);
            g[0] = -g[0];
            g
        },
    );
    if let (Some(lo), Some(hi)) = (lower, upper) {
        flipped = flipped.with_bounds(lo, hi);
    }
    flipped
}

/// Worst relative gradient error per block over `points` random feasible
/// instances of size (n, p, k). `corrupt` flips the sign of one gradient
/// coordinate of the named block, for exercising the detector itself.
pub fn run_gradient_checks(
    n: usize,
    p: usize,
    k: usize,
    points: usize,
    step: f64,
    seed: u64,
    corrupt: Option<BlockKind>,
) -> Result<Vec<(BlockKind, f64)>> {
    if points == 0 {
        return Err(Error::Validation("need at least one check point".into()));
    }
    let mut worst = [0.0_f64; 7];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for t in 0..points {
        let (counts, delta, beta0, hyper) =
            crate::sim::random_variational_instance(n, p, k, seed.wrapping_add(t as u64));
        for (b, kind) in BlockKind::ALL.into_iter().enumerate() {
            let index = match kind {
                BlockKind::M | BlockKind::Sigma2 => rng.gen_range(0..n),
                BlockKind::Beta0 => 0,
                _ => rng.gen_range(0..p),
            };
            let mut problem = build_block(kind, index, &counts, &delta, &beta0, &hyper);
            if corrupt == Some(kind) {
                problem = sign_flip_first(problem);
            }
            let point = block_point(kind, index, &delta, &beta0);
            let err = grad_check(&problem, &point, step)?;
            if err > worst[b] {
                worst[b] = err;
            }
        }
    }
    Ok(BlockKind::ALL.into_iter().zip(worst).collect())
}
