//! Cross-checks of the analytic bound: Monte-Carlo agreement, the Poisson
//! equivalence identity, a scalar-loop transcription of the Poisson bound,
//! and block-objective consistency with the full bound.

use zippca_core::blocks::{build_block, block_point, BlockKind};
use zippca_core::special::{digamma, ln_beta, ln_factorial};
use zippca_core::{
    alpha0_hat, elbo_lpnm, elbo_poisson, mc_elbo_oracle, random_variational_instance, CountMatrix,
    Hyperparams, VariationalParams,
};

#[test]
fn monte_carlo_oracle_agrees_with_the_analytic_bound() {
    let (counts, delta, beta0, hyper) = random_variational_instance(3, 5, 2, 2024);
    let analytic = elbo_lpnm(&counts, &delta, &beta0, &hyper).unwrap().total;
    let (mc, se) = mc_elbo_oracle(&counts, &delta, &beta0, &hyper, 20_000, 7).unwrap();
    assert!(
        (mc - analytic).abs() < 3.0 * se,
        "analytic {analytic} vs MC {mc} +- {se}"
    );
}

#[test]
fn oracle_stderr_scales_like_root_n() {
    let (counts, delta, beta0, hyper) = random_variational_instance(3, 5, 2, 31);
    let (_, se_small) = mc_elbo_oracle(&counts, &delta, &beta0, &hyper, 10_000, 5).unwrap();
    let (_, se_large) = mc_elbo_oracle(&counts, &delta, &beta0, &hyper, 40_000, 6).unwrap();
    let ratio = se_small / se_large;
    assert!(
        (ratio - 2.0).abs() < 0.4,
        "quadrupling samples should halve the error: ratio {ratio}"
    );
}

#[test]
fn oracle_handles_degenerate_q() {
    let (counts, mut delta, beta0, hyper) = random_variational_instance(3, 5, 2, 8);
    // Hard-classified pi and boundary variances.
    for i in 0..counts.n() {
        for j in 0..counts.p() {
            if counts.get(i, j) == 0 {
                let v = if (i + j) % 2 == 0 { 1.0 } else { 0.0 };
                delta.pi.set(i, j, v);
            }
        }
    }
    for l in 0..2 {
        delta.sigma2.set(0, l, 1e-12);
    }
    let analytic = elbo_lpnm(&counts, &delta, &beta0, &hyper).unwrap().total;
    let (mc, se) = mc_elbo_oracle(&counts, &delta, &beta0, &hyper, 20_000, 3).unwrap();
    assert!(mc.is_finite() && se.is_finite());
    assert!((mc - analytic).abs() < 4.0 * se, "analytic {analytic} vs MC {mc} +- {se}");
}

#[test]
fn poisson_equivalence_identity_holds() {
    for seed in 0..10u64 {
        let (counts, delta, beta0, hyper) = random_variational_instance(4, 6, 2, 500 + seed);
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
                let x = counts.get(i, j);
                constant -= x as f64 * m_i.ln() - ln_factorial(x);
            }
        }
        let reconstructed = poisson + constant;
        let rel = (reconstructed - lpnm).abs() / lpnm.abs().max(1.0);
        assert!(rel < 1e-8, "seed {seed}: {lpnm} vs {reconstructed} (rel {rel:.3e})");
    }
}

/// Literal scalar-loop transcription of the Poisson-form bound.
fn poisson_oracle(
    counts: &CountMatrix,
    delta: &VariationalParams,
    beta0: &[f64],
    alpha0: &[f64],
    hyper: &Hyperparams,
) -> f64 {
    let (n, p, k) = (counts.n(), counts.p(), delta.k());
    let l_cell = |i: usize, j: usize| -> f64 {
        let mut out = 0.0;
        for l in 0..k {
            let s2 = delta.sigma2.get(i, l);
            let l2 = delta.lambda2.get(j, l);
            let (m, r) = (delta.m.get(i, l), delta.r.get(j, l));
            let d = 1.0 - s2 * l2;
            out += -0.5 * d.ln() + (s2 * r * r + l2 * m * m + 2.0 * m * r) / (2.0 * d);
        }
        out
    };
    let mut total = 0.0;
    for j in 0..p {
        let mut tr = 0.0;
        let mut logdet = 0.0;
        for l in 0..k {
            tr += (delta.r.get(j, l).powi(2) + delta.lambda2.get(j, l)) / hyper.sigma_beta[l];
            logdet += delta.lambda2.get(j, l).ln();
        }
        total += -0.5 * (tr - logdet);
    }
    for i in 0..n {
        let mut tr = 0.0;
        let mut logdet = 0.0;
        for l in 0..k {
            tr += delta.m.get(i, l).powi(2) + delta.sigma2.get(i, l);
            logdet += delta.sigma2.get(i, l).ln();
        }
        total += -0.5 * (tr - logdet);
    }
    for j in 0..p {
        total += ln_beta(delta.gamma1[j], delta.gamma2[j]);
    }
    total -= p as f64 * ln_beta(hyper.alpha1, hyper.alpha2);
    for j in 0..p {
        let psi12 = digamma(delta.gamma1[j] + delta.gamma2[j]);
        let psi1c = digamma(delta.gamma1[j]) - psi12;
        let psi2c = digamma(delta.gamma2[j]) - psi12;
        total += (hyper.alpha1 - delta.gamma1[j]) * psi1c + (hyper.alpha2 - delta.gamma2[j]) * psi2c;
        for i in 0..n {
            let pi = delta.pi.get(i, j);
            if pi > 0.0 {
                total += pi * (psi1c - pi.ln());
            }
            if pi < 1.0 {
                total += (1.0 - pi) * (psi2c - (1.0 - pi).ln());
                let x = counts.get(i, j);
                let mut dot = 0.0;
                for l in 0..k {
                    dot += delta.m.get(i, l) * delta.r.get(j, l);
                }
                total += (1.0 - pi)
                    * (x as f64 * (alpha0[i] + beta0[j] + dot)
                        - (alpha0[i] + beta0[j] + l_cell(i, j)).exp()
                        - ln_factorial(x));
            }
        }
    }
    total
}

#[test]
fn poisson_bound_matches_the_scalar_loop_oracle() {
    for seed in 0..5u64 {
        let (counts, delta, beta0, hyper) = random_variational_instance(2, 3, 1, 900 + seed);
        let alpha0: Vec<f64> = (0..counts.n()).map(|i| 0.3 * i as f64 - 0.2).collect();
        let fast = elbo_poisson(&counts, &delta, &beta0, &alpha0, &hyper).unwrap();
        let slow = poisson_oracle(&counts, &delta, &beta0, &alpha0, &hyper);
        assert!(
            (fast - slow).abs() < 1e-12 * slow.abs().max(1.0),
            "seed {seed}: {fast} vs {slow}"
        );
    }
}

#[test]
fn block_objectives_differ_from_the_bound_by_constants() {
    // Perturbing a block variable moves the block objective and the full
    // bound by the same amount; this pins the staging of every term.
    let (counts, delta, beta0, hyper) = random_variational_instance(4, 6, 2, 321);
    let base_elbo = elbo_lpnm(&counts, &delta, &beta0, &hyper).unwrap().total;

    for kind in BlockKind::ALL {
        let index = 2usize.min(match kind {
            BlockKind::M | BlockKind::Sigma2 => counts.n() - 1,
            _ => counts.p() - 1,
        });
        let problem = build_block(kind, index, &counts, &delta, &beta0, &hyper);
        let x0 = block_point(kind, index, &delta, &beta0);
        let f0 = problem.objective(&x0);

        for step in [0.07, -0.04] {
            let x1: Vec<f64> = x0.iter().map(|v| v + step).collect();
            // keep bounded problems feasible
            let x1: Vec<f64> = match (&problem.lower, &problem.upper) {
                (Some(lo), Some(hi)) => x1
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .map(|(&v, (&l, &u))| v.clamp(l + 1e-9, u - 1e-9))
                    .collect(),
                _ => x1,
            };
            let f1 = problem.objective(&x1);

            let mut delta2 = delta.clone();
            let mut beta0_2 = beta0.clone();
            match kind {
                BlockKind::Gamma1 => delta2.gamma1[index] = x1[0],
                BlockKind::Gamma2 => delta2.gamma2[index] = x1[0],
                BlockKind::R => delta2.r.row_mut(index).copy_from_slice(&x1),
                BlockKind::Lambda2 => delta2.lambda2.row_mut(index).copy_from_slice(&x1),
                BlockKind::M => delta2.m.row_mut(index).copy_from_slice(&x1),
                BlockKind::Sigma2 => delta2.sigma2.row_mut(index).copy_from_slice(&x1),
                BlockKind::Beta0 => beta0_2 = x1.clone(),
            }
            let elbo1 = elbo_lpnm(&counts, &delta2, &beta0_2, &hyper).unwrap().total;
            let block_move = f1 - f0;
            let bound_move = elbo1 - base_elbo;
            assert!(
                (block_move - bound_move).abs() < 1e-9 * bound_move.abs().max(1.0),
                "{}: block moved {block_move}, bound moved {bound_move}",
                kind.name()
            );
        }
    }
}
