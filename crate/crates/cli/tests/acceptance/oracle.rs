//! Brute-force log-evidence for tiny instances: exhaustive enumeration of
//! the zero-indicator patterns crossed with tensor-grid Gauss-Hermite
//! quadrature over the factors and loadings (rank-one models only).

use zippca_core::special::{ln_beta, ln_factorial};
use zippca_core::{CountMatrix, Hyperparams};

/// Physicists' Gauss-Hermite nodes and weights (weight e^{-x^2}).
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    // Largest roots first per the recurrence; flip to ascending order.
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

/// All zero-indicator patterns compatible with row i (structural zeros can
/// only sit on observed zeros, and at least one taxon must stay active).
fn valid_masks(row: &[u64]) -> Vec<Vec<bool>> {
    let zero_cells: Vec<usize> = (0..row.len()).filter(|&j| row[j] == 0).collect();
    let mut out = Vec::new();
    for bits in 0..(1usize << zero_cells.len()) {
        let mut mask = vec![false; row.len()];
        for (b, &j) in zero_cells.iter().enumerate() {
            mask[j] = (bits >> b) & 1 == 1;
        }
        if mask.iter().all(|&v| v) {
            continue;
        }
        out.push(mask);
    }
    out
}

/// log p(x | beta0, priors) for a rank-one model with small n, p, and
/// depths, by full enumeration and quadrature.
pub fn log_evidence_rank_one(
    counts: &CountMatrix,
    beta0: &[f64],
    hyper: &Hyperparams,
    order: usize,
) -> f64 {
    assert_eq!(hyper.k, 1, "quadrature oracle covers rank-one models only");
    let (n, p) = (counts.n(), counts.p());
    let (nodes, weights) = gauss_hermite(order);
    let inv_sqrt_pi = std::f64::consts::PI.powf(-0.5);
    let sigma_beta = hyper.sigma_beta[0].sqrt();

    // Gaussian change of variables: u = sqrt(2) * sd * t.
    let f_vals: Vec<f64> = nodes.iter().map(|t| std::f64::consts::SQRT_2 * t).collect();
    let b_vals: Vec<f64> = nodes
        .iter()
        .map(|t| std::f64::consts::SQRT_2 * sigma_beta * t)
        .collect();
    let w_norm: Vec<f64> = weights.iter().map(|w| w * inv_sqrt_pi).collect();

    // exp(beta0_j + f_t * b_b), indexed [j][t][b]
    let mut exp_logit = vec![vec![vec![0.0; order]; order]; p];
    for j in 0..p {
        for t in 0..order {
            for b in 0..order {
                exp_logit[j][t][b] = (beta0[j] + f_vals[t] * b_vals[b]).exp();
            }
        }
    }

    let masks: Vec<Vec<Vec<bool>>> = (0..n).map(|i| valid_masks(counts.row(i))).collect();
    let ln_coef: Vec<f64> = (0..n)
        .map(|i| {
            let mut c = ln_factorial(counts.depth(i));
            for &x in counts.row(i) {
                c -= ln_factorial(x);
            }
            c
        })
        .collect();

    // Beta-integrated prior mass of a joint indicator pattern.
    let ln_beta_prior = ln_beta(hyper.alpha1, hyper.alpha2);
    let pattern_weight = |joint: &[usize]| -> f64 {
        let mut lp = 0.0;
        for j in 0..p {
            let s: usize = (0..n).filter(|&i| masks[i][joint[i]][j]).count();
            lp += ln_beta(hyper.alpha1 + s as f64, hyper.alpha2 + (n - s) as f64) - ln_beta_prior;
        }
        lp.exp()
    };

    // Precompute the joint patterns and their prior mass once.
    let mut joints: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        joints.push((idx.clone(), pattern_weight(&idx)));
        let mut carry = true;
        for i in (0..n).rev() {
            if !carry {
                break;
            }
            idx[i] += 1;
            if idx[i] < masks[i].len() {
                carry = false;
            } else {
                idx[i] = 0;
            }
        }
        if carry {
            break;
        }
    }

    let mut evidence = 0.0_f64;
    let mut combo = vec![0usize; p];
    let mut v = vec![vec![0.0_f64; 1]; n]; // per-sample, per-mask f-quadrature value
    loop {
        let mut prior_w = 1.0;
        for j in 0..p {
            prior_w *= w_norm[combo[j]];
        }
        for i in 0..n {
            v[i] = masks[i]
                .iter()
                .map(|mask| {
                    let mut integral = 0.0;
                    for t in 0..order {
                        let mut denom = 0.0;
                        let mut dot = 0.0;
                        for j in 0..p {
                            if !mask[j] {
                                denom += exp_logit[j][t][combo[j]];
                                let x = counts.get(i, j);
                                if x > 0 {
                                    dot += x as f64 * (beta0[j] + f_vals[t] * b_vals[combo[j]]);
                                }
                            }
                        }
                        let log_lik = ln_coef[i] + dot - counts.depth(i) as f64 * denom.ln();
                        integral += w_norm[t] * log_lik.exp();
                    }
                    integral
                })
                .collect();
        }
        let mut z_total = 0.0;
        for (joint, weight) in &joints {
            let mut prod = *weight;
            for i in 0..n {
                prod *= v[i][joint[i]];
            }
            z_total += prod;
        }
        evidence += prior_w * z_total;

        let mut carry = true;
        for j in (0..p).rev() {
            if !carry {
                break;
            }
            combo[j] += 1;
            if combo[j] < order {
                carry = false;
            } else {
                combo[j] = 0;
            }
        }
        if carry {
            break;
        }
    }
    evidence.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_integrates_gaussian_moments() {
        let (nodes, weights) = gauss_hermite(40);
        let inv_sqrt_pi = std::f64::consts::PI.powf(-0.5);
        let m0: f64 = weights.iter().map(|w| w * inv_sqrt_pi).sum();
        assert!((m0 - 1.0).abs() < 1e-13, "total mass {m0}");
        // E[u^2] = 1 and E[u^4] = 3 for u ~ N(0, 1), u = sqrt(2) t.
        let m2: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(t, w)| w * inv_sqrt_pi * 2.0 * t * t)
            .sum();
        assert!((m2 - 1.0).abs() < 1e-12, "second moment {m2}");
        let m4: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(t, w)| w * inv_sqrt_pi * 4.0 * t * t * t * t)
            .sum();
        assert!((m4 - 3.0).abs() < 1e-11, "fourth moment {m4}");
    }

    #[test]
    fn valid_masks_respect_positive_cells() {
        let masks = valid_masks(&[2, 0, 0]);
        assert_eq!(masks.len(), 4);
        for mask in &masks {
            assert!(!mask[0]);
        }
    }
}
