//! Mean-field evidence lower bound for the zero-inflated multinomial factor
//! model, the matching Poisson-form bound, the closed-form zero-inflation
//! updates, and a Monte-Carlo oracle used to verify the analytic assembly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CountMatrix, Hyperparams};
use crate::numeric::{log_sum_exp, pairwise_sum, Mat};
use crate::special::{digamma, ln_beta, ln_factorial};

/// Free parameters of the mean-field family: Bernoulli means for the zero
/// indicators, Gaussian means/variances for loadings and factors, and Beta
/// parameters for the zero-inflation rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    /// n x p Bernoulli means of q(z_ij).
    pub pi: Mat,
    /// p x k means of q(beta_j).
    pub r: Mat,
    /// p x k diagonal variances of q(beta_j), each in (0, 1).
    pub lambda2: Mat,
    /// n x k means of q(f_i).
    pub m: Mat,
    /// n x k diagonal variances of q(f_i), each in (0, 1).
    pub sigma2: Mat,
    /// Beta parameters of q(eta_j), length p.
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
}

impl VariationalParams {
    pub fn n(&self) -> usize {
        self.pi.rows()
    }

    pub fn p(&self) -> usize {
        self.pi.cols()
    }

    pub fn k(&self) -> usize {
        self.r.cols()
    }

    /// Checks shapes against a count matrix and the documented ranges:
    /// variances strictly inside (0, 1), positive Beta parameters, Bernoulli
    /// means in [0, 1] with pi = 0 wherever x > 0.
    pub fn validate(&self, counts: &CountMatrix, k: usize) -> Result<()> {
        let (n, p) = (counts.n(), counts.p());
        if self.pi.rows() != n || self.pi.cols() != p {
            return Err(Error::Validation("pi grid shape mismatch".into()));
        }
        if self.r.rows() != p || self.r.cols() != k || self.lambda2.rows() != p || self.lambda2.cols() != k {
            return Err(Error::Validation("loading block shape mismatch".into()));
        }
        if self.m.rows() != n || self.m.cols() != k || self.sigma2.rows() != n || self.sigma2.cols() != k {
            return Err(Error::Validation("factor block shape mismatch".into()));
        }
        if self.gamma1.len() != p || self.gamma2.len() != p {
            return Err(Error::Validation("gamma vectors must have length p".into()));
        }
        if self.lambda2.iter().any(|v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Validation("lambda2 entries must lie in (0, 1)".into()));
        }
        if self.sigma2.iter().any(|v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Validation("sigma2 entries must lie in (0, 1)".into()));
        }
        if self.gamma1.iter().chain(&self.gamma2).any(|&g| !(g > 0.0)) {
            return Err(Error::Validation("gamma parameters must be positive".into()));
        }
        for i in 0..n {
            for j in 0..p {
                let v = self.pi.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!("pi[{i}][{j}] = {v} outside [0, 1]")));
                }
                if counts.get(i, j) > 0 && v != 0.0 {
                    return Err(Error::Validation(format!(
                        "pi[{i}][{j}] must be 0 where the count is positive"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The bound value together with its additive pieces (diagnostics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub total: f64,
    /// Loading-prior term: -1/2 sum_j { tr(SigmaBeta^-1 (r r' + Lambda)) - log|Lambda| }.
    pub loading_prior: f64,
    /// Factor-prior term: -1/2 sum_i { tr(m m' + Sigma) - log|Sigma| }.
    pub factor_prior: f64,
    /// sum_j log B(gamma_j1, gamma_j2) - p log B(alpha1, alpha2).
    pub beta_functions: f64,
    /// Expected multinomial log-likelihood: the x_ij (beta0 + m'r) part and
    /// the -M_i log-normalizer part.
    pub multinomial: f64,
    /// Bernoulli entropy/cross terms plus the Beta digamma cross terms.
    pub bernoulli_beta: f64,
}

/// Log moment-generating term for one (sample, taxon) pair:
/// `L_ij = sum_l log E[exp(u_l v_l)]` with `u_l ~ N(m_l, sigma2_l)` and
/// `v_l ~ N(r_l, lambda2_l)` independent. Finite only while every
/// `sigma2_l * lambda2_l < 1`.
pub fn log_mgf_term(m_i: &[f64], sigma2_i: &[f64], r_j: &[f64], lambda2_j: &[f64]) -> Result<f64> {
    let k = m_i.len();
    if sigma2_i.len() != k || r_j.len() != k || lambda2_j.len() != k {
        return Err(Error::Validation("log_mgf_term: length mismatch".into()));
    }
    let mut total = 0.0;
    for l in 0..k {
        let d = 1.0 - sigma2_i[l] * lambda2_j[l];
        if d <= 0.0 {
            return Err(Error::Singular(format!(
                "sigma2[{l}] * lambda2[{l}] = {} >= 1",
                sigma2_i[l] * lambda2_j[l]
            )));
        }
        let num = sigma2_i[l] * r_j[l] * r_j[l] + lambda2_j[l] * m_i[l] * m_i[l] + 2.0 * m_i[l] * r_j[l];
        total += -0.5 * d.ln() + num / (2.0 * d);
    }
    Ok(total)
}

#[inline]
pub(crate) fn log_mgf_cell(m_i: &[f64], sigma2_i: &[f64], r_j: &[f64], lambda2_j: &[f64]) -> f64 {
    let mut total = 0.0;
    for l in 0..m_i.len() {
        let d = 1.0 - sigma2_i[l] * lambda2_j[l];
        let num = sigma2_i[l] * r_j[l] * r_j[l] + lambda2_j[l] * m_i[l] * m_i[l] + 2.0 * m_i[l] * r_j[l];
        total += -0.5 * d.ln() + num / (2.0 * d);
    }
    total
}

/// n x p matrix of log moment-generating terms.
pub(crate) fn log_mgf_matrix(delta: &VariationalParams) -> Result<Mat> {
    let (n, p) = (delta.n(), delta.p());
    for v in delta.sigma2.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite("sigma2".into()));
        }
    }
    let mut out = Mat::zeros(n, p);
    for i in 0..n {
        let (mi, s2i) = (delta.m.row(i), delta.sigma2.row(i));
        for j in 0..p {
            let val = log_mgf_term(mi, s2i, delta.r.row(j), delta.lambda2.row(j))?;
            out.set(i, j, val);
        }
    }
    Ok(out)
}

/// a_ij = log(1 - pi_ij) + beta0_j + L_ij, with -inf where pi_ij = 1.
pub(crate) fn log_weights(delta: &VariationalParams, beta0: &[f64], l_mat: &Mat) -> Mat {
    let (n, p) = (delta.n(), delta.p());
    Mat::from_fn(n, p, |i, j| {
        let pi = delta.pi.get(i, j);
        if pi >= 1.0 {
            f64::NEG_INFINITY
        } else {
            (1.0 - pi).ln() + beta0[j] + l_mat.get(i, j)
        }
    })
}

/// Row-wise log-denominators log sum_j exp(a_ij); errors on empty support.
pub(crate) fn log_denominators(a: &Mat) -> Result<Vec<f64>> {
    (0..a.rows())
        .map(|i| {
            let v = log_sum_exp(a.row(i));
            if v == f64::NEG_INFINITY {
                Err(Error::DegenerateSupport(format!(
                    "sample {i}: every taxon is masked in the variational weights"
                )))
            } else {
                Ok(v)
            }
        })
        .collect()
}

/// Bernoulli entropy-with-cross term under the 0 log 0 = 0 convention.
#[inline]
fn bernoulli_piece(pi: f64, psi1c: f64, psi2c: f64) -> f64 {
    let active = if pi > 0.0 { pi * (psi1c - pi.ln()) } else { 0.0 };
    let inactive = if pi < 1.0 {
        (1.0 - pi) * (psi2c - (1.0 - pi).ln())
    } else {
        0.0
    };
    active + inactive
}

/// Evaluate the mean-field bound term by term.
pub fn elbo_lpnm(
    counts: &CountMatrix,
    delta: &VariationalParams,
    beta0: &[f64],
    hyper: &Hyperparams,
) -> Result<ElboBreakdown> {
    let (n, p) = (counts.n(), counts.p());
    let k = hyper.k;
    hyper.validate(p)?;
    if beta0.len() != p {
        return Err(Error::Validation("beta0 must have length p".into()));
    }
    if delta.n() != n || delta.p() != p || delta.k() != k {
        return Err(Error::Validation("variational parameter shapes disagree with counts".into()));
    }

    let l_mat = log_mgf_matrix(delta)?;
    let a = log_weights(delta, beta0, &l_mat);
    let log_d = log_denominators(&a)?;

    let loading_terms: Vec<f64> = (0..p)
        .map(|j| {
            let (rj, l2j) = (delta.r.row(j), delta.lambda2.row(j));
            let mut tr = 0.0;
            let mut logdet = 0.0;
            for l in 0..k {
                tr += (rj[l] * rj[l] + l2j[l]) / hyper.sigma_beta[l];
                logdet += l2j[l].ln();
            }
            -0.5 * (tr - logdet)
        })
        .collect();
    let loading_prior = pairwise_sum(&loading_terms);

    let factor_terms: Vec<f64> = (0..n)
        .map(|i| {
            let (mi, s2i) = (delta.m.row(i), delta.sigma2.row(i));
            let mut tr = 0.0;
            let mut logdet = 0.0;
            for l in 0..k {
                tr += mi[l] * mi[l] + s2i[l];
                logdet += s2i[l].ln();
            }
            -0.5 * (tr - logdet)
        })
        .collect();
    let factor_prior = pairwise_sum(&factor_terms);

    let beta_fn_terms: Vec<f64> = (0..p)
        .map(|j| ln_beta(delta.gamma1[j], delta.gamma2[j]))
        .collect();
    let beta_functions = pairwise_sum(&beta_fn_terms) - p as f64 * ln_beta(hyper.alpha1, hyper.alpha2);

    let mut multinomial_terms: Vec<f64> = Vec::with_capacity(n * (p + 1));
    for i in 0..n {
        let mi = delta.m.row(i);
        for j in 0..p {
            let x = counts.get(i, j) as f64;
            if x > 0.0 {
                let mut dot = 0.0;
                for l in 0..k {
                    dot += mi[l] * delta.r.get(j, l);
                }
                multinomial_terms.push(x * (beta0[j] + dot));
            }
        }
        multinomial_terms.push(-(counts.depth(i) as f64) * log_d[i]);
    }
    let multinomial = pairwise_sum(&multinomial_terms);

    let psi12: Vec<(f64, f64)> = (0..p)
        .map(|j| {
            let s = digamma(delta.gamma1[j] + delta.gamma2[j]);
            (digamma(delta.gamma1[j]) - s, digamma(delta.gamma2[j]) - s)
        })
        .collect();
    let mut bern_terms: Vec<f64> = Vec::with_capacity(n * p + p);
    for i in 0..n {
        for j in 0..p {
            bern_terms.push(bernoulli_piece(delta.pi.get(i, j), psi12[j].0, psi12[j].1));
        }
    }
    for j in 0..p {
        bern_terms.push(
            (hyper.alpha1 - delta.gamma1[j]) * psi12[j].0 + (hyper.alpha2 - delta.gamma2[j]) * psi12[j].1,
        );
    }
    let bernoulli_beta = pairwise_sum(&bern_terms);

    let components = [loading_prior, factor_prior, beta_functions, multinomial, bernoulli_beta];
    let total = pairwise_sum(&components);
    Ok(ElboBreakdown {
        total,
        loading_prior,
        factor_prior,
        beta_functions,
        multinomial,
        bernoulli_beta,
    })
}

/// Profiled sample intercept of the Poisson form:
/// `alpha_i0 = log { M_i / sum_j (1 - pi_ij) exp(beta0_j + L_ij) }`.
pub fn alpha0_hat(counts: &CountMatrix, delta: &VariationalParams, beta0: &[f64], i: usize) -> Result<f64> {
    if i >= counts.n() {
        return Err(Error::Validation(format!("sample index {i} out of range")));
    }
    let l_mat = log_mgf_matrix(delta)?;
    let a = log_weights(delta, beta0, &l_mat);
    let log_d = log_sum_exp(a.row(i));
    if log_d == f64::NEG_INFINITY {
        return Err(Error::DegenerateSupport(format!("sample {i}: empty support")));
    }
    Ok((counts.depth(i) as f64).ln() - log_d)
}

/// Exponent clamp before the outer exp in the zero-inflation update; keeps
/// exp(-exp(.)) at its 0/1 limits instead of NaN for extreme logits.
const OUTER_EXP_CLAMP: f64 = 700.0;

/// Closed-form zero-inflation probabilities: 0 where a count is observed,
/// otherwise the Poisson-equivalence expression with `alpha0_hat` plugged in.
pub fn pi_hat(counts: &CountMatrix, delta: &VariationalParams, beta0: &[f64]) -> Result<Mat> {
    let (n, p) = (counts.n(), counts.p());
    let l_mat = log_mgf_matrix(delta)?;
    let a = log_weights(delta, beta0, &l_mat);
    let log_d = log_denominators(&a)?;
    let mut out = Mat::zeros(n, p);
    for i in 0..n {
        let alpha0 = (counts.depth(i) as f64).ln() - log_d[i];
        for j in 0..p {
            if counts.get(i, j) > 0 {
                continue;
            }
            let psi_gap = digamma(delta.gamma2[j]) - digamma(delta.gamma1[j]);
            let exponent = (alpha0 + beta0[j] + l_mat.get(i, j)).min(OUTER_EXP_CLAMP);
            // pi-hat = 1 / (1 + exp(psi(g2) - psi(g1) - exp(exponent)))
            out.set(i, j, 1.0 / (1.0 + (psi_gap - exponent.exp()).exp()));
        }
    }
    Ok(out)
}

/// Evidence lower bound of the zero-inflated Poisson form at a fixed vector
/// of sample intercepts `alpha0`. Shares every prior/entropy term with the
/// multinomial bound; the likelihood part is (1 - pi)-weighted Poisson.
pub fn elbo_poisson(
    counts: &CountMatrix,
    delta: &VariationalParams,
    beta0: &[f64],
    alpha0: &[f64],
    hyper: &Hyperparams,
) -> Result<f64> {
    let (n, p) = (counts.n(), counts.p());
    let k = hyper.k;
    if alpha0.len() != n {
        return Err(Error::Validation("alpha0 must have length n".into()));
    }
    if beta0.len() != p {
        return Err(Error::Validation("beta0 must have length p".into()));
    }
    let l_mat = log_mgf_matrix(delta)?;

    let mut terms: Vec<f64> = Vec::with_capacity(2 * p + n + n * p);
    for j in 0..p {
        let (rj, l2j) = (delta.r.row(j), delta.lambda2.row(j));
        let mut tr = 0.0;
        let mut logdet = 0.0;
        for l in 0..k {
            tr += (rj[l] * rj[l] + l2j[l]) / hyper.sigma_beta[l];
            logdet += l2j[l].ln();
        }
        terms.push(-0.5 * (tr - logdet));
    }
    for i in 0..n {
        let (mi, s2i) = (delta.m.row(i), delta.sigma2.row(i));
        let mut tr = 0.0;
        let mut logdet = 0.0;
        for l in 0..k {
            tr += mi[l] * mi[l] + s2i[l];
            logdet += s2i[l].ln();
        }
        terms.push(-0.5 * (tr - logdet));
    }
    for j in 0..p {
        terms.push(ln_beta(delta.gamma1[j], delta.gamma2[j]));
    }
    terms.push(-(p as f64) * ln_beta(hyper.alpha1, hyper.alpha2));

    for j in 0..p {
        let s = digamma(delta.gamma1[j] + delta.gamma2[j]);
        let psi1c = digamma(delta.gamma1[j]) - s;
        let psi2c = digamma(delta.gamma2[j]) - s;
        terms.push((hyper.alpha1 - delta.gamma1[j]) * psi1c + (hyper.alpha2 - delta.gamma2[j]) * psi2c);
        for i in 0..n {
            let pi = delta.pi.get(i, j);
            terms.push(bernoulli_piece(pi, psi1c, psi2c));
            let w = 1.0 - pi;
            if w > 0.0 {
                let x = counts.get(i, j) as f64;
                let mut dot = 0.0;
                for l in 0..k {
                    dot += delta.m.get(i, l) * delta.r.get(j, l);
                }
                let rate = (alpha0[i] + beta0[j] + l_mat.get(i, j)).exp();
                terms.push(w * (x * (alpha0[i] + beta0[j] + dot) - rate - ln_factorial(counts.get(i, j))));
            }
        }
    }
    Ok(pairwise_sum(&terms))
}

/// Direct Monte-Carlo estimate of the bound: every latent block is sampled
/// from q and each expectation in the analytic expression is replaced by a
/// sample average (the log-normalizer term by the log of a sample average).
/// Returns (estimate, standard error); the standard error comes from the
/// delta-method influence of the combined estimator.
pub fn mc_elbo_oracle(
    counts: &CountMatrix,
    delta: &VariationalParams,
    beta0: &[f64],
    hyper: &Hyperparams,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples < 1_000 {
        return Err(Error::Validation("mc_elbo_oracle needs at least 1e3 samples".into()));
    }
    let (n, p, k) = (counts.n(), counts.p(), hyper.k);
    if delta.n() != n || delta.p() != p || delta.k() != k || beta0.len() != p {
        return Err(Error::Validation("mc_elbo_oracle: shape mismatch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Boundary variances are clamped for sampling only.
    let clamp = |v: f64| v.max(1e-8);
    let ln_beta_gamma: Vec<f64> = (0..p)
        .map(|j| ln_beta(delta.gamma1[j], delta.gamma2[j]))
        .collect();
    let ln_beta_alpha = ln_beta(hyper.alpha1, hyper.alpha2);
    let beta_dists: Vec<Beta<f64>> = (0..p)
        .map(|j| {
            Beta::new(delta.gamma1[j], delta.gamma2[j])
                .map_err(|e| Error::Validation(format!("q(eta_{j}) parameters invalid: {e}")))
        })
        .collect::<Result<_>>()?;

    let mut a_vals = vec![0.0_f64; samples];
    let mut log_s = Mat::zeros(samples, n);
    let mut beta_draw = Mat::zeros(p, k);
    let mut f_draw = Mat::zeros(n, k);
    let mut eta_draw = vec![0.0; p];
    let mut z_draw = vec![false; p];
    let mut row_logits = vec![0.0; p];

    for t in 0..samples {
        let mut acc = 0.0;
        for j in 0..p {
            for l in 0..k {
                let sd = clamp(delta.lambda2.get(j, l)).sqrt();
                let v: f64 = delta.r.get(j, l) + sd * rng.sample::<f64, _>(StandardNormal);
                beta_draw.set(j, l, v);
                acc += -0.5 * v * v / hyper.sigma_beta[l] + 0.5 * clamp(delta.lambda2.get(j, l)).ln();
            }
            let eta: f64 = beta_dists[j].sample(&mut rng);
            let eta = eta.clamp(1e-12, 1.0 - 1e-12);
            eta_draw[j] = eta;
            acc += (hyper.alpha1 - delta.gamma1[j]) * eta.ln()
                + (hyper.alpha2 - delta.gamma2[j]) * (1.0 - eta).ln()
                + ln_beta_gamma[j]
                - ln_beta_alpha;
        }
        for i in 0..n {
            for l in 0..k {
                let sd = clamp(delta.sigma2.get(i, l)).sqrt();
                let v: f64 = delta.m.get(i, l) + sd * rng.sample::<f64, _>(StandardNormal);
                f_draw.set(i, l, v);
                acc += -0.5 * v * v + 0.5 * clamp(delta.sigma2.get(i, l)).ln();
            }
            for j in 0..p {
                let pi = delta.pi.get(i, j);
                let z = pi > 0.0 && rng.gen::<f64>() < pi;
                z_draw[j] = z;
                // log p(z | eta) - log q(z), with the 0 log 0 convention
                acc += if z {
                    eta_draw[j].ln() - pi.ln()
                } else {
                    (1.0 - eta_draw[j]).ln() - if pi < 1.0 { (1.0 - pi).ln() } else { 0.0 }
                };
                let mut dot = 0.0;
                for l in 0..k {
                    dot += f_draw.get(i, l) * beta_draw.get(j, l);
                }
                let logit = beta0[j] + dot;
                row_logits[j] = if z { f64::NEG_INFINITY } else { logit };
                let x = counts.get(i, j) as f64;
                if x > 0.0 {
                    acc += x * logit;
                }
            }
            log_s.set(t, i, log_sum_exp(&row_logits));
        }
        a_vals[t] = acc;
    }

    let mut log_mean_s = vec![0.0; n];
    for i in 0..n {
        let col: Vec<f64> = (0..samples).map(|t| log_s.get(t, i)).collect();
        let lse = log_sum_exp(&col);
        if lse == f64::NEG_INFINITY {
            return Err(Error::DegenerateSupport(format!(
                "sample {i}: the variational draw never had support"
            )));
        }
        log_mean_s[i] = lse - (samples as f64).ln();
    }

    let mean_a = pairwise_sum(&a_vals) / samples as f64;
    let mut estimate = mean_a;
    for i in 0..n {
        estimate -= counts.depth(i) as f64 * log_mean_s[i];
    }

    // Influence of the t-th draw on the combined estimator.
    let influences: Vec<f64> = (0..samples)
        .map(|t| {
            let mut h = a_vals[t];
            for i in 0..n {
                h -= counts.depth(i) as f64 * (log_s.get(t, i) - log_mean_s[i]).exp();
            }
            h
        })
        .collect();
    let mean_h = pairwise_sum(&influences) / samples as f64;
    let sq: Vec<f64> = influences.iter().map(|h| (h - mean_h) * (h - mean_h)).collect();
    let var = pairwise_sum(&sq) / (samples as f64 - 1.0);
    let stderr = (var / samples as f64).sqrt();
    Ok((estimate, stderr))
}
