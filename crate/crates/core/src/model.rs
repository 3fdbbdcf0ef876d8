//! Domain types and simplex geometry: count matrices, model parameters,
//! the additive log-ratio transform, and composition formulas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{CountGrid, Mat};

/// An n x p grid of non-negative read counts with per-sample sequencing
/// depths (row sums).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    x: CountGrid,
    depths: Vec<u64>,
}

impl CountMatrix {
    /// Validates that each row has positive depth and no column is entirely
    /// zero. Callers must pre-filter empty samples/taxa.
    pub fn new(rows: Vec<Vec<u64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Validation("count matrix has no rows".into()));
        }
        let p = rows[0].len();
        if p == 0 {
            return Err(Error::Validation("count matrix has no columns".into()));
        }
        let mut data = Vec::with_capacity(n * p);
        let mut depths = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Validation(format!(
                    "row {i} has {} entries, expected {p}",
                    row.len()
                )));
            }
            let depth: u64 = row.iter().sum();
            if depth == 0 {
                return Err(Error::Validation(format!("row {i} sums to zero")));
            }
            depths.push(depth);
            data.extend_from_slice(row);
        }
        let x = CountGrid::from_vec(n, p, data);
        for j in 0..p {
            if (0..n).all(|i| x.get(i, j) == 0) {
                return Err(Error::Validation(format!("column {j} is entirely zero")));
            }
        }
        Ok(CountMatrix { x, depths })
    }

    /// Builds without the depth/column checks. Intended for boundary-value
    /// evaluation (e.g. all-zero rows in likelihood-free settings); the row
    /// shape must still be rectangular.
    pub fn new_unchecked(rows: Vec<Vec<u64>>) -> Self {
        let n = rows.len();
        let p = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * p);
        let mut depths = Vec::with_capacity(n);
        for row in &rows {
            assert_eq!(row.len(), p, "ragged rows");
            depths.push(row.iter().sum());
            data.extend_from_slice(row);
        }
        CountMatrix {
            x: CountGrid::from_vec(n, p, data),
            depths,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.x.cols()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.x.get(i, j)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u64] {
        self.x.row(i)
    }

    /// Sequencing depth M_i of sample i.
    #[inline]
    pub fn depth(&self, i: usize) -> u64 {
        self.depths[i]
    }

    pub fn depths(&self) -> &[u64] {
        &self.depths
    }

    /// Column sums over samples.
    pub fn col_sums(&self) -> Vec<u64> {
        let mut s = vec![0u64; self.p()];
        for i in 0..self.n() {
            for (j, v) in self.row(i).iter().enumerate() {
                s[j] += v;
            }
        }
        s
    }

    /// Number of zero cells in column j.
    pub fn col_zero_count(&self, j: usize) -> usize {
        (0..self.n()).filter(|&i| self.get(i, j) == 0).count()
    }
}

/// Prior and model-size settings shared by all fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Number of latent factors.
    pub k: usize,
    /// Diagonal of the loading-prior covariance, shared across taxa.
    pub sigma_beta: Vec<f64>,
    /// Beta prior on the zero-inflation probabilities.
    pub alpha1: f64,
    pub alpha2: f64,
    /// Classification threshold for the zero-inflation step.
    pub pi0: f64,
}

impl Hyperparams {
    /// Standard-normal loading prior, uniform Beta prior, threshold 0.5.
    pub fn with_rank(k: usize) -> Self {
        Hyperparams {
            k,
            sigma_beta: vec![1.0; k],
            alpha1: 1.0,
            alpha2: 1.0,
            pi0: 0.5,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if self.k >= p {
            return Err(Error::Validation(format!(
                "k = {} must be smaller than p = {p}",
                self.k
            )));
        }
        if self.sigma_beta.len() != self.k {
            return Err(Error::Validation(format!(
                "sigma_beta has length {}, expected k = {}",
                self.sigma_beta.len(),
                self.k
            )));
        }
        if self.sigma_beta.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Validation("sigma_beta entries must be positive".into()));
        }
        if !(self.alpha1 > 0.0) || !(self.alpha2 > 0.0) {
            return Err(Error::Validation("Beta prior parameters must be positive".into()));
        }
        if !(self.pi0 > 0.0 && self.pi0 < 1.0) {
            return Err(Error::Validation("pi0 must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Model parameters Theta: intercepts, loadings, zero-inflation rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Per-taxon intercepts, length p.
    pub beta0: Vec<f64>,
    /// p x k loading matrix; row j is the loading vector of taxon j.
    pub b: Mat,
    /// Per-taxon zero-inflation probabilities, each in (0, 1).
    pub eta: Vec<f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let p = self.beta0.len();
        if self.b.rows() != p || self.eta.len() != p {
            return Err(Error::Validation("ModelParams shapes disagree".into()));
        }
        if self.eta.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(Error::Validation("eta entries must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Latent state for one generated dataset: factors and zero indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// n x k factor scores.
    pub f: Mat,
    /// n x p zero-inflation indicators (true = structurally zeroed).
    pub z: Vec<Vec<bool>>,
}

const SIMPLEX_TOL: f64 = 1e-12;

/// Additive log-ratio transform with the last component as reference:
/// `alr(rho)[j] = log(rho[j] / rho[p-1])`.
pub fn alr(rho: &[f64]) -> Result<Vec<f64>> {
    if rho.len() < 2 {
        return Err(Error::Validation("alr needs at least two components".into()));
    }
    for (j, &v) in rho.iter().enumerate() {
        if !(v > 0.0) {
            return Err(Error::Domain(format!("alr: component {j} is {v}, must be > 0")));
        }
    }
    let total: f64 = rho.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Validation(format!(
            "alr: components sum to {total}, expected 1"
        )));
    }
    let reference = rho[rho.len() - 1];
    Ok(rho[..rho.len() - 1]
        .iter()
        .map(|&v| (v / reference).ln())
        .collect())
}

/// Inverse additive log-ratio transform; returns a strictly positive simplex
/// vector of length `mu.len() + 1`. Max-subtraction keeps large coordinates
/// from overflowing.
pub fn alr_inv(mu: &[f64]) -> Result<Vec<f64>> {
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("alr_inv: non-finite input".into()));
    }
    let mut max = 0.0_f64; // reference coordinate carries an implicit 0
    for &v in mu {
        if v > max {
            max = v;
        }
    }
    let mut out: Vec<f64> = mu.iter().map(|&v| (v - max).exp()).collect();
    out.push((-max).exp());
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Row-wise softmax of the logit grid `beta0_j + f_i . b_j`: the
/// compositions with no zero-inflation applied.
pub fn underlying_compositions(beta0: &[f64], b: &Mat, f: &Mat) -> Result<Mat> {
    let p = beta0.len();
    let k = b.cols();
    if b.rows() != p {
        return Err(Error::Validation(format!(
            "loading matrix has {} rows, expected p = {p}",
            b.rows()
        )));
    }
    if f.cols() != k {
        return Err(Error::Validation(format!(
            "factor matrix has {} columns, expected k = {k}",
            f.cols()
        )));
    }
    let n = f.rows();
    let mut out = Mat::zeros(n, p);
    let mut logits = vec![0.0; p];
    for i in 0..n {
        let fi = f.row(i);
        for j in 0..p {
            let bj = b.row(j);
            let mut dot = 0.0;
            for l in 0..k {
                dot += fi[l] * bj[l];
            }
            logits[j] = beta0[j] + dot;
        }
        softmax_into(&logits, out.row_mut(i));
    }
    Ok(out)
}

/// Masked softmax: components with `z[j] = true` are exactly zero and the
/// rest renormalize. Errors if everything is masked.
pub fn zero_inflated_compositions(
    z: &[bool],
    beta0: &[f64],
    b: &Mat,
    f_i: &[f64],
) -> Result<Vec<f64>> {
    let p = beta0.len();
    if z.len() != p || b.rows() != p || b.cols() != f_i.len() {
        return Err(Error::Validation("zero_inflated_compositions: shape mismatch".into()));
    }
    if z.iter().all(|&m| m) {
        return Err(Error::DegenerateSupport(
            "every component is masked; the composition is undefined".into(),
        ));
    }
    let mut max = f64::NEG_INFINITY;
    let mut logits = vec![f64::NEG_INFINITY; p];
    for j in 0..p {
        if z[j] {
            continue;
        }
        let mut dot = 0.0;
        for l in 0..f_i.len() {
            dot += f_i[l] * b.get(j, l);
        }
        logits[j] = beta0[j] + dot;
        if logits[j] > max {
            max = logits[j];
        }
    }
    let mut out = vec![0.0; p];
    let mut total = 0.0;
    for j in 0..p {
        if !z[j] {
            out[j] = (logits[j] - max).exp();
            total += out[j];
        }
    }
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        if v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
