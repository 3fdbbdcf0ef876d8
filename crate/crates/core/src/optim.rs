//! Quasi-Newton maximization with optional box constraints, and a
//! central-difference gradient checker.
//!
//! Unbounded problems run limited-memory BFGS with Armijo backtracking;
//! bounded problems project trial points onto the box and restrict the
//! quasi-Newton direction to the free coordinates (gradient projection with
//! subspace minimization).

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// One block subproblem: an objective to maximize, its analytic gradient,
/// and optional per-coordinate bounds (entries may be infinite).
pub struct BlockProblem {
    pub dim: usize,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    objective: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    gradient: Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl BlockProblem {
    pub fn new(
        dim: usize,
        objective: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        BlockProblem {
            dim,
            lower: None,
            upper: None,
            objective: Box::new(objective),
            gradient: Box::new(gradient),
        }
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), self.dim);
        assert_eq!(upper.len(), self.dim);
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    #[inline]
    pub fn objective(&self, x: &[f64]) -> f64 {
        (self.objective)(x)
    }

    #[inline]
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.is_some() || self.upper.is_some()
    }

    fn clamp(&self, x: &mut [f64]) {
        if let Some(lo) = &self.lower {
            for (v, &l) in x.iter_mut().zip(lo) {
                if *v < l {
                    *v = l;
                }
            }
        }
        if let Some(hi) = &self.upper {
            for (v, &u) in x.iter_mut().zip(hi) {
                if *v > u {
                    *v = u;
                }
            }
        }
    }

    fn in_box(&self, x: &[f64]) -> bool {
        let lo_ok = self
            .lower
            .as_ref()
            .map_or(true, |lo| x.iter().zip(lo).all(|(v, l)| v >= l));
        let hi_ok = self
            .upper
            .as_ref()
            .map_or(true, |hi| x.iter().zip(hi).all(|(v, u)| v <= u));
        lo_ok && hi_ok
    }
}

/// Outcome of one solver call.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerReport {
    pub solution: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
}

const ARMIJO_C: f64 = 1e-4;
const ARMIJO_SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 40;
const LBFGS_MEMORY: usize = 10;
const ACTIVE_EPS: f64 = 1e-12;

/// Maximize a block problem from `x0`. Accepted steps never decrease the
/// objective; on line-search failure the best iterate is returned with
/// `converged = false`.
pub fn bounded_quasi_newton(
    problem: &BlockProblem,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<OptimizerReport> {
    if x0.len() != problem.dim {
        return Err(Error::Validation(format!(
            "start point has dimension {}, problem has {}",
            x0.len(),
            problem.dim
        )));
    }
    if !problem.in_box(x0) {
        return Err(Error::Validation("start point violates the bounds".into()));
    }

    // Work in minimization form: g = -f.
    let mut x = x0.to_vec();
    let mut fx = -problem.objective(&x);
    let mut grad = neg(problem.gradient(&x));
    if !fx.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "objective or gradient is non-finite at the start point".into(),
        ));
    }

    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..max_iter {
        let pg = projected_gradient(problem, &x, &grad);
        if inf_norm(&pg) < tol {
            converged = true;
            break;
        }
        iterations += 1;

        let active = active_set(problem, &x, &grad);
        let mut masked = grad.clone();
        for (g, &a) in masked.iter_mut().zip(&active) {
            if a {
                *g = 0.0;
            }
        }
        let mut dir = two_loop_direction(&memory, &masked);
        for (d, &a) in dir.iter_mut().zip(&active) {
            if a {
                *d = 0.0;
            }
        }
        // Fall back to steepest descent when the quasi-Newton direction
        // fails to descend.
        if dot(&dir, &grad) >= 0.0 {
            dir = neg(masked.clone());
        }
        if dir.iter().all(|&d| d == 0.0) {
            converged = inf_norm(&pg) < tol;
            break;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(&xi, &di)| xi + step * di).collect();
            problem.clamp(&mut trial);
            let delta: Vec<f64> = trial.iter().zip(&x).map(|(t, xi)| t - xi).collect();
            let pred = dot(&grad, &delta);
            if pred < 0.0 {
                let ft = -problem.objective(&trial);
                if ft.is_finite() && ft <= fx + ARMIJO_C * pred {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            step *= ARMIJO_SHRINK;
        }

        let Some((x_new, f_new)) = accepted else {
            // No acceptable step along this direction; report the best point.
            break;
        };
        let grad_new = neg(problem.gradient(&x_new));
        if grad_new.iter().any(|v| !v.is_finite()) {
            break;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if memory.len() == LBFGS_MEMORY {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        grad = grad_new;
    }

    let final_pg = projected_gradient(problem, &x, &grad);
    let final_norm = inf_norm(&final_pg);
    if !converged {
        converged = final_norm < tol;
    }
    Ok(OptimizerReport {
        solution: x,
        objective_value: -fx,
        iterations,
        converged,
        final_grad_norm: final_norm,
    })
}

/// Projection residual x - P(x - g): zero exactly at a constrained
/// stationary point.
fn projected_gradient(problem: &BlockProblem, x: &[f64], grad: &[f64]) -> Vec<f64> {
    let mut stepped: Vec<f64> = x.iter().zip(grad).map(|(xi, gi)| xi - gi).collect();
    problem.clamp(&mut stepped);
    x.iter().zip(&stepped).map(|(xi, si)| xi - si).collect()
}

fn active_set(problem: &BlockProblem, x: &[f64], grad: &[f64]) -> Vec<bool> {
    let mut active = vec![false; x.len()];
    if let Some(lo) = &problem.lower {
        for i in 0..x.len() {
            if x[i] - lo[i] <= ACTIVE_EPS && grad[i] > 0.0 {
                active[i] = true;
            }
        }
    }
    if let Some(hi) = &problem.upper {
        for i in 0..x.len() {
            if hi[i] - x[i] <= ACTIVE_EPS && grad[i] < 0.0 {
                active[i] = true;
            }
        }
    }
    active
}

/// Standard two-loop recursion; returns -H g.
fn two_loop_direction(memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, grad: &[f64]) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let alpha = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = memory.back() {
        let yy = dot(y, y);
        if yy > 0.0 {
            let scale = dot(s, y) / yy;
            for qi in q.iter_mut() {
                *qi *= scale;
            }
        }
    }
    for ((s, y, rho), alpha) in memory.iter().zip(alphas.iter().rev()) {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha - beta) * si;
        }
    }
    neg(q)
}

/// Compare the analytic gradient against central differences at `point`.
/// Returns the worst per-coordinate relative error, with denominator
/// max(1, |analytic|). The step shrinks per coordinate when the stencil
/// would leave the box.
pub fn grad_check(problem: &BlockProblem, point: &[f64], step: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Validation(format!("step {step} outside [1e-7, 1e-3]")));
    }
    if point.len() != problem.dim {
        return Err(Error::Validation("point dimension mismatch".into()));
    }
    if !problem.in_box(point) {
        return Err(Error::Validation("point violates the bounds".into()));
    }
    let analytic = problem.gradient(point);
    let mut worst = 0.0_f64;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let mut h = step;
        if let Some(lo) = &problem.lower {
            let room = point[i] - lo[i];
            if room < h {
                h = (0.4 * room).max(f64::MIN_POSITIVE);
            }
        }
        if let Some(hi) = &problem.upper {
            let room = hi[i] - point[i];
            if room < h {
                h = h.min((0.4 * room).max(f64::MIN_POSITIVE));
            }
        }
        if h <= 0.0 || !h.is_finite() {
            return Err(Error::Validation(format!(
                "coordinate {i} has no room for a finite-difference stencil"
            )));
        }
        x[i] = point[i] + h;
        let f_plus = problem.objective(&x);
        x[i] = point[i] - h;
        let f_minus = problem.objective(&x);
        x[i] = point[i];
        let fd = (f_plus - f_minus) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

#[inline]
fn neg(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        *x = -*x;
    }
    v
}
