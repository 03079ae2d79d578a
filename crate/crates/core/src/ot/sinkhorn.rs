//! Unbalanced entropic OT:
//!
//! `min_T ⟨T,C⟩ + ρ_α KL(T1‖α) + ρ_β KL(Tᵀ1‖β) + ε KL(T‖αβᵀ)`
//!
//! with generalized KL `KL(x‖y) = Σ x log(x/y) − x + y`. The minimizer has the
//! form `T_ij = α_i β_j exp((f_i + g_j − C_ij)/ε)`; alternating updates of the
//! potentials use the damped exponent `ρ/(ρ+ε)`. An infinite `ρ` gives the
//! balanced problem.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use super::{check_dims, transport_cost, Histogram, TransportPlan};
use crate::error::{Error, Result};

/// Above this `max(C)/ε` the scaling-domain kernel underflows; use potentials.
const LOG_DOMAIN_RATIO: f64 = 100.0;
/// Scaling vectors beyond this magnitude trigger the log-domain fallback.
const SCALING_LIMIT: f64 = 1e100;
const STAGE_TOL: f64 = 1e-6;
const STAGE_MAX_ITERS: usize = 2000;
/// Alternating sweeps before switching to Newton steps on the dual.
const SWEEPS_BEFORE_NEWTON: usize = 50;
const ANNEAL_FACTOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub rho_alpha: f64,
    pub rho_beta: f64,
    pub max_iters: usize,
    /// Stop when the log-scalings move less than this in max norm.
    pub tol: f64,
    /// Anneal ε geometrically from the cost scale down to `epsilon`,
    /// warm-starting each stage. Same fixed point, far fewer iterations at small ε.
    pub epsilon_scaling: bool,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            epsilon: 5e-4,
            rho_alpha: 1.0,
            rho_beta: 1.0,
            max_iters: 10_000,
            tol: 1e-9,
            epsilon_scaling: true,
        }
    }
}

impl SinkhornParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        for (name, rho) in [("rho_alpha", self.rho_alpha), ("rho_beta", self.rho_beta)] {
            if !(rho > 0.0) {
                return bad(format!("{name} must be positive, got {rho}"));
            }
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        Ok(())
    }
}

fn damping(rho: f64, epsilon: f64) -> f64 {
    if rho.is_infinite() {
        1.0
    } else {
        rho / (rho + epsilon)
    }
}

fn generalized_kl(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        y
    } else {
        x * (x / y).ln() - x + y
    }
}

/// Value of the unbalanced functional at `coupling`. Infinite `ρ` terms are
/// dropped (the marginal is treated as a hard constraint).
pub fn unbalanced_objective(
    alpha: &Histogram,
    beta: &Histogram,
    cost: &Array2<f64>,
    coupling: &Array2<f64>,
    params: &SinkhornParams,
) -> f64 {
    let (a, b) = (alpha.weights(), beta.weights());
    let rows = coupling.sum_axis(ndarray::Axis(1));
    let cols = coupling.sum_axis(ndarray::Axis(0));
    let mut value = transport_cost(coupling, cost);
    if params.rho_alpha.is_finite() {
        value += params.rho_alpha * rows.iter().zip(a).map(|(&x, &y)| generalized_kl(x, y)).sum::<f64>();
    }
    if params.rho_beta.is_finite() {
        value += params.rho_beta * cols.iter().zip(b).map(|(&x, &y)| generalized_kl(x, y)).sum::<f64>();
    }
    let mut entropic = 0.0;
    for ((i, j), &t) in coupling.indexed_iter() {
        entropic += generalized_kl(t, a[i] * b[j]);
    }
    value + params.epsilon * entropic
}

/// Solves the unbalanced problem. Non-convergence within `max_iters` is
/// reported through `converged = false`, not as an error.
pub fn sinkhorn_unbalanced(
    alpha: &Histogram,
    beta: &Histogram,
    cost: &Array2<f64>,
    params: &SinkhornParams,
) -> Result<TransportPlan> {
    Solver::new(alpha, beta, cost, params)?.run(None)
}

/// Like [`sinkhorn_unbalanced`], also recording the functional value every
/// `every` iterations of the final-ε stage.
pub fn sinkhorn_unbalanced_with_history(
    alpha: &Histogram,
    beta: &Histogram,
    cost: &Array2<f64>,
    params: &SinkhornParams,
    every: usize,
) -> Result<(TransportPlan, Vec<f64>)> {
    let mut history = Vec::new();
    let plan = Solver::new(alpha, beta, cost, params)?.run(Some((every.max(1), &mut history)))?;
    Ok((plan, history))
}

struct Solver<'a> {
    alpha: &'a Histogram,
    beta: &'a Histogram,
    cost: &'a Array2<f64>,
    params: &'a SinkhornParams,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    /// Potentials `f`, `g` (log-scalings times ε).
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
}

impl<'a> Solver<'a> {
    fn new(
        alpha: &'a Histogram,
        beta: &'a Histogram,
        cost: &'a Array2<f64>,
        params: &'a SinkhornParams,
    ) -> Result<Self> {
        check_dims(alpha, beta, cost)?;
        params.validate()?;
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("cost entries must be finite".into()));
        }
        Ok(Solver {
            alpha,
            beta,
            cost,
            params,
            log_a: alpha.weights().iter().map(|w| w.ln()).collect(),
            log_b: beta.weights().iter().map(|w| w.ln()).collect(),
            f: vec![0.0; alpha.len()],
            g: vec![0.0; beta.len()],
            iterations: 0,
        })
    }

    fn run(mut self, mut history: Option<(usize, &mut Vec<f64>)>) -> Result<TransportPlan> {
        let eps = self.params.epsilon;
        let c_max = self.cost.iter().copied().fold(0.0f64, |m, c| m.max(c.abs()));
        let mut converged = false;

        if self.params.epsilon_scaling && c_max > eps {
            let mut stage_eps = c_max;
            while stage_eps > eps {
                self.log_iterate(stage_eps, STAGE_TOL, STAGE_MAX_ITERS, None)?;
                stage_eps *= ANNEAL_FACTOR;
            }
        }

        // max_iters bounds the iterations at the target ε
        let start = self.iterations;
        {
            let remaining = self.params.max_iters;
            let use_scaling = !self.params.epsilon_scaling && c_max / eps <= LOG_DOMAIN_RATIO;
            let mut done_scaling = false;
            if use_scaling {
                // without a history the scalings only warm-start the Newton stage
                let budget = if history.is_some() { remaining } else { remaining.min(SWEEPS_BEFORE_NEWTON) };
                match self.scaling_iterate(budget, history.as_mut().map(|(k, h)| (*k, &mut **h))) {
                    Some(true) => {
                        converged = true;
                        done_scaling = true;
                    }
                    Some(false) => done_scaling = history.is_some() || budget == remaining,
                    None => {} // overflow: fall back to potentials from the last finite state
                }
            }
            if !done_scaling {
                let remaining = self.params.max_iters.saturating_sub(self.iterations - start);
                converged = self.log_iterate(
                    eps,
                    self.params.tol,
                    remaining,
                    history.as_mut().map(|(k, h)| (*k, &mut **h)),
                )?;
            }
        }

        let coupling = self.coupling(eps);
        if coupling.iter().any(|t| !t.is_finite()) {
            return Err(Error::NumericalFailure(
                "non-finite transport plan after log-domain iterations".into(),
            ));
        }
        let objective = transport_cost(&coupling, self.cost);
        Ok(TransportPlan {
            coupling,
            objective,
            converged,
            iterations: self.iterations,
        })
    }

    fn coupling(&self, eps: f64) -> Array2<f64> {
        let (m, n) = self.cost.dim();
        Array2::from_shape_fn((m, n), |(i, j)| {
            let a = self.alpha.weights()[i];
            let b = self.beta.weights()[j];
            if a == 0.0 || b == 0.0 {
                0.0
            } else {
                a * b * ((self.f[i] + self.g[j] - self.cost[[i, j]]) / eps).exp()
            }
        })
    }

    fn record(&self, eps: f64, every: usize, history: &mut Vec<f64>, stage_iter: usize) {
        if stage_iter % every == 0 {
            let t = self.coupling(eps);
            history.push(unbalanced_objective(
                self.alpha,
                self.beta,
                self.cost,
                &t,
                &SinkhornParams {
                    epsilon: eps,
                    ..*self.params
                },
            ));
        }
    }

    /// Stabilized updates on the potentials. Returns whether `tol` was met.
    fn log_iterate(
        &mut self,
        eps: f64,
        tol: f64,
        budget: usize,
        mut history: Option<(usize, &mut Vec<f64>)>,
    ) -> Result<bool> {
        let mut buf = vec![0.0; self.f.len().max(self.g.len())];
        let (mut f_prev, mut g_prev) = (self.f.clone(), self.g.clone());
        for it in 1..=budget {
            if it > SWEEPS_BEFORE_NEWTON && history.is_none() {
                return self.newton(eps, tol, budget - it + 1);
            }
            self.iterations += 1;
            self.sweep(eps, &mut buf);
            let mut change = 0.0f64;
            for (new, old) in self.f.iter().zip(&f_prev).chain(self.g.iter().zip(&g_prev)) {
                change = change.max((new - old).abs() / eps);
            }
            f_prev.copy_from_slice(&self.f);
            g_prev.copy_from_slice(&self.g);
            if change.is_nan() || self.f.iter().chain(&self.g).any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure(format!(
                    "non-finite potentials at iteration {} (epsilon {eps})",
                    self.iterations
                )));
            }
            if let Some((every, h)) = history.as_mut() {
                self.record(eps, *every, h, it);
            }
            if change < tol {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// One exact block update of `f` then `g`.
    fn sweep(&mut self, eps: f64, buf: &mut [f64]) {
        let (m, n) = self.cost.dim();
        let tau_a = damping(self.params.rho_alpha, eps);
        let tau_b = damping(self.params.rho_beta, eps);
        for i in 0..m {
            for j in 0..n {
                buf[j] = self.log_b[j] + (self.g[j] - self.cost[[i, j]]) / eps;
            }
            let lse = log_sum_exp(&buf[..n]);
            self.f[i] = if lse.is_finite() { -tau_a * eps * lse } else { 0.0 };
        }
        for j in 0..n {
            for i in 0..m {
                buf[i] = self.log_a[i] + (self.f[i] - self.cost[[i, j]]) / eps;
            }
            let lse = log_sum_exp(&buf[..m]);
            self.g[j] = if lse.is_finite() { -tau_b * eps * lse } else { 0.0 };
        }
    }

    /// Value of the concave dual at potentials `(f, g)`; maximized by the fixed point.
    fn dual(&self, eps: f64, f: &[f64], g: &[f64]) -> f64 {
        let (a, b) = (self.alpha.weights(), self.beta.weights());
        let penalty = |w: &ndarray::Array1<f64>, p: &[f64], rho: f64| -> f64 {
            if rho.is_infinite() {
                w.iter().zip(p).map(|(w, p)| w * p).sum()
            } else {
                w.iter().zip(p).map(|(w, p)| w * rho * -(-p / rho).exp_m1()).sum()
            }
        };
        let (m, n) = self.cost.dim();
        let mut terms = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                terms.push(self.log_a[i] + self.log_b[j] + (f[i] + g[j] - self.cost[[i, j]]) / eps);
            }
        }
        let mass = log_sum_exp(&terms).exp();
        penalty(a, f, self.params.rho_alpha) + penalty(b, g, self.params.rho_beta)
            - eps * (mass - self.alpha.mass() * self.beta.mass())
    }

    /// Damped Newton ascent on the dual, each step preceded by a sweep. Near-permutation plans make every
    /// row/column pair a slow mode of the alternating updates (contraction
    /// `(ρ/(ρ+ε))²`); the Newton system resolves them jointly.
    fn newton(&mut self, eps: f64, tol: f64, budget: usize) -> Result<bool> {
        let (m, n) = self.cost.dim();
        let (a, b) = (self.alpha.weights().clone(), self.beta.weights().clone());
        let inv = |rho: f64| if rho.is_infinite() { 0.0 } else { 1.0 / rho };
        let (ia, ib) = (inv(self.params.rho_alpha), inv(self.params.rho_beta));
        let mut buf = vec![0.0; m.max(n)];
        for _ in 0..budget {
            self.iterations += 1;
            // rows or columns whose mass underflowed are solved exactly by a sweep,
            // where Newton would only creep toward them
            self.sweep(eps, &mut buf);
            let t = self.coupling(eps);
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericalFailure(format!(
                    "non-finite plan in Newton step at iteration {}",
                    self.iterations
                )));
            }
            let rows = t.sum_axis(ndarray::Axis(1));
            let cols = t.sum_axis(ndarray::Axis(0));
            let ea: Vec<f64> = self.f.iter().map(|f| (-f * ia).exp()).collect();
            let eb: Vec<f64> = self.g.iter().map(|g| (-g * ib).exp()).collect();
            let mut grad = DVector::zeros(m + n);
            let mut hess = DMatrix::zeros(m + n, m + n);
            for i in 0..m {
                grad[i] = a[i] * ea[i] - rows[i];
                hess[(i, i)] = a[i] * ia * ea[i] + rows[i] / eps;
            }
            for j in 0..n {
                grad[m + j] = b[j] * eb[j] - cols[j];
                hess[(m + j, m + j)] = b[j] * ib * eb[j] + cols[j] / eps;
            }
            // marginal mismatch relative to the transported mass; rows whose mass
            // underflowed carry no weight in the plan
            let total = rows.sum();
            let residual = grad.amax() / total;
            if residual < tol {
                return Ok(true);
            }
            for ((i, j), &tij) in t.indexed_iter() {
                hess[(i, m + j)] = tij / eps;
                hess[(m + j, i)] = tij / eps;
            }
            let scale = (0..m + n).map(|k| hess[(k, k)]).fold(0.0f64, f64::max);
            let mut ridge = 1e-13 * scale.max(f64::MIN_POSITIVE);
            let step = loop {
                let mut h = hess.clone();
                for k in 0..m + n {
                    h[(k, k)] += ridge;
                }
                if let Some(chol) = h.cholesky() {
                    break chol.solve(&grad);
                }
                ridge *= 100.0;
                if !(ridge < scale) {
                    return Err(Error::NumericalFailure("singular Newton system".into()));
                }
            };
            let slope = grad.dot(&step);
            let current = self.dual(eps, &self.f, &self.g);
            let mut tau = 1.0;
            let accepted = loop {
                let f: Vec<f64> = (0..m).map(|i| self.f[i] + tau * step[i]).collect();
                let g: Vec<f64> = (0..n).map(|j| self.g[j] + tau * step[m + j]).collect();
                let value = self.dual(eps, &f, &g);
                let flat = (value - current).abs() <= 1e-13 * (1.0 + current.abs());
                if value.is_finite() && (value >= current + 1e-4 * tau * slope || flat) {
                    break Some((f, g));
                }
                tau *= 0.5;
                if tau < 1e-12 {
                    break None;
                }
            };
            let Some((f, g)) = accepted else {
                // no ascent left at working precision
                return Ok(false);
            };
            self.f = f;
            self.g = g;
        }
        Ok(false)
    }

    /// Plain scaling iterations with the Gibbs kernel. `None` signals overflow;
    /// the potentials then hold the last finite state.
    fn scaling_iterate(&mut self, budget: usize, mut history: Option<(usize, &mut Vec<f64>)>) -> Option<bool> {
        let eps = self.params.epsilon;
        let (m, n) = self.cost.dim();
        let (a, b) = (self.alpha.weights(), self.beta.weights());
        let tau_a = damping(self.params.rho_alpha, eps);
        let tau_b = damping(self.params.rho_beta, eps);
        let kernel = self.cost.mapv(|c| (-c / eps).exp());
        let mut u: Vec<f64> = self.f.iter().map(|f| (f / eps).exp()).collect();
        let mut v: Vec<f64> = self.g.iter().map(|g| (g / eps).exp()).collect();
        for it in 1..=budget {
            self.iterations += 1;
            let mut change = 0.0f64;
            let mut u_new = vec![0.0; m];
            for i in 0..m {
                let s: f64 = (0..n).map(|j| kernel[[i, j]] * b[j] * v[j]).sum();
                u_new[i] = if s > 0.0 { s.powf(-tau_a) } else { f64::INFINITY };
            }
            let mut v_new = vec![0.0; n];
            for j in 0..n {
                let s: f64 = (0..m).map(|i| kernel[[i, j]] * a[i] * u_new[i]).sum();
                v_new[j] = if s > 0.0 { s.powf(-tau_b) } else { f64::INFINITY };
            }
            let overflow = u_new
                .iter()
                .chain(&v_new)
                .any(|x| !x.is_finite() || *x > SCALING_LIMIT || *x == 0.0);
            if overflow {
                return None;
            }
            for (old, new) in u.iter().zip(&u_new).chain(v.iter().zip(&v_new)) {
                change = change.max((new.ln() - old.ln()).abs());
            }
            u = u_new;
            v = v_new;
            for (f, x) in self.f.iter_mut().zip(&u) {
                *f = eps * x.ln();
            }
            for (g, x) in self.g.iter_mut().zip(&v) {
                *g = eps * x.ln();
            }
            if let Some((every, h)) = history.as_mut() {
                self.record(eps, *every, h, it);
            }
            if change < self.params.tol {
                return Some(true);
            }
        }
        Some(false)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
