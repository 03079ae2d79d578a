//! Fused Gromov-Wasserstein between two attributed graphs:
//!
//! `E(T) = θ ⟨M, T⟩ + (1 − θ) Σ_{i,j,k,l} (A_ik − B_jl)² T_ij T_kl`
//!
//! with feature cost `M`, structure matrices `A`, `B` and trade-off `θ`.
//! The exact mode runs conditional gradient (Frank-Wolfe): linearize, solve
//! the linear OT step exactly, then take the exact line-search step of the
//! quadratic. The entropic mode iterates the fixed point
//! `T ← sinkhorn(θ M + (1 − θ) L(T))`.

use ndarray::{Array1, Array2, Axis};

use super::{emd, sinkhorn_unbalanced, transport_cost, Histogram, SinkhornParams, TransportPlan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum FgwInner {
    /// Exact linear OT steps with line search.
    Exact,
    /// Entropic fixed-point iteration with the given Sinkhorn parameters.
    Sinkhorn(SinkhornParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgwProblem {
    pub structure_a: Array2<f64>,
    pub structure_b: Array2<f64>,
    /// `[m, n]` cost between vertex features.
    pub feature_cost: Array2<f64>,
    /// Weight on the feature term, in `[0, 1]`.
    pub trade_off: f64,
    pub alpha: Histogram,
    pub beta: Histogram,
    pub inner: FgwInner,
    pub max_iters: usize,
    /// Stop when the plan moves less than this in max norm.
    pub tol: f64,
}

impl FgwProblem {
    /// Uniform marginals, exact inner solver and default stopping rules.
    pub fn new(
        structure_a: Array2<f64>,
        structure_b: Array2<f64>,
        feature_cost: Array2<f64>,
        trade_off: f64,
    ) -> Self {
        let (m, n) = (structure_a.nrows(), structure_b.nrows());
        FgwProblem {
            structure_a,
            structure_b,
            feature_cost,
            trade_off,
            alpha: Histogram::uniform(m),
            beta: Histogram::uniform(n),
            inner: FgwInner::Exact,
            max_iters: 10_000,
            tol: 1e-7,
        }
    }

    fn validate(&self) -> Result<()> {
        let (m, n) = (self.alpha.len(), self.beta.len());
        for (name, s, k) in [("structure_a", &self.structure_a, m), ("structure_b", &self.structure_b, n)] {
            if s.dim() != (k, k) {
                return Err(Error::dims(format!("{name} size"), k, s.nrows()));
            }
            for ((i, j), &v) in s.indexed_iter() {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::InvalidParameter(format!("{name} entries must be finite and >= 0")));
                }
                if i == j && v != 0.0 {
                    return Err(Error::InvalidParameter(format!("{name} must have a zero diagonal")));
                }
                if v != s[[j, i]] {
                    return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
                }
            }
        }
        if self.feature_cost.dim() != (m, n) {
            return Err(Error::dims("feature cost rows", m, self.feature_cost.nrows()));
        }
        if self.feature_cost.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidParameter("feature cost entries must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.trade_off) {
            return Err(Error::InvalidParameter(format!("trade_off {} outside [0, 1]", self.trade_off)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("tol must be positive".into()));
        }
        Ok(())
    }

    /// `L(T)_ij = Σ_kl (A_ik − B_jl)² T_kl`, via the square-loss expansion
    /// `A²(T1)1ᵀ + 1(B²Tᵀ1)ᵀ − 2 A T Bᵀ`.
    fn tensor_product(&self, t: &Array2<f64>) -> Array2<f64> {
        let a = &self.structure_a;
        let b = &self.structure_b;
        let rows = t.sum_axis(Axis(1));
        let cols = t.sum_axis(Axis(0));
        let left: Array1<f64> = a.mapv(|x| x * x).dot(&rows);
        let right: Array1<f64> = b.mapv(|x| x * x).dot(&cols);
        let cross = a.dot(t).dot(&b.t());
        let (m, n) = t.dim();
        Array2::from_shape_fn((m, n), |(i, j)| left[i] + right[j] - 2.0 * cross[[i, j]])
    }

    /// The same problem with the roles of the two graphs swapped.
    fn transposed(&self) -> FgwProblem {
        FgwProblem {
            structure_a: self.structure_b.clone(),
            structure_b: self.structure_a.clone(),
            feature_cost: self.feature_cost.t().as_standard_layout().into_owned(),
            trade_off: self.trade_off,
            alpha: self.beta.clone(),
            beta: self.alpha.clone(),
            inner: self.inner.clone(),
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }

    fn quadratic(&self, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        (&self.tensor_product(y) * x).sum()
    }

    fn energy(&self, t: &Array2<f64>) -> f64 {
        let value = self.trade_off * transport_cost(t, &self.feature_cost)
            + (1.0 - self.trade_off) * self.quadratic(t, t);
        value.max(0.0)
    }
}

/// Fused objective of a given coupling, evaluated term by term in `O(m²n²)`.
pub fn fgw_objective(problem: &FgwProblem, coupling: &Array2<f64>) -> f64 {
    let (m, n) = coupling.dim();
    let mut quad = 0.0;
    for i in 0..m {
        for j in 0..n {
            let tij = coupling[[i, j]];
            if tij == 0.0 {
                continue;
            }
            for k in 0..m {
                for l in 0..n {
                    let d = problem.structure_a[[i, k]] - problem.structure_b[[j, l]];
                    quad += d * d * tij * coupling[[k, l]];
                }
            }
        }
    }
    problem.trade_off * transport_cost(coupling, &problem.feature_cost) + (1.0 - problem.trade_off) * quad
}

/// Returns the fused distance and the coupling attaining it.
///
/// The exact mode starts conditional gradient from both the product coupling
/// and the feature-only optimal plan. Both modes also solve the transposed
/// problem and keep the lower energy, so `d(A, B) = d(B, A)` exactly.
pub fn fgw_distance(problem: &FgwProblem) -> Result<(f64, TransportPlan)> {
    problem.validate()?;
    let (e1, p1) = solve_oriented(problem)?;
    let (e2, mut p2) = solve_oriented(&problem.transposed())?;
    if e2 < e1 {
        p2.coupling = p2.coupling.t().as_standard_layout().into_owned();
        p2.objective = transport_cost(&p2.coupling, &problem.feature_cost);
        Ok((e2, p2))
    } else {
        Ok((e1, p1))
    }
}

fn solve_oriented(problem: &FgwProblem) -> Result<(f64, TransportPlan)> {
    match &problem.inner {
        FgwInner::Exact => {
            let product = outer(&problem.alpha, &problem.beta);
            let feature_plan = emd(&problem.alpha, &problem.beta, &problem.feature_cost)?.coupling;
            let (e1, p1) = frank_wolfe(problem, product)?;
            let (e2, p2) = frank_wolfe(problem, feature_plan)?;
            Ok(if e2 < e1 { (e2, p2) } else { (e1, p1) })
        }
        FgwInner::Sinkhorn(params) => fixed_point(problem, params),
    }
}

fn outer(a: &Histogram, b: &Histogram) -> Array2<f64> {
    let (wa, wb) = (a.weights(), b.weights());
    Array2::from_shape_fn((wa.len(), wb.len()), |(i, j)| wa[i] * wb[j])
}

fn frank_wolfe(problem: &FgwProblem, mut t: Array2<f64>) -> Result<(f64, TransportPlan)> {
    let theta = problem.trade_off;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < problem.max_iters {
        iterations += 1;
        let lin = problem.tensor_product(&t);
        let grad = &problem.feature_cost * theta + &lin * (2.0 * (1.0 - theta));
        let shift = grad.iter().copied().fold(f64::INFINITY, f64::min);
        let direction = emd(&problem.alpha, &problem.beta, &grad.mapv(|g| g - shift))?.coupling;
        let delta = &direction - &t;
        // E(t + τΔ) = E(t) + τ b + τ² a
        let b = (&grad * &delta).sum();
        let a = (1.0 - theta) * problem.quadratic(&delta, &delta);
        let step = if a > 0.0 {
            (-b / (2.0 * a)).clamp(0.0, 1.0)
        } else if a + b < 0.0 {
            1.0
        } else {
            0.0
        };
        let moved = delta.iter().fold(0.0f64, |m, d| m.max((step * d).abs()));
        if step > 0.0 {
            t.scaled_add(step, &delta);
        }
        if moved < problem.tol {
            converged = true;
            break;
        }
    }
    let energy = problem.energy(&t);
    let objective = transport_cost(&t, &problem.feature_cost);
    Ok((
        energy,
        TransportPlan {
            coupling: t,
            objective,
            converged,
            iterations,
        },
    ))
}

fn fixed_point(problem: &FgwProblem, params: &SinkhornParams) -> Result<(f64, TransportPlan)> {
    let theta = problem.trade_off;
    let mut t = outer(&problem.alpha, &problem.beta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < problem.max_iters {
        iterations += 1;
        let lin = problem.tensor_product(&t).mapv(|v| v.max(0.0));
        let cost = &problem.feature_cost * theta + &lin * (1.0 - theta);
        let next = sinkhorn_unbalanced(&problem.alpha, &problem.beta, &cost, params)?.coupling;
        let moved = (&next - &t).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        t = next;
        if moved < problem.tol {
            converged = true;
            break;
        }
    }
    let energy = problem.energy(&t);
    let objective = transport_cost(&t, &problem.feature_cost);
    Ok((
        energy,
        TransportPlan {
            coupling: t,
            objective,
            converged,
            iterations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::brute::next_permutation;
    use ndarray::array;

    fn path3() -> Array2<f64> {
        array![[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]]
    }

    fn sq_cost(x: &[f64], y: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((x.len(), y.len()), |(i, j)| (x[i] - y[j]).powi(2))
    }

    /// Minimum of the fused energy over the n! permutation couplings,
    /// each evaluated by the explicit quadruple sum.
    fn brute_force_fgw(problem: &FgwProblem) -> f64 {
        let n = problem.alpha.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        loop {
            let t = TransportPlan::from_permutation(&perm, &problem.feature_cost).coupling;
            best = best.min(fgw_objective(problem, &t));
            if !next_permutation(&mut perm) {
                break;
            }
        }
        best
    }

    #[test]
    fn identical_graphs_have_zero_distance() {
        let x = [0.3, -1.0, 2.0];
        let p = FgwProblem::new(path3(), path3(), sq_cost(&x, &x), 0.5);
        let (d, _) = fgw_distance(&p).unwrap();
        assert!(d.abs() <= 1e-8, "{d}");
    }

    #[test]
    fn full_feature_weight_is_linear_ot() {
        let x = [0.0, 1.0, 5.0];
        let y = [4.0, 0.5, 1.5];
        let p = FgwProblem::new(path3(), path3(), sq_cost(&x, &y), 1.0);
        let (d, _) = fgw_distance(&p).unwrap();
        let exact = emd(&p.alpha, &p.beta, &p.feature_cost).unwrap().objective;
        assert!((d - exact).abs() < 1e-12);
    }

    #[test]
    fn reversed_path_against_enumeration() {
        let p = FgwProblem::new(path3(), path3(), sq_cost(&[0.0, 1.0, 2.0], &[2.0, 1.0, 0.0]), 0.5);
        let (d, plan) = fgw_distance(&p).unwrap();
        let brute = brute_force_fgw(&p);
        assert!(d >= 0.0);
        assert!(d <= brute + 1e-8, "{d} > {brute}");
        // the reversal is an automorphism matching the features exactly
        assert!(brute.abs() < 1e-15);
        assert!((fgw_objective(&p, &plan.coupling) - d).abs() < 1e-10);
    }

    #[test]
    fn expansion_matches_explicit_sum() {
        let a = array![[0.0, 1.0, 3.0], [1.0, 0.0, 2.0], [3.0, 2.0, 0.0]];
        let b = array![[0.0, 2.0], [2.0, 0.0]];
        let m = array![[0.1, 0.4], [0.2, 0.9], [0.3, 0.0]];
        let mut p = FgwProblem::new(a, b, m, 0.3);
        p.max_iters = 1;
        let t = array![[0.1, 0.2333333333333333], [0.2, 0.1333333333333333], [0.2, 0.1333333333333334]];
        assert!((p.energy(&t) - fgw_objective(&p, &t)).abs() < 1e-12);
    }

    #[test]
    fn entropic_mode_runs() {
        let x = [0.0, 1.0, 2.0];
        let mut p = FgwProblem::new(path3(), path3(), sq_cost(&x, &x), 0.5);
        p.inner = FgwInner::Sinkhorn(SinkhornParams {
            epsilon: 1e-2,
            rho_alpha: f64::INFINITY,
            rho_beta: f64::INFINITY,
            ..Default::default()
        });
        let (d, plan) = fgw_distance(&p).unwrap();
        assert!(d >= 0.0 && d < 0.1, "{d}");
        assert!(plan.coupling.iter().all(|t| *t >= 0.0));
    }

    #[test]
    fn validation() {
        let bad = array![[0.0, 1.0], [2.0, 0.0]];
        let p = FgwProblem::new(bad, path3(), Array2::zeros((2, 3)), 0.5);
        assert!(fgw_distance(&p).is_err());
        let p = FgwProblem::new(path3(), path3(), Array2::zeros((3, 3)), 1.5);
        assert!(fgw_distance(&p).is_err());
    }
}
