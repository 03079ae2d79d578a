//! Discrete optimal transport between histograms.
//!
//! | Solver | Problem |
//! |--------|---------|
//! | [`emd`] | exact Kantorovich LP (assignment for uniform square inputs) |
//! | [`sinkhorn_unbalanced`] | entropic OT with KL-relaxed marginals |
//! | [`fgw_distance`] | fused Gromov-Wasserstein between attributed graphs |
//! | [`brute_force_ot`] | permutation enumeration, for testing |

mod assignment;
mod brute;
mod emd;
mod fgw;
mod sinkhorn;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

pub use assignment::solve_assignment;
pub use brute::{brute_force_ot, BRUTE_FORCE_MAX};
pub use emd::emd;
pub use fgw::{fgw_distance, fgw_objective, FgwInner, FgwProblem};
pub use sinkhorn::{
    sinkhorn_unbalanced, sinkhorn_unbalanced_with_history, unbalanced_objective, SinkhornParams,
};

/// Nonnegative weights over the support points of one side.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram(Array1<f64>);

impl Histogram {
    pub fn new(weights: Array1<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(
                "histogram weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Histogram(weights))
    }

    /// `1/n` on each of `n` points.
    pub fn uniform(n: usize) -> Self {
        Histogram(Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.0.sum()
    }

    pub(crate) fn is_uniform(&self) -> bool {
        self.0.iter().all(|&w| w == self.0[0])
    }
}

/// `[m, n]` matrix of finite nonnegative transport costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidParameter(
                "cost entries must be finite and nonnegative".into(),
            ));
        }
        Ok(CostMatrix(entries))
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Same matrix multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        CostMatrix::new(&self.0 * factor)
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }
}

/// Coupling produced by a solver, with its transport cost `⟨T, C⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Array1<f64> {
        self.coupling.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.coupling.sum_axis(Axis(0))
    }

    /// `max(‖T1 − α‖∞, ‖Tᵀ1 − β‖∞)`.
    pub fn marginal_error(&self, alpha: &Histogram, beta: &Histogram) -> f64 {
        let r = (&self.row_sums() - alpha.weights())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let c = (&self.col_sums() - beta.weights())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        r.max(c)
    }

    /// Row-to-column map when every row and column holds exactly one nonzero.
    pub fn as_permutation(&self) -> Option<Vec<usize>> {
        let (m, n) = self.coupling.dim();
        if m != n {
            return None;
        }
        let mut perm = Vec::with_capacity(m);
        let mut used = vec![false; n];
        for row in self.coupling.outer_iter() {
            let mut nz = row.iter().enumerate().filter(|(_, &v)| v != 0.0);
            let (j, _) = nz.next()?;
            if nz.next().is_some() || used[j] {
                return None;
            }
            used[j] = true;
            perm.push(j);
        }
        Some(perm)
    }

    /// `(1/n)·P` for the row-to-column permutation `perm`.
    pub fn from_permutation(perm: &[usize], cost: &Array2<f64>) -> Self {
        let n = perm.len();
        let mut coupling = Array2::zeros((n, n));
        for (i, &j) in perm.iter().enumerate() {
            coupling[[i, j]] = 1.0 / n as f64;
        }
        TransportPlan {
            coupling,
            objective: permutation_objective(cost, perm),
            converged: true,
            iterations: 0,
        }
    }

    /// `(1/n)·I`.
    pub fn identity(n: usize) -> Self {
        let perm: Vec<usize> = (0..n).collect();
        TransportPlan::from_permutation(&perm, &Array2::zeros((n, n)))
    }
}

/// `(Σ_i C[i, perm[i]]) / n`, summed in row order.
pub fn permutation_objective(cost: &Array2<f64>, perm: &[usize]) -> f64 {
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    total / perm.len() as f64
}

/// `⟨T, C⟩`.
pub fn transport_cost(coupling: &Array2<f64>, cost: &Array2<f64>) -> f64 {
    coupling
        .iter()
        .zip(cost.iter())
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, c)| t * c)
        .sum()
}

pub(crate) fn check_dims(alpha: &Histogram, beta: &Histogram, cost: &Array2<f64>) -> Result<()> {
    if cost.nrows() != alpha.len() {
        return Err(Error::dims("cost rows vs source histogram", alpha.len(), cost.nrows()));
    }
    if cost.ncols() != beta.len() {
        return Err(Error::dims("cost columns vs target histogram", beta.len(), cost.ncols()));
    }
    if alpha.is_empty() || beta.is_empty() {
        return Err(Error::InvalidParameter("empty histogram".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn histogram_and_cost_validation() {
        assert!(Histogram::new(array![0.5, -0.1]).is_err());
        assert!(CostMatrix::new(array![[0.0, f64::NAN]]).is_err());
        assert!(CostMatrix::new(array![[0.0, -1.0]]).is_err());
        assert!(Histogram::uniform(4).is_uniform());
        assert!((Histogram::uniform(3).mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn permutation_round_trip() {
        let c = array![[1.0, 2.0], [3.0, 4.0]];
        let plan = TransportPlan::from_permutation(&[1, 0], &c);
        assert_eq!(plan.as_permutation(), Some(vec![1, 0]));
        assert_eq!(plan.objective, 2.5);
        let soft = TransportPlan {
            coupling: array![[0.25, 0.25], [0.25, 0.25]],
            objective: 0.0,
            converged: true,
            iterations: 0,
        };
        assert_eq!(soft.as_permutation(), None);
    }
}
