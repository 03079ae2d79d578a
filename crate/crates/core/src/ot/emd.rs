use ndarray::Array2;

use super::{assignment::solve_assignment, check_dims, transport_cost, Histogram, TransportPlan};
use crate::error::{Error, Result};

const MASS_TOLERANCE: f64 = 1e-9;
/// Residual masses below this are treated as exhausted.
const RESIDUAL: f64 = 1e-15;

/// Exact solution of `min ⟨T, C⟩` over couplings with marginals `alpha`, `beta`.
///
/// Uniform square inputs go through [`solve_assignment`] and yield a
/// `(1/n)`-scaled permutation matrix. Everything else runs successive
/// shortest paths on the transportation network.
pub fn emd(alpha: &Histogram, beta: &Histogram, cost: &Array2<f64>) -> Result<TransportPlan> {
    check_dims(alpha, beta, cost)?;
    let (sa, sb) = (alpha.mass(), beta.mass());
    if (sa - sb).abs() > MASS_TOLERANCE {
        return Err(Error::UnbalancedMasses {
            source_mass: sa,
            target_mass: sb,
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParameter("cost entries must be finite".into()));
    }
    if alpha.len() == beta.len()
        && alpha.is_uniform()
        && beta.is_uniform()
        && alpha.weights()[0] == 1.0 / alpha.len() as f64
    {
        let perm = solve_assignment(cost);
        return Ok(TransportPlan::from_permutation(&perm, cost));
    }
    Ok(network_transport(alpha, beta, cost))
}

/// Successive shortest augmenting paths from a super-source through the
/// bipartite residual network, with Dijkstra on reduced costs.
fn network_transport(alpha: &Histogram, beta: &Histogram, cost: &Array2<f64>) -> TransportPlan {
    let (m, n) = cost.dim();
    // Shift so every arc cost is nonnegative; the optimum is unchanged.
    let shift = cost.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let c = |i: usize, j: usize| cost[[i, j]] - shift;

    let mut supply: Vec<f64> = alpha.weights().to_vec();
    let mut demand: Vec<f64> = beta.weights().to_vec();
    let mut flow = Array2::<f64>::zeros((m, n));
    // potentials: sources 0..m, sinks m..m+n; super-source and sink potentials tracked apart
    let mut pot = vec![0.0f64; m + n];
    let pot_source = 0.0f64;
    let mut pot_sink = 0.0f64;
    let mut iterations = 0usize;

    let total = supply.iter().sum::<f64>().min(demand.iter().sum());
    let mut shipped = 0.0f64;
    while total - shipped > RESIDUAL * total.max(1.0) {
        iterations += 1;
        let nodes = m + n;
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        for i in 0..m {
            if supply[i] > RESIDUAL {
                dist[i] = (pot_source - pot[i]).max(0.0);
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for (k, &d) in dist.iter().enumerate() {
                if !done[k] && d < best {
                    best = d;
                    u = k;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < m {
                for j in 0..n {
                    let v = m + j;
                    let rc = (c(u, j) + pot[u] - pot[v]).max(0.0);
                    if dist[u] + rc < dist[v] {
                        dist[v] = dist[u] + rc;
                        prev[v] = u;
                    }
                }
            } else {
                let j = u - m;
                for i in 0..m {
                    if flow[[i, j]] > RESIDUAL {
                        let rc = (-c(i, j) + pot[u] - pot[i]).max(0.0);
                        if dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        let mut sink_dist = f64::INFINITY;
        let mut end = usize::MAX;
        for j in 0..n {
            if demand[j] > RESIDUAL {
                let d = dist[m + j] + (pot[m + j] - pot_sink).max(0.0);
                if d < sink_dist {
                    sink_dist = d;
                    end = m + j;
                }
            }
        }
        if end == usize::MAX {
            break;
        }
        for (k, p) in pot.iter_mut().enumerate() {
            *p += dist[k].min(sink_dist);
        }
        pot_sink += sink_dist;

        // bottleneck along the path
        let mut amount = demand[end - m];
        let mut v = end;
        loop {
            let u = prev[v];
            if u == usize::MAX {
                amount = amount.min(supply[v]);
                break;
            }
            if u >= m {
                // backward arc sink u -> source v cancels flow[v][u-m]
                amount = amount.min(flow[[v, u - m]]);
            }
            v = u;
        }
        let start = v;
        let mut v = end;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < m {
                flow[[u, v - m]] += amount;
            } else {
                flow[[v, u - m]] -= amount;
                if flow[[v, u - m]] < RESIDUAL {
                    flow[[v, u - m]] = 0.0;
                }
            }
            v = u;
        }
        supply[start] -= amount;
        demand[end - m] -= amount;
        shipped += amount;
    }

    let objective = transport_cost(&flow, cost);
    TransportPlan {
        coupling: flow,
        objective,
        converged: true,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::brute_force_ot;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cost_matching() {
        let h = Histogram::uniform(2);
        let plan = emd(&h, &h, &array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(plan.coupling, array![[0.5, 0.0], [0.0, 0.5]]);
        assert_eq!(plan.objective, 0.0);
    }

    #[test]
    fn zero_cost_any_marginals() {
        let a = Histogram::new(array![0.2, 0.3, 0.5]).unwrap();
        let b = Histogram::new(array![0.6, 0.4]).unwrap();
        let plan = emd(&a, &b, &Array2::zeros((3, 2))).unwrap();
        assert_eq!(plan.objective, 0.0);
        assert!(plan.marginal_error(&a, &b) <= 1e-9);
    }

    #[test]
    fn mod_seven_instance_matches_enumeration() {
        let n = 5;
        let c = Array2::from_shape_fn((n, n), |(i, j)| ((i * j) % 7) as f64);
        let h = Histogram::uniform(n);
        let plan = emd(&h, &h, &c).unwrap();
        // the oracle: minimum over all 120 permutations of Σ C[i, σ(i)], divided by 5
        let oracle = brute_force_ot(&h, &h, &c).unwrap();
        assert_eq!(oracle.iterations, 120);
        assert_eq!(plan.objective, oracle.objective);
        // independently enumerated minimum sum is 3
        assert_eq!(plan.objective, 3.0 / 5.0);
        assert!(plan.as_permutation().is_some());
    }

    #[test]
    fn rejects_unbalanced_and_mismatched() {
        let a = Histogram::new(array![0.5, 0.5]).unwrap();
        let b = Histogram::new(array![0.5, 0.6]).unwrap();
        assert!(matches!(
            emd(&a, &b, &Array2::zeros((2, 2))),
            Err(Error::UnbalancedMasses { .. })
        ));
        assert!(matches!(
            emd(&a, &a, &Array2::zeros((3, 2))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// With two sources the LP reduces to filling source 0 from the columns
    /// where it is relatively cheapest; greedy on the cost difference is optimal.
    fn two_source_optimum(a: &[f64; 2], b: &[f64], c: &Array2<f64>) -> f64 {
        let n = b.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| {
            (c[[0, x]] - c[[1, x]]).partial_cmp(&(c[[0, y]] - c[[1, y]])).unwrap()
        });
        // greedily fill source 0 from columns where it is relatively cheapest
        let mut left = a[0];
        let mut total = 0.0;
        for &j in &order {
            let take = left.min(b[j]);
            total += take * c[[0, j]] + (b[j] - take) * c[[1, j]];
            left -= take;
        }
        total
    }

    #[test]
    fn rectangular_matches_two_source_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(2..7);
            let a0: f64 = rng.random_range(0.1..0.9);
            let a = [a0, 1.0 - a0];
            let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = b.iter().sum();
            b.iter_mut().for_each(|x| *x /= s);
            let c = Array2::from_shape_fn((2, n), |_| rng.random_range(0.0..1.0));
            let ha = Histogram::new(Array1::from(a.to_vec())).unwrap();
            let hb = Histogram::new(Array1::from(b.clone())).unwrap();
            let plan = emd(&ha, &hb, &c).unwrap();
            assert!(plan.marginal_error(&ha, &hb) <= 1e-9);
            assert!(plan.coupling.iter().all(|&t| t >= 0.0));
            let oracle = two_source_optimum(&a, &b, &c);
            assert!((plan.objective - oracle).abs() <= 1e-12, "{} vs {oracle}", plan.objective);
        }
    }

    #[test]
    fn network_path_agrees_with_assignment_on_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.random_range(2..8);
            let c = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..1.0));
            let h = Histogram::uniform(n);
            let exact = emd(&h, &h, &c).unwrap();
            let net = network_transport(&h, &h, &c);
            assert!((exact.objective - net.objective).abs() < 1e-12);
            assert!(net.marginal_error(&h, &h) <= 1e-9);
        }
    }
}
