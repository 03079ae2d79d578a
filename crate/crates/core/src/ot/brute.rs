use ndarray::Array2;

use super::{check_dims, permutation_objective, Histogram, TransportPlan};
use crate::error::{Error, Result};

/// Largest `n` accepted by [`brute_force_ot`] (8! = 40320 couplings).
pub const BRUTE_FORCE_MAX: usize = 8;

/// Exhaustive minimum over the `n!` permutation couplings of a uniform square
/// problem. The first minimum in lexicographic enumeration order wins ties.
pub fn brute_force_ot(alpha: &Histogram, beta: &Histogram, cost: &Array2<f64>) -> Result<TransportPlan> {
    check_dims(alpha, beta, cost)?;
    let n = alpha.len();
    if n != beta.len() {
        return Err(Error::dims("brute-force oracle needs square input", n, beta.len()));
    }
    if n > BRUTE_FORCE_MAX {
        return Err(Error::OracleTooLarge {
            max: BRUTE_FORCE_MAX,
            actual: n,
        });
    }
    if !alpha.is_uniform() || !beta.is_uniform() {
        return Err(Error::InvalidParameter(
            "brute-force oracle needs uniform marginals".into(),
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_value = permutation_objective(cost, &perm);
    let mut count = 1usize;
    while next_permutation(&mut perm) {
        count += 1;
        let value = permutation_objective(cost, &perm);
        if value < best_value {
            best_value = value;
            best.copy_from_slice(&perm);
        }
    }
    let mut plan = TransportPlan::from_permutation(&best, cost);
    plan.iterations = count;
    Ok(plan)
}

/// Advances to the next lexicographic permutation; false after the last one.
pub(crate) fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn enumerates_all_permutations() {
        let mut p = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 24);
    }

    #[test]
    fn single_point() {
        let h = Histogram::uniform(1);
        let plan = brute_force_ot(&h, &h, &array![[3.0]]).unwrap();
        assert_eq!(plan.coupling, array![[1.0]]);
        assert_eq!(plan.objective, 3.0);
    }

    #[test]
    fn size_guard() {
        let h = Histogram::uniform(9);
        assert!(matches!(
            brute_force_ot(&h, &h, &Array2::zeros((9, 9))),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn not_worse_than_sampled_plans() {
        let c = array![[3.0, 1.0, 2.0], [0.5, 4.0, 1.0], [2.0, 2.0, 0.0]];
        let h = Histogram::uniform(3);
        let best = brute_force_ot(&h, &h, &c).unwrap();
        // every doubly stochastic mix of two permutations is feasible
        let pa = TransportPlan::from_permutation(&[0, 1, 2], &c);
        let pb = TransportPlan::from_permutation(&[2, 0, 1], &c);
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let mix = &pa.coupling * t + &pb.coupling * (1.0 - t);
            assert!(best.objective <= super::super::transport_cost(&mix, &c) + 1e-15);
        }
    }
}
