//! Exact small-instance transport via minimum-cost perfect matching.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const EXACT_MAX_POINTS: usize = 64;

/// Minimum-cost perfect matching on a square `n x n` cost matrix (row-major).
/// Returns the total cost and `assign[row] = col`.
///
/// Shortest augmenting paths with row/column potentials, O(n^3).
pub fn min_cost_assignment(cost: &[f64], n: usize) -> (f64, Vec<usize>) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return (0.0, Vec::new());
    }
    // 1-based internals: column 0 is the virtual source
    let inf = f64::INFINITY;
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = row_of_col[col0];
            let mut delta = inf;
            let mut col1 = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[(r0 - 1) * n + (col - 1)] - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            row_of_col[col0] = row_of_col[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for col in 1..=n {
        assign[row_of_col[col] - 1] = col - 1;
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(r, &c)| cost[r * n + c])
        .sum();
    (total, assign)
}

/// Squared 2-Wasserstein distance between two equal-size empirical
/// measures: optimal matching cost under squared Euclidean distance,
/// divided by the number of points. At most [`EXACT_MAX_POINTS`] points.
pub fn exact_wasserstein_sq_small<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (m, d) = (x.rows(), x.cols());
    if y.rows() != m || y.cols() != d {
        return Err(Error::dim(
            "exact_wasserstein_sq_small",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    if m > EXACT_MAX_POINTS {
        return Err(Error::dim(
            "exact_wasserstein_sq_small",
            format!("{m} points exceeds the limit of {EXACT_MAX_POINTS}"),
        ));
    }
    let mut cost = vec![0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            cost[i * m + j] = x
                .row(i)
                .iter()
                .zip(y.row(j))
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
        }
    }
    let (total, _) = min_cost_assignment(&cost, m);
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn brute(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for c in 0..n {
                if !used[c] {
                    used[c] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + c], best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = Rng::new(21);
        for n in 1..=6 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.uniform_range(-3.0, 5.0)).collect();
                let (total, assign) = min_cost_assignment(&cost, n);
                let mut seen = assign.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                assert!((total - brute(&cost, n)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_sets_cost_nothing() {
        let x = Tensor::from_rows(&[vec![0.0f64, 1.0], vec![2.0, -1.0], vec![5.0, 5.0]]).unwrap();
        let y = x.select_rows(&[2, 0, 1]);
        assert!(exact_wasserstein_sq_small(&x, &y).unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_pair() {
        let x = Tensor::from_rows(&[vec![0.0f64, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![3.0f64, 4.0]]).unwrap();
        assert_eq!(exact_wasserstein_sq_small(&x, &y).unwrap(), 25.0);
    }

    #[test]
    fn size_limits() {
        let a = Tensor::<f64>::zeros(&[65, 2]);
        assert!(exact_wasserstein_sq_small(&a, &a).is_err());
        let b = Tensor::<f64>::zeros(&[3, 2]);
        let c = Tensor::<f64>::zeros(&[4, 2]);
        assert!(exact_wasserstein_sq_small(&b, &c).is_err());
        let d = Tensor::<f64>::zeros(&[64, 2]);
        assert_eq!(exact_wasserstein_sq_small(&d, &d).unwrap(), 0.0);
    }
}
