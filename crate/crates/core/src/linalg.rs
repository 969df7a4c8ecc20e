//! Cholesky factorization and the Gaussian / unit-sphere samplers.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-5;
const MAX_RETRIES: usize = 3;

/// Default jitter for a covariance: `1e-6 * trace / d`.
pub fn default_jitter<T: Real>(sigma: &Tensor<T>) -> f64 {
    let d = sigma.rows();
    let trace: f64 = (0..d).map(|i| sigma.get2(i, i).as_f64()).sum();
    1e-6 * trace / d as f64
}

/// Lower-triangular `L` with `L L^T = sigma + jitter I`.
pub fn cholesky<T: Real>(sigma: &Tensor<T>, jitter: f64) -> Result<Tensor<T>> {
    cholesky_with_jitter(sigma, jitter).map(|(l, _)| l)
}

/// Like [`cholesky`], also returning the jitter that was finally applied.
/// A failed attempt is retried with ten times the jitter, at most three times.
pub fn cholesky_with_jitter<T: Real>(sigma: &Tensor<T>, jitter: f64) -> Result<(Tensor<T>, f64)> {
    if sigma.rank() != 2 || sigma.shape()[0] != sigma.shape()[1] {
        return Err(Error::dim("cholesky", format!("non-square {:?}", sigma.shape())));
    }
    let d = sigma.rows();
    let a: Vec<f64> = sigma.data().iter().map(|v| v.as_f64()).collect();
    for i in 0..d {
        for j in 0..i {
            if (a[i * d + j] - a[j * d + i]).abs() > SYMMETRY_TOL {
                return Err(Error::dim(
                    "cholesky",
                    format!("asymmetric at ({i},{j}): {} vs {}", a[i * d + j], a[j * d + i]),
                ));
            }
        }
    }
    let scale = ((0..d).map(|i| a[i * d + i].abs()).sum::<f64>() / d as f64).max(1e-12);
    let mut j = jitter;
    for attempt in 0..=MAX_RETRIES {
        if let Some(l) = factor(&a, d, j) {
            let data = l.into_iter().map(T::from_f64).collect();
            return Ok((Tensor::from_parts(vec![d, d], data)?, j));
        }
        if attempt < MAX_RETRIES {
            j = if j > 0.0 { j * 10.0 } else { 1e-6 * scale };
        }
    }
    Err(Error::Factorization { class: None })
}

fn factor(a: &[f64], d: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0f64; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// `n` rows of `mu + chol * eps`, `eps` standard normal.
pub fn sample_gaussian<T: Real>(
    mu: &[T],
    chol: &Tensor<T>,
    n: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let d = mu.len();
    if n == 0 {
        return Err(Error::dim("sample_gaussian", "n must be >= 1"));
    }
    if chol.shape() != [d, d] {
        return Err(Error::dim(
            "sample_gaussian",
            format!("mean dim {d}, factor {:?}", chol.shape()),
        ));
    }
    let mut out = Vec::with_capacity(n * d);
    let mut eps = vec![0f64; d];
    for _ in 0..n {
        eps.iter_mut().for_each(|e| *e = rng.normal());
        for i in 0..d {
            let row = chol.row(i);
            let s: f64 = (0..=i).map(|k| row[k].as_f64() * eps[k]).sum();
            out.push(T::from_f64(mu[i].as_f64() + s));
        }
    }
    Tensor::from_parts(vec![n, d], out)
}

/// `n` directions uniform on the unit sphere in `dim` dimensions.
pub fn sample_unit_sphere<T: Real>(dim: usize, n: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if dim == 0 || n == 0 {
        return Err(Error::dim("sample_unit_sphere", "dim and n must be >= 1"));
    }
    let mut out = Vec::with_capacity(n * dim);
    let mut g = vec![0f64; dim];
    for _ in 0..n {
        loop {
            g.iter_mut().for_each(|v| *v = rng.normal());
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                out.extend(g.iter().map(|v| T::from_f64(v / norm)));
                break;
            }
        }
    }
    Tensor::from_parts(vec![n, dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, matmul_nt};

    fn reconstruct(l: &Tensor<f64>) -> Tensor<f64> {
        matmul_nt(l, l).unwrap()
    }

    #[test]
    fn identity_factor() {
        let i = Tensor::<f64>::identity(3);
        assert_eq!(cholesky(&i, 0.0).unwrap(), i);
    }

    #[test]
    fn diagonal_factor() {
        let s = Tensor::from_rows(&[vec![4.0f64, 0.0], vec![0.0, 9.0]]).unwrap();
        let l = cholesky(&s, 0.0).unwrap();
        assert_eq!(l.data(), &[2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn random_spd_reconstructs() {
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let a = Tensor::new(vec![4, 4], (0..16).map(|_| rng.normal()).collect()).unwrap();
            let mut s = matmul(&a.transpose().unwrap(), &a).unwrap();
            for i in 0..4 {
                let v = s.get2(i, i) + 1.0;
                s.set2(i, i, v);
            }
            let l = cholesky(&s, 0.0).unwrap();
            assert!(reconstruct(&l).frobenius_distance(&s) < 1e-4);
            for i in 0..4 {
                for j in i + 1..4 {
                    assert_eq!(l.get2(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn singular_matrix_recovers_through_jitter_retry() {
        let s = Tensor::from_rows(&[vec![1.0f64, 1.0], vec![1.0, 1.0]]).unwrap();
        let (l, used) = cholesky_with_jitter(&s, 0.0).unwrap();
        assert!(used > 0.0);
        let mut target = s.clone();
        for i in 0..2 {
            target.set2(i, i, target.get2(i, i) + used);
        }
        assert!(reconstruct(&l).frobenius_distance(&target) < 1e-4);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let s = Tensor::from_rows(&[vec![1.0f64, 0.0], vec![0.0, -5.0]]).unwrap();
        assert!(matches!(cholesky(&s, 0.0), Err(Error::Factorization { .. })));
    }

    #[test]
    fn asymmetric_rejected() {
        let s = Tensor::from_rows(&[vec![1.0f64, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&s, 0.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_factor_gives_mean_rows() {
        let mut rng = Rng::new(1);
        let mu = [1.5f32, -2.0, 0.25];
        let z = sample_gaussian(&mu, &Tensor::zeros(&[3, 3]), 7, &mut rng).unwrap();
        for i in 0..7 {
            assert_eq!(z.row(i), &mu);
        }
    }

    #[test]
    fn standard_normal_mean() {
        let mut rng = Rng::new(2);
        let z = sample_gaussian(&[0f64; 3], &Tensor::identity(3), 10_000, &mut rng).unwrap();
        for c in 0..3 {
            let m: f64 = (0..10_000).map(|i| z.get2(i, c)).sum::<f64>() / 10_000.0;
            assert!(m.abs() < 0.05, "coord {c} mean {m}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let l = Tensor::<f32>::identity(2);
        let a = sample_gaussian(&[0.0, 1.0], &l, 50, &mut Rng::new(8)).unwrap();
        let b = sample_gaussian(&[0.0, 1.0], &l, 50, &mut Rng::new(8)).unwrap();
        assert_eq!(a.to_tns1_bytes(), b.to_tns1_bytes());
    }

    #[test]
    fn sphere_in_one_dimension_is_sign() {
        let mut rng = Rng::new(3);
        let s = sample_unit_sphere::<f64>(1, 100, &mut rng).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn sphere_symmetry() {
        let mut rng = Rng::new(5);
        let s = sample_unit_sphere::<f64>(3, 20_000, &mut rng).unwrap();
        for c in 0..3 {
            let m: f64 = (0..20_000).map(|i| s.get2(i, c)).sum::<f64>() / 20_000.0;
            assert!(m.abs() < 0.02, "coord {c} mean {m}");
        }
    }

    proptest::proptest! {
        #[test]
        fn sphere_rows_have_unit_norm(dim in 1usize..12, seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let s = sample_unit_sphere::<f32>(dim, 16, &mut rng).unwrap();
            for i in 0..16 {
                let n: f64 = s.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                proptest::prop_assert!((n - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn matmul_with_identity_is_exact(r in 1usize..6, c in 1usize..6, seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let a = Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal() as f32).collect()).unwrap();
            proptest::prop_assert_eq!(matmul(&a, &Tensor::identity(c)).unwrap(), a);
        }
    }
}
