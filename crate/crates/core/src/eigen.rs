//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Jacobi is slower than tridiagonal QL for large matrices but it is simple,
//! generic over the scalar type, and computes small eigenvalues to high
//! relative accuracy. The matrices here are at most a few hundred rows.

use crate::error::{Error, Result};
use crate::scalar::Real;

const MAX_SWEEPS: usize = 64;

/// `A = V diag(values) V^T` with eigenvalues sorted nonincreasing.
#[derive(Clone, Debug)]
pub struct SymEigen<T> {
    n: usize,
    values: Vec<T>,
    /// Row-major `n x n`; column `j` is the eigenvector for `values[j]`.
    vectors: Vec<T>,
}

impl<T: Real> SymEigen<T> {
    /// Decomposes the symmetric row-major `n x n` matrix `a`.
    ///
    /// Only symmetry up to rounding is assumed; the strict lower triangle is
    /// read as well as the upper one.
    pub fn new(a: &[T], n: usize) -> Result<Self> {
        assert_eq!(a.len(), n * n, "matrix buffer does not match dimension");
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(
                "eigendecomposition input contains non-finite entries".into(),
            ));
        }
        let mut m = a.to_vec();
        let mut v = vec![T::zero(); n * n];
        for i in 0..n {
            v[i * n + i] = T::one();
        }

        let frob = m.iter().map(|&x| x * x).sum::<T>().sqrt();
        let target = T::epsilon() * frob * T::from_usize_lossy(n.max(1));
        let mut sweeps = 0;
        loop {
            let off = off_diagonal_norm(&m, n);
            if off <= target || frob == T::zero() {
                break;
            }
            if sweeps == MAX_SWEEPS {
                return Err(Error::Numerical(format!(
                    "Jacobi eigensolver did not converge: n = {n}, sweeps = {sweeps}, \
                     off-diagonal norm = {off:e}, Frobenius norm = {frob:e}"
                )));
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    rotate(&mut m, &mut v, n, p, q);
                }
            }
            sweeps += 1;
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            m[j * n + j]
                .partial_cmp(&m[i * n + i])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let values = order.iter().map(|&i| m[i * n + i]).collect();
        let mut vectors = vec![T::zero(); n * n];
        for (dst, &src) in order.iter().enumerate() {
            for row in 0..n {
                vectors[row * n + dst] = v[row * n + src];
            }
        }
        Ok(SymEigen { n, values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Eigenvalues, nonincreasing.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Eigenvector `j` as an owned vector.
    pub fn vector(&self, j: usize) -> Vec<T> {
        (0..self.n)
            .map(|row| self.vectors[row * self.n + j])
            .collect()
    }

    /// `V diag(f(values)) V^T`, row-major and exactly symmetric.
    pub fn reconstruct_with(&self, f: impl Fn(T) -> T) -> Vec<T> {
        let n = self.n;
        let mapped: Vec<T> = self.values.iter().map(|&w| f(w)).collect();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i..n {
                let mut acc = T::zero();
                for (k, &w) in mapped.iter().enumerate() {
                    if w != T::zero() {
                        acc += self.vectors[i * n + k] * w * self.vectors[j * n + k];
                    }
                }
                out[i * n + j] = acc;
                out[j * n + i] = acc;
            }
        }
        out
    }
}

fn off_diagonal_norm<T: Real>(m: &[T], n: usize) -> T {
    let mut acc = T::zero();
    for p in 0..n {
        for q in (p + 1)..n {
            let x = m[p * n + q];
            acc += x * x;
        }
    }
    (acc + acc).sqrt()
}

/// One Jacobi rotation annihilating `m[p][q]`.
fn rotate<T: Real>(m: &mut [T], v: &mut [T], n: usize, p: usize, q: usize) {
    let apq = m[p * n + q];
    if apq.abs() <= T::min_positive_value() {
        return;
    }
    let app = m[p * n + p];
    let aqq = m[q * n + q];
    let two = T::one() + T::one();
    let theta = (aqq - app) / (two * apq);
    let t = if theta.abs() > T::one() / T::epsilon() {
        T::one() / (two * theta)
    } else {
        let sign = if theta < T::zero() {
            -T::one()
        } else {
            T::one()
        };
        sign / (theta.abs() + theta.hypot(T::one()))
    };
    let c = T::one() / t.hypot(T::one());
    let s = t * c;

    for k in 0..n {
        let akp = m[k * n + p];
        let akq = m[k * n + q];
        m[k * n + p] = c * akp - s * akq;
        m[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = m[p * n + k];
        let aqk = m[q * n + k];
        m[p * n + k] = c * apk - s * aqk;
        m[q * n + k] = s * apk + c * aqk;
    }
    m[p * n + q] = T::zero();
    m[q * n + p] = T::zero();
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.random_range(-1.0..1.0);
                a[i * n + j] = x;
                a[j * n + i] = x;
            }
        }
        a
    }

    #[test]
    fn diagonal_matrix_is_sorted() {
        let a = [1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.0];
        let e = SymEigen::new(&a, 3).unwrap();
        assert_eq!(e.values(), &[3.0, 2.0, 1.0]);
        assert_eq!(e.vector(0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn two_by_two_closed_form() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let e = SymEigen::new(&[2.0f64, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((e.values()[0] - 3.0).abs() < 1e-14);
        assert!((e.values()[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_and_empty_matrices() {
        let e = SymEigen::<f64>::new(&[0.0; 16], 4).unwrap();
        assert!(e.values().iter().all(|&w| w == 0.0));
        let e = SymEigen::<f64>::new(&[], 0).unwrap();
        assert!(e.values().is_empty());
    }

    #[test]
    fn rejects_nan() {
        assert!(SymEigen::new(&[f64::NAN, 0.0, 0.0, 1.0], 2).is_err());
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 5, 17, 40] {
            let a = random_symmetric(n, &mut rng);
            let e = SymEigen::new(&a, n).unwrap();
            let back = e.reconstruct_with(|w| w);
            let err: f64 = a.iter().zip(&back).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(err.sqrt() < 1e-12 * n as f64, "n={n} err={err}");
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = e
                        .vector(i)
                        .iter()
                        .zip(e.vector(j))
                        .map(|(x, y)| x * y)
                        .sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matches_nalgebra_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [3, 8, 24] {
            let a = random_symmetric(n, &mut rng);
            let ours = SymEigen::new(&a, n).unwrap();
            let oracle = nalgebra::DMatrix::from_row_slice(n, n, &a).symmetric_eigenvalues();
            let mut theirs: Vec<f64> = oracle.iter().copied().collect();
            theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (x, y) in ours.values().iter().zip(&theirs) {
                assert!((x - y).abs() < 1e-11, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let a: [f32; 4] = [4.0, 1.0, 1.0, 3.0];
        let e = SymEigen::new(&a, 2).unwrap();
        let disc = (0.25f32 + 1.0).sqrt();
        assert!((e.values()[0] - (3.5 + disc)).abs() < 1e-5);
        assert!((e.values()[1] - (3.5 - disc)).abs() < 1e-5);
    }
}
