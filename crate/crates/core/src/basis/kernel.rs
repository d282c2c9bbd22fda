use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{cosine, BasisKind, SymKernelMatrix};
use crate::error::{check_level, Error, Result};
use crate::scalar::Real;

/// Orthonormality tolerance for eigenfunction coefficient rows.
const ORTHONORMAL_TOL: f64 = 1e-10;
/// Gram-Schmidt rejects rows whose relative residual falls below this.
const DEPENDENT_ROW_TOL: f64 = 1e-8;

/// Finite-rank covariance kernel `K = sum_m lambda_m phi_m (x) phi_m`.
///
/// Each eigenfunction `phi_m` is stored through its first `l_max` basis
/// coefficients `<e_k, phi_m>`; coefficients beyond `l_max` are zero.
/// Eigenvalues are positive and sorted nonincreasing, rows orthonormal.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec<T> {
    eigenvalues: Vec<T>,
    eigvec_coeffs: Vec<Vec<T>>,
    l_max: usize,
    basis: BasisKind,
}

impl<T: Real> KernelSpec<T> {
    /// Validates orthonormal rows of length `l_max`.
    pub fn new(eigenvalues: Vec<T>, eigvec_coeffs: Vec<Vec<T>>, l_max: usize) -> Result<Self> {
        let spec = Self::unchecked(eigenvalues, eigvec_coeffs, l_max)?;
        let tol = T::tolerance(ORTHONORMAL_TOL);
        for (a, ra) in spec.eigvec_coeffs.iter().enumerate() {
            for (b, rb) in spec.eigvec_coeffs.iter().enumerate().skip(a) {
                let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                let want = if a == b { T::one() } else { T::zero() };
                if (dot - want).abs() > tol {
                    return Err(Error::InvalidSpec(format!(
                        "eigenfunction rows {a} and {b} are not orthonormal (inner product {dot})"
                    )));
                }
            }
        }
        Ok(spec)
    }

    /// Orthonormalizes raw coefficient rows by two-pass modified Gram-Schmidt.
    ///
    /// Rows whose residual after removing earlier directions is below `1e-8`
    /// of their original norm are rejected as near-dependent.
    pub fn orthonormalized(
        eigenvalues: Vec<T>,
        raw_rows: Vec<Vec<T>>,
        l_max: usize,
    ) -> Result<Self> {
        let mut rows: Vec<Vec<T>> = Vec::with_capacity(raw_rows.len());
        for (m, raw) in raw_rows.into_iter().enumerate() {
            if raw.len() != l_max {
                return Err(Error::InvalidSpec(format!(
                    "row {m} has {} coefficients, expected {l_max}",
                    raw.len()
                )));
            }
            let norm0 = norm(&raw);
            let mut v = raw;
            for _pass in 0..2 {
                for u in &rows {
                    let proj: T = v.iter().zip(u).map(|(&x, &y)| x * y).sum();
                    for (x, &y) in v.iter_mut().zip(u) {
                        *x -= proj * y;
                    }
                }
            }
            let resid = norm(&v);
            if norm0 == T::zero() || resid <= T::c(DEPENDENT_ROW_TOL) * norm0 {
                return Err(Error::InvalidSpec(format!(
                    "row {m} is (nearly) linearly dependent on earlier rows"
                )));
            }
            v.iter_mut().for_each(|x| *x /= resid);
            rows.push(v);
        }
        Self::new(eigenvalues, rows, l_max)
    }

    /// The zero kernel with coefficient horizon `l_max`.
    pub fn zero(l_max: usize) -> Result<Self> {
        Self::new(Vec::new(), Vec::new(), l_max)
    }

    fn unchecked(eigenvalues: Vec<T>, eigvec_coeffs: Vec<Vec<T>>, l_max: usize) -> Result<Self> {
        if l_max == 0 {
            return Err(Error::InvalidSpec("l_max must be positive".into()));
        }
        if eigenvalues.len() != eigvec_coeffs.len() {
            return Err(Error::InvalidSpec(format!(
                "{} eigenvalues but {} eigenfunction rows",
                eigenvalues.len(),
                eigvec_coeffs.len()
            )));
        }
        if eigenvalues.len() > l_max {
            return Err(Error::InvalidSpec(format!(
                "rank {} exceeds the coefficient horizon {l_max}",
                eigenvalues.len()
            )));
        }
        if let Some(bad) = eigenvalues
            .iter()
            .find(|&&v| !(v > T::zero()) || !v.is_finite())
        {
            return Err(Error::InvalidSpec(format!(
                "eigenvalues must be positive and finite, got {bad}"
            )));
        }
        if let Some(r) = eigvec_coeffs.iter().position(|r| r.len() != l_max) {
            return Err(Error::InvalidSpec(format!(
                "row {r} has {} coefficients, expected {l_max}",
                eigvec_coeffs[r].len()
            )));
        }
        if eigvec_coeffs.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidSpec(
                "non-finite eigenfunction coefficient".into(),
            ));
        }
        let mut pairs: Vec<(T, Vec<T>)> = eigenvalues.into_iter().zip(eigvec_coeffs).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let (eigenvalues, eigvec_coeffs) = pairs.into_iter().unzip();
        Ok(KernelSpec {
            eigenvalues,
            eigvec_coeffs,
            l_max,
            basis: BasisKind::Cosine,
        })
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    pub fn eigvec_coeffs(&self) -> &[Vec<T>] {
        &self.eigvec_coeffs
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn basis(&self) -> BasisKind {
        self.basis
    }

    /// Largest eigenvalue, zero for the zero kernel.
    pub fn lambda_max(&self) -> T {
        self.eigenvalues.first().copied().unwrap_or(T::zero())
    }

    /// `||K||_2^2 = sum lambda_m^2`.
    pub fn norm_sq(&self) -> T {
        self.eigenvalues.iter().map(|&v| v * v).sum()
    }

    /// Same kernel with the coefficient horizon extended by zeros.
    pub fn padded(&self, l_max: usize) -> Result<Self> {
        if l_max < self.l_max {
            return Err(Error::bounds("padded l_max", l_max, self.l_max, usize::MAX));
        }
        let mut out = self.clone();
        out.l_max = l_max;
        for row in &mut out.eigvec_coeffs {
            row.resize(l_max, T::zero());
        }
        Ok(out)
    }

    /// Coefficient `<e_k, K e_j>` (0-based `j`, `k`); zero beyond `l_max`.
    pub fn coefficient(&self, j: usize, k: usize) -> T {
        if j >= self.l_max || k >= self.l_max {
            return T::zero();
        }
        self.eigenvalues
            .iter()
            .zip(&self.eigvec_coeffs)
            .map(|(&lam, row)| lam * row[j] * row[k])
            .sum()
    }

    /// Value of eigenfunction `m` (0-based) at `t`.
    pub fn eigenfunction(&self, m: usize, t: T) -> T {
        self.eigvec_coeffs[m]
            .iter()
            .enumerate()
            .map(|(k, &c)| c * cosine(k + 1, t))
            .sum()
    }
}

/// `K^(l)`: orthogonal projection of `K` onto `S_l`.
pub fn project_kernel<T: Real>(spec: &KernelSpec<T>, l: usize) -> Result<SymKernelMatrix<T>> {
    check_level("projection level", l, spec.l_max)?;
    Ok(SymKernelMatrix::from_upper_fn(l, |j, k| {
        spec.coefficient(j, k)
    }))
}

/// `||K - K^(l)||_2^2`, summed directly over coefficients outside the
/// leading `l x l` block (no cancellation).
pub fn bias2<T: Real>(spec: &KernelSpec<T>, l: usize) -> Result<T> {
    check_level("projection level", l, spec.l_max)?;
    let n = spec.l_max;
    let mut acc = T::zero();
    let two = T::one() + T::one();
    for k in l..n {
        // Row k beyond the block: columns j < k counted twice, diagonal once.
        for j in 0..k {
            let c = spec.coefficient(j, k);
            acc += two * c * c;
        }
        let d = spec.coefficient(k, k);
        acc += d * d;
    }
    Ok(acc)
}

/// Rank-one kernel `lambda_max phi (x) phi` whose eigenfunction decays as
/// `k^-(s+1)` over the first `l` coefficients and only as `k^-(s+1/2)` over
/// the next `l`; projection at level `l` leaves a bias of order `l^-2s`.
pub fn make_hard_kernel<T: Real>(l: usize, s: T, lambda_max: T) -> Result<KernelSpec<T>> {
    if l == 0 {
        return Err(Error::Domain("hard kernel level must be at least 1".into()));
    }
    if !(s > T::zero()) || !(lambda_max > T::zero()) {
        return Err(Error::Domain(format!(
            "hard kernel needs s > 0 and lambda_max > 0, got s = {s}, lambda_max = {lambda_max}"
        )));
    }
    let half = T::c(0.5);
    let mut phi: Vec<T> = (1..=2 * l)
        .map(|k| {
            let kf = T::from_usize_lossy(k);
            let exponent = if k <= l { s + T::one() } else { s + half };
            kf.powf(-exponent)
        })
        .collect();
    let c1 = T::one() / norm(&phi);
    phi.iter_mut().for_each(|x| *x *= c1);
    KernelSpec::new(vec![lambda_max], vec![phi], 2 * l)
}

/// Sobolev-type smoothness weight `Delta = diag(1, 2, ...)` raised to `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevParams<T> {
    pub s: T,
}

impl<T: Real> SobolevParams<T> {
    pub fn new(s: T) -> Result<Self> {
        if !(s > T::zero()) {
            return Err(Error::Domain(format!(
                "smoothness s must be positive, got {s}"
            )));
        }
        Ok(SobolevParams { s })
    }

    /// `||phi||_{s,2} = (sum_k k^2s <phi, e_k>^2)^(1/2)`.
    pub fn function_norm(&self, coeffs: &[T]) -> T {
        let two_s = self.s + self.s;
        coeffs
            .iter()
            .enumerate()
            .map(|(k, &c)| T::from_usize_lossy(k + 1).powf(two_s) * c * c)
            .sum::<T>()
            .sqrt()
    }

    /// `||K||_{s,2} = (sum_m lambda_m^2 ||phi_m||_{s,2}^2)^(1/2)`.
    pub fn kernel_norm(&self, spec: &KernelSpec<T>) -> T {
        spec.eigenvalues
            .iter()
            .zip(&spec.eigvec_coeffs)
            .map(|(&lam, row)| {
                let f = self.function_norm(row);
                lam * lam * f * f
            })
            .sum::<T>()
            .sqrt()
    }
}

pub fn sobolev_norm<T: Real>(spec: &KernelSpec<T>, s: T) -> Result<T> {
    Ok(SobolevParams::new(s)?.kernel_norm(spec))
}

/// `K(t, u) = sum_m lambda_m phi_m(t) phi_m(u)`.
pub fn eval_kernel<T: Real>(spec: &KernelSpec<T>, t: T, u: T) -> Result<T> {
    let unit = |x: T| x >= T::zero() && x <= T::one();
    if !unit(t) || !unit(u) {
        return Err(Error::Domain(format!(
            "kernel arguments must lie in [0, 1], got ({t}, {u})"
        )));
    }
    Ok((0..spec.rank())
        .map(|m| spec.eigenvalues[m] * spec.eigenfunction(m, t) * spec.eigenfunction(m, u))
        .sum())
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// JSON form `{rank, eigenvalues[], eigvec_coeffs[][], l_max, basis}`.
#[derive(Serialize, Deserialize)]
struct KernelDoc<T> {
    rank: usize,
    eigenvalues: Vec<T>,
    eigvec_coeffs: Vec<Vec<T>>,
    l_max: usize,
    basis: BasisKind,
}

impl<T: Real> Serialize for KernelSpec<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        KernelDoc {
            rank: self.rank(),
            eigenvalues: self.eigenvalues.clone(),
            eigvec_coeffs: self.eigvec_coeffs.clone(),
            l_max: self.l_max,
            basis: self.basis,
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for KernelSpec<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = KernelDoc::<T>::deserialize(d)?;
        if doc.rank != doc.eigenvalues.len() {
            return Err(D::Error::custom(format!(
                "rank {} does not match {} eigenvalues",
                doc.rank,
                doc.eigenvalues.len()
            )));
        }
        KernelSpec::new(doc.eigenvalues, doc.eigvec_coeffs, doc.l_max).map_err(D::Error::custom)
    }
}
