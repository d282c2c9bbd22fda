use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::eigen::SymEigen;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Symmetric `l x l` coefficient matrix of a kernel in `S_l`, i.e. the
/// kernel `sum_{j,k <= l} s_jk e_j(t) e_k(u)`.
///
/// Entries are stored densely and kept exactly symmetric. Because the basis
/// is orthonormal, the `L2([0,1]^2)` inner product of two kernels is the
/// Frobenius inner product of their (zero-padded) coefficient matrices.
#[derive(Clone, PartialEq)]
pub struct SymKernelMatrix<T> {
    level: usize,
    entries: Vec<T>,
}

impl<T: Real> SymKernelMatrix<T> {
    pub fn zeros(level: usize) -> Self {
        SymKernelMatrix {
            level,
            entries: vec![T::zero(); level * level],
        }
    }

    pub fn identity(level: usize) -> Self {
        let mut m = Self::zeros(level);
        for i in 0..level {
            m.entries[i * level + i] = T::one();
        }
        m
    }

    pub fn diagonal(values: &[T]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.entries[i * values.len() + i] = v;
        }
        m
    }

    /// Builds the matrix from its upper triangle `f(j, k)`, `j <= k` (0-based).
    pub fn from_upper_fn(level: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(level);
        for j in 0..level {
            for k in j..level {
                let v = f(j, k);
                m.entries[j * level + k] = v;
                m.entries[k * level + j] = v;
            }
        }
        m
    }

    /// Wraps a row-major buffer; it must be exactly symmetric.
    pub fn from_row_major(level: usize, entries: Vec<T>) -> Result<Self> {
        if entries.len() != level * level {
            return Err(Error::Domain(format!(
                "expected {} entries for level {level}, got {}",
                level * level,
                entries.len()
            )));
        }
        for j in 0..level {
            for k in (j + 1)..level {
                if entries[j * level + k] != entries[k * level + j] {
                    return Err(Error::Domain(format!(
                        "matrix is not symmetric at ({j}, {k})"
                    )));
                }
            }
        }
        Ok(SymKernelMatrix { level, entries })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let level = rows.len();
        if rows.iter().any(|r| r.len() != level) {
            return Err(Error::Domain(
                "matrix rows must all have length `level`".into(),
            ));
        }
        Self::from_row_major(level, rows.concat())
    }

    pub fn level(&self) -> usize {
        self.level
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> T {
        self.entries[j * self.level + k]
    }

    pub fn as_row_major(&self) -> &[T] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.entries
            .chunks(self.level.max(1))
            .map(<[T]>::to_vec)
            .collect()
    }

    pub fn trace(&self) -> T {
        (0..self.level).map(|i| self.get(i, i)).sum()
    }

    /// Squared Frobenius norm, equal to the squared `L2` norm of the kernel.
    pub fn norm_sq(&self) -> T {
        self.entries.iter().map(|&x| x * x).sum()
    }

    /// `L2` inner product of the two kernels; levels may differ.
    pub fn inner(&self, other: &Self) -> T {
        let l = self.level.min(other.level);
        let mut acc = T::zero();
        for j in 0..l {
            for k in 0..l {
                acc += self.get(j, k) * other.get(j, k);
            }
        }
        acc
    }

    /// Squared `L2` distance between the two kernels; levels may differ.
    pub fn dist_sq(&self, other: &Self) -> T {
        let l = self.level.max(other.level);
        let at = |m: &Self, j: usize, k: usize| {
            if j < m.level && k < m.level {
                m.get(j, k)
            } else {
                T::zero()
            }
        };
        let mut acc = T::zero();
        for j in 0..l {
            for k in 0..l {
                let d = at(self, j, k) - at(other, j, k);
                acc += d * d;
            }
        }
        acc
    }

    /// Top-left `l x l` block: the projection onto `S_l`.
    pub fn truncated(&self, level: usize) -> Result<Self> {
        crate::error::check_level("level", level, self.level)?;
        Ok(Self::from_upper_fn(level, |j, k| self.get(j, k)))
    }

    /// Zero-padding into `S_level`, `level >= self.level()`.
    pub fn embedded(&self, level: usize) -> Result<Self> {
        if level < self.level {
            return Err(Error::bounds(
                "embedding level",
                level,
                self.level,
                usize::MAX,
            ));
        }
        Ok(Self::from_upper_fn(level, |j, k| {
            if k < self.level {
                self.get(j, k)
            } else {
                T::zero()
            }
        }))
    }

    pub fn scaled(&self, alpha: T) -> Self {
        SymKernelMatrix {
            level: self.level,
            entries: self.entries.iter().map(|&x| alpha * x).collect(),
        }
    }

    /// `self + alpha * I`.
    pub fn shifted(&self, alpha: T) -> Self {
        let mut m = self.clone();
        for i in 0..self.level {
            m.entries[i * self.level + i] += alpha;
        }
        m
    }

    /// Entrywise difference of equal-level matrices.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.level != other.level {
            return Err(Error::Domain(format!(
                "level mismatch: {} vs {}",
                self.level, other.level
            )));
        }
        Ok(SymKernelMatrix {
            level: self.level,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn eigen(&self) -> Result<SymEigen<T>> {
        SymEigen::new(&self.entries, self.level)
    }

    /// Spectral norm `||A||_inf`.
    pub fn spectral_norm(&self) -> Result<T> {
        let e = self.eigen()?;
        Ok(e.values()
            .iter()
            .fold(T::zero(), |acc, &w| acc.max(w.abs())))
    }

    /// Number of eigenvalues with magnitude above `tol`.
    pub fn rank(&self, tol: T) -> Result<usize> {
        Ok(self
            .eigen()?
            .values()
            .iter()
            .filter(|w| w.abs() > tol)
            .count())
    }

    /// Symmetric square root of a positive semidefinite matrix; eigenvalues
    /// below `clip_rel` times the largest one are set to zero.
    pub fn psd_sqrt(&self, clip_rel: T) -> Result<Self> {
        let e = self.eigen()?;
        let top = e
            .values()
            .first()
            .copied()
            .unwrap_or(T::zero())
            .max(T::zero());
        let floor = clip_rel * top;
        let entries = e.reconstruct_with(|w| if w > floor { w.sqrt() } else { T::zero() });
        Ok(SymKernelMatrix {
            level: self.level,
            entries,
        })
    }

    /// Evaluates the kernel at `(t, u)` in the cosine basis.
    pub fn eval(&self, t: T, u: T) -> T {
        let et: Vec<T> = (1..=self.level).map(|k| super::cosine(k, t)).collect();
        let eu: Vec<T> = (1..=self.level).map(|k| super::cosine(k, u)).collect();
        let mut acc = T::zero();
        for j in 0..self.level {
            for k in 0..self.level {
                acc += self.get(j, k) * et[j] * eu[k];
            }
        }
        acc
    }
}

impl<T: fmt::Debug> fmt::Debug for SymKernelMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[T]> = self.entries.chunks(self.level.max(1)).collect();
        f.debug_struct("SymKernelMatrix")
            .field("level", &self.level)
            .field("entries", &rows)
            .finish()
    }
}

/// JSON form `{level, entries[][]}`.
#[derive(Serialize, Deserialize)]
struct MatrixDoc<T> {
    level: usize,
    entries: Vec<Vec<T>>,
}

impl<T: Real> Serialize for SymKernelMatrix<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixDoc {
            level: self.level,
            entries: self.rows().into_iter().take(self.level).collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for SymKernelMatrix<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = MatrixDoc::<T>::deserialize(d)?;
        if doc.entries.len() != doc.level {
            return Err(D::Error::custom("`entries` must have `level` rows"));
        }
        SymKernelMatrix::from_rows(&doc.entries).map_err(D::Error::custom)
    }
}
