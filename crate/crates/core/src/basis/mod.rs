//! Orthonormal basis of `L2[0,1]`, finite-rank kernels expressed in it, and
//! the symmetric coefficient matrices of the spaces `S_l`.

mod kernel;
mod matrix;

pub use kernel::{
    bias2, eval_kernel, make_hard_kernel, project_kernel, sobolev_norm, KernelSpec, SobolevParams,
};
pub use matrix::SymKernelMatrix;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Points of the composite midpoint rule used for pointwise quadrature checks.
pub const QUADRATURE_POINTS: usize = 2048;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    /// `e_1 = 1`, `e_{k+1}(t) = sqrt(2) cos(pi k t)`.
    #[default]
    Cosine,
}

/// A fixed orthonormal basis of `L2[0,1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisId {
    pub kind: BasisKind,
    pub description: String,
}

impl BasisId {
    pub fn cosine() -> Self {
        BasisId {
            kind: BasisKind::Cosine,
            description: "e_1 = 1, e_(k+1)(t) = sqrt(2) cos(pi k t) on [0,1]".into(),
        }
    }

    /// Evaluates the 1-based basis function `e_k` at `t`.
    #[inline]
    pub fn eval<T: Real>(&self, k: usize, t: T) -> T {
        match self.kind {
            BasisKind::Cosine => cosine(k, t),
        }
    }
}

impl Default for BasisId {
    fn default() -> Self {
        BasisId::cosine()
    }
}

/// The 1-based cosine basis function `e_k(t)`.
#[inline]
pub fn cosine<T: Real>(k: usize, t: T) -> T {
    assert!(k >= 1, "basis functions are indexed from 1");
    if k == 1 {
        T::one()
    } else {
        T::SQRT_2() * (T::PI() * T::from_usize_lossy(k - 1) * t).cos()
    }
}

/// Midpoint-rule nodes `(j + 1/2) / m`, `j = 0..m`.
pub fn midpoint_nodes(m: usize) -> impl Iterator<Item = f64> {
    (0..m).map(move |j| (j as f64 + 0.5) / m as f64)
}
