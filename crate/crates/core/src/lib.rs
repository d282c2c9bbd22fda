//! Low-rank covariance-function estimation for Gaussian processes observed in
//! white noise.
//!
//! Kernels live in the spaces `S_l` spanned by products of a fixed cosine
//! basis, so every estimator is a symmetric coefficient matrix. The crate
//! provides the nuclear-norm penalized estimator (eigenvalue soft
//! thresholding), the corrected empirical covariance, a split-sample level
//! selector, a noise-variance estimator, closed-form risks, and a seeded
//! Monte Carlo harness.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar type.

pub mod basis;
pub mod eigen;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod harness;
pub mod scalar;
pub mod simulation;

pub use basis::{KernelSpec, SymKernelMatrix};
pub use error::{Error, Result};
pub use estimators::{EstimatorConfig, NoiseEstConfig, SelectorConfig};
pub use evaluation::{RateFit, RiskReport};
pub use scalar::Real;
pub use simulation::{ModelSpec, RngPolicy, SampleSet};

pub type KernelSpec64 = KernelSpec<f64>;
pub type KernelSpec32 = KernelSpec<f32>;
pub type SymKernelMatrix64 = SymKernelMatrix<f64>;
pub type SymKernelMatrix32 = SymKernelMatrix<f32>;
pub type ModelSpec64 = ModelSpec<f64>;
pub type ModelSpec32 = ModelSpec<f32>;
pub type SampleSet64 = SampleSet<f64>;
pub type SampleSet32 = SampleSet<f32>;
pub type EstimatorConfig64 = EstimatorConfig<f64>;
pub type EstimatorConfig32 = EstimatorConfig<f32>;
