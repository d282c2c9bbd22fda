//! Covariance-function estimators: the (corrected) empirical covariance, the
//! nuclear-norm penalized estimator with its tuning rule, the split-sample
//! level selector, and the high-frequency noise-variance estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SymKernelMatrix;
use crate::error::{check_level, Error, Result};
use crate::scalar::Real;
use crate::simulation::SampleSet;

/// Default multiplier `c` in the tuning rule `mu = c (lambda_max + sigma^2) delta_n(l, t)`.
pub const DEFAULT_PENALTY_C: f64 = 2.0;

/// Regularization parameter: either fixed or derived from the sample size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty<T> {
    Fixed(T),
    /// `mu = c (lambda_max + sigma^2) delta_n(l, t)`; `t = None` means `log n`.
    Rule {
        c: T,
        t: Option<T>,
    },
}

impl<T: Real> Default for Penalty<T> {
    fn default() -> Self {
        Penalty::Rule {
            c: T::c(DEFAULT_PENALTY_C),
            t: None,
        }
    }
}

/// Source of the scale `lambda_max + sigma^2` in the tuning rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSource<T> {
    Known(T),
    /// Top eigenvalue of `R_n^(l)`, which estimates `lambda_max + sigma^2`.
    #[default]
    PluginTopEigenvalue,
}

/// Window `L_offset + 1 ..= L_offset + M` of high-frequency coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseEstConfig {
    pub offset: usize,
    pub width: usize,
}

impl NoiseEstConfig {
    pub fn new(offset: usize, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Domain(
                "noise window width M must be at least 1".into(),
            ));
        }
        Ok(NoiseEstConfig { offset, width })
    }

    pub fn horizon(&self) -> usize {
        self.offset + self.width
    }
}

/// How `sigma^2` enters an estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel<T> {
    Known(T),
    /// To be estimated from an independent trajectory; see [`EstimatorConfig::resolve_noise`].
    Estimate(NoiseEstConfig),
    Estimated {
        value: T,
        config: NoiseEstConfig,
    },
}

impl<T: Real> NoiseLevel<T> {
    pub fn value(&self) -> Option<T> {
        match *self {
            NoiseLevel::Known(v) | NoiseLevel::Estimated { value: v, .. } => Some(v),
            NoiseLevel::Estimate(_) => None,
        }
    }

    fn require(&self) -> Result<T> {
        self.value().ok_or_else(|| {
            Error::Domain("sigma^2 must be resolved (known or estimated) before fitting".into())
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig<T> {
    pub level: usize,
    pub penalty: Penalty<T>,
    pub sigma2: NoiseLevel<T>,
    pub scale: ScaleSource<T>,
}

impl<T: Real> EstimatorConfig<T> {
    /// Default tuning rule and plug-in scale at a known noise level.
    pub fn new(level: usize, sigma2: T) -> Self {
        EstimatorConfig {
            level,
            penalty: Penalty::default(),
            sigma2: NoiseLevel::Known(sigma2),
            scale: ScaleSource::PluginTopEigenvalue,
        }
    }

    pub fn with_level(mut self, level: usize) -> Self {
        self.level = level;
        self
    }

    pub fn with_penalty(mut self, penalty: Penalty<T>) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn with_scale(mut self, scale: ScaleSource<T>) -> Self {
        self.scale = scale;
        self
    }

    /// Replaces an `Estimate` noise level by the estimate computed from the
    /// coefficients of an independent trajectory.
    pub fn resolve_noise(mut self, extra_trajectory_coeffs: &[T]) -> Result<Self> {
        if let NoiseLevel::Estimate(cfg) = self.sigma2 {
            let value = estimate_sigma2(extra_trajectory_coeffs, &cfg)?;
            self.sigma2 = NoiseLevel::Estimated { value, config: cfg };
        }
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        match self.penalty {
            Penalty::Fixed(mu) if !(mu >= T::zero()) => {
                return Err(Error::Domain(format!("penalty mu must be >= 0, got {mu}")))
            }
            Penalty::Rule { c, t } => {
                if !(c > T::zero()) {
                    return Err(Error::Domain(format!(
                        "tuning constant c must be > 0, got {c}"
                    )));
                }
                if let Some(t) = t {
                    if !(t > T::zero()) {
                        return Err(Error::Domain(format!("confidence t must be > 0, got {t}")));
                    }
                }
            }
            _ => {}
        }
        if let ScaleSource::Known(v) = self.scale {
            if !(v > T::zero()) {
                return Err(Error::Domain(format!(
                    "lambda_max + sigma^2 must be > 0, got {v}"
                )));
            }
        }
        if let Some(s2) = self.sigma2.value() {
            if !(s2 >= T::zero()) {
                return Err(Error::Domain(format!("sigma^2 must be >= 0, got {s2}")));
            }
        }
        Ok(())
    }
}

/// Split-sample level selection over candidate levels `1..=max_level`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub max_level: usize,
    pub split: SplitPolicy,
}

impl SelectorConfig {
    pub fn new(max_level: usize) -> Self {
        SelectorConfig {
            max_level,
            split: SplitPolicy::FirstHalfFit,
        }
    }
}

/// Which half of the sample fits the candidates; the other half scores them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Fit on rows `0..ceil(n/2)`, score on the rest.
    #[default]
    FirstHalfFit,
    /// Fit on the trailing `floor(n/2)` rows, score on the leading ones.
    SecondHalfScore,
}

/// `R_n^(l) = (1/n) sum_i x_i x_i^T`.
pub fn empirical_covariance<T: Real>(samples: &SampleSet<T>) -> Result<SymKernelMatrix<T>> {
    let n = samples.n();
    if n == 0 {
        return Err(Error::Domain(
            "empirical covariance of an empty sample".into(),
        ));
    }
    let l = samples.level();
    let mut acc = vec![T::zero(); l * l];
    for row in samples.rows() {
        for j in 0..l {
            let xj = row[j];
            let dst = &mut acc[j * l..(j + 1) * l];
            for k in j..l {
                dst[k] += xj * row[k];
            }
        }
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    Ok(SymKernelMatrix::from_upper_fn(l, |j, k| {
        acc[j * l + k] * inv_n
    }))
}

/// `A_bar^(l) = R_n^(l) - sigma^2 I`; unbiased for `K^(l)` and possibly indefinite.
pub fn corrected_empirical<T: Real>(
    samples: &SampleSet<T>,
    sigma2: T,
) -> Result<SymKernelMatrix<T>> {
    if !(sigma2 >= T::zero()) {
        return Err(Error::Domain(format!("sigma^2 must be >= 0, got {sigma2}")));
    }
    Ok(empirical_covariance(samples)?.shifted(-sigma2))
}

/// `delta_n(l, t) = max(sqrt((l + t)/n), (l + t)/n)`.
pub fn delta_n<T: Real>(n: usize, l: usize, t: T) -> T {
    let ratio = (T::from_usize_lossy(l) + t) / T::from_usize_lossy(n);
    ratio.sqrt().max(ratio)
}

/// The confidence parameter used by a tuning rule: `t`, or `log n` if unset
/// (floored at `log 2` so that it stays positive for `n = 1`).
pub fn rule_confidence<T: Real>(n: usize, t: Option<T>) -> T {
    t.unwrap_or_else(|| T::from_usize_lossy(n.max(2)).ln())
}

/// Regularization parameter for sample size `n` at level `l`.
pub fn resolve_mu<T: Real>(
    n: usize,
    l: usize,
    config: &EstimatorConfig<T>,
    lambda_plus_sigma2: T,
) -> T {
    match config.penalty {
        Penalty::Fixed(mu) => mu,
        Penalty::Rule { c, t } => c * lambda_plus_sigma2 * delta_n(n, l, rule_confidence(n, t)),
    }
}

/// Minimizer of `||M - A||_2^2 + mu tr(A)` over positive semidefinite `A`:
/// the eigenvalues of `M` are soft-thresholded at `mu / 2`.
pub fn soft_threshold_psd<T: Real>(m: &SymKernelMatrix<T>, mu: T) -> Result<SymKernelMatrix<T>> {
    if !(mu >= T::zero()) {
        return Err(Error::Domain(format!("penalty mu must be >= 0, got {mu}")));
    }
    let eig = m.eigen()?;
    let half = mu / (T::one() + T::one());
    let entries = eig.reconstruct_with(|w| (w - half).max(T::zero()));
    SymKernelMatrix::from_row_major(m.level(), entries)
}

/// Result of the penalized fit together with the resolved tuning inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PenalizedFit<T> {
    pub estimate: SymKernelMatrix<T>,
    pub mu: T,
    pub sigma2: T,
    pub lambda_plus_sigma2: T,
}

/// Nuclear-norm penalized estimator `A_hat^(l)` at `config.level`.
///
/// Uses the first `config.level` coefficients of each sample row.
pub fn nuclear_penalized<T: Real>(
    samples: &SampleSet<T>,
    config: &EstimatorConfig<T>,
) -> Result<PenalizedFit<T>> {
    config.validate()?;
    check_level("estimator level", config.level, samples.level())?;
    let r = empirical_covariance(&samples.truncated(config.level)?)?;
    penalized_from_covariance(&r, samples.n(), config)
}

/// Penalized fit from a precomputed `R_n^(l)` of a sample of size `n`.
pub fn penalized_from_covariance<T: Real>(
    r: &SymKernelMatrix<T>,
    n: usize,
    config: &EstimatorConfig<T>,
) -> Result<PenalizedFit<T>> {
    let sigma2 = config.sigma2.require()?;
    let lambda_plus_sigma2 = match config.scale {
        ScaleSource::Known(v) => v,
        ScaleSource::PluginTopEigenvalue => match config.penalty {
            // The scale only feeds the rule.
            Penalty::Fixed(_) => T::zero(),
            Penalty::Rule { .. } => r.eigen()?.values().first().copied().unwrap_or(T::zero()),
        },
    };
    let mu = resolve_mu(n, r.level(), config, lambda_plus_sigma2);
    let estimate = soft_threshold_psd(&r.shifted(-sigma2), mu)?;
    Ok(PenalizedFit {
        estimate,
        mu,
        sigma2,
        lambda_plus_sigma2,
    })
}

/// Outcome of the level selector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Selection<T> {
    /// Selected level, 1-based.
    pub l_hat: usize,
    pub chosen: SymKernelMatrix<T>,
    /// Criterion value per candidate, index `l - 1`.
    pub scores: Vec<T>,
}

/// `||A||_2^2 - 2 <A, R_tilde - sigma^2 I>`; its expectation over the scoring
/// sample is `||A - K||_2^2 - ||K||_2^2`.
pub fn selection_score<T: Real>(
    a: &SymKernelMatrix<T>,
    r_tilde: &SymKernelMatrix<T>,
    sigma2: T,
) -> T {
    let two = T::one() + T::one();
    a.norm_sq() - two * (a.inner(r_tilde) - sigma2 * a.trace())
}

/// Chooses among `fits[l - 1]`, `l = 1..=L`, by the split-sample criterion
/// computed on the independent `score_samples`; ties go to the smallest `l`.
///
/// Candidates may be stored at their own level or zero-padded to a common
/// one; the criterion only sees the kernel.
pub fn adaptive_select<T: Real>(
    fits: &[SymKernelMatrix<T>],
    score_samples: &SampleSet<T>,
    sigma2: T,
) -> Result<Selection<T>> {
    if fits.is_empty() {
        return Err(Error::Domain(
            "adaptive selection needs at least one candidate".into(),
        ));
    }
    let top = fits.iter().map(SymKernelMatrix::level).max().unwrap_or(0);
    check_level("candidate level", top, score_samples.level())?;
    let r_tilde = empirical_covariance(&score_samples.truncated(top)?)?;
    let scores: Vec<T> = fits
        .iter()
        .map(|a| selection_score(a, &r_tilde, sigma2))
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok(Selection {
        l_hat: best + 1,
        chosen: fits[best].clone(),
        scores,
    })
}

/// `sigma_hat^2 = (1/M) sum_{k = L+1}^{L+M} (int e_k dX)^2` from the
/// coefficients `int e_k dX`, `k = 1, 2, ...` of one independent trajectory.
pub fn estimate_sigma2<T: Real>(
    extra_trajectory_coeffs: &[T],
    config: &NoiseEstConfig,
) -> Result<T> {
    if config.width == 0 {
        return Err(Error::Domain(
            "noise window width M must be at least 1".into(),
        ));
    }
    if extra_trajectory_coeffs.len() < config.horizon() {
        return Err(Error::bounds(
            "noise window end",
            config.horizon(),
            1,
            extra_trajectory_coeffs.len(),
        ));
    }
    let window = &extra_trajectory_coeffs[config.offset..config.horizon()];
    Ok(window.iter().map(|&x| x * x).sum::<T>() / T::from_usize_lossy(config.width))
}

/// Output of [`fit_pipeline`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PipelineFit<T> {
    pub l_hat: usize,
    pub estimate: SymKernelMatrix<T>,
    /// Regularization used per candidate level, index `l - 1`.
    pub mus: Vec<T>,
    pub scores: Vec<T>,
    pub sigma2: T,
}

/// Split the sample, fit `A_hat^(l)` for `l = 1..=L` on the fitting half,
/// select `l_hat` on the scoring half, and return `A_hat^(l_hat)`.
///
/// `estcfg.level` is ignored; `estcfg.sigma2` must already be resolved.
pub fn fit_pipeline<T: Real>(
    samples: &SampleSet<T>,
    selector: &SelectorConfig,
    estcfg: &EstimatorConfig<T>,
) -> Result<PipelineFit<T>> {
    if samples.n() < 2 {
        return Err(Error::Domain("sample splitting needs n >= 2".into()));
    }
    check_level("max level L", selector.max_level, samples.level())?;
    let sigma2 = estcfg.sigma2.require()?;
    let (first, second) = samples.split_halves();
    let (fit_half, score_half) = match selector.split {
        SplitPolicy::FirstHalfFit => (first, second),
        SplitPolicy::SecondHalfScore => (second, first),
    };
    let fit_half = fit_half.truncated(selector.max_level)?;
    let r_full = empirical_covariance(&fit_half)?;
    let n_fit = fit_half.n();

    let fits: Vec<PenalizedFit<T>> = (1..=selector.max_level)
        .into_par_iter()
        .map(|l| {
            let cfg = estcfg.with_level(l);
            penalized_from_covariance(&r_full.truncated(l)?, n_fit, &cfg)
        })
        .collect::<Result<_>>()?;
    let mus = fits.iter().map(|f| f.mu).collect();
    let candidates: Vec<SymKernelMatrix<T>> = fits.into_iter().map(|f| f.estimate).collect();
    let sel = adaptive_select(&candidates, &score_half, sigma2)?;
    Ok(PipelineFit {
        l_hat: sel.l_hat,
        estimate: sel.chosen,
        mus,
        scores: sel.scores,
        sigma2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{project_kernel, KernelSpec};
    use crate::simulation::{sample_coeffs, ModelSpec, RngPolicy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sym(rows: &[&[f64]]) -> SymKernelMatrix<f64> {
        SymKernelMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> SymKernelMatrix<f64> {
        SymKernelMatrix::from_upper_fn(n, |_, _| rng.random_range(-2.0..2.0))
    }

    fn rank_two_model(l_max: usize, sigma: f64) -> ModelSpec<f64> {
        let mut a = vec![0.0; l_max];
        let mut b = vec![0.0; l_max];
        a[0] = 0.8;
        a[1] = 0.6;
        b[2] = 1.0;
        let kernel = KernelSpec::orthonormalized(vec![1.0, 0.5], vec![a, b], l_max).unwrap();
        ModelSpec::new(kernel, sigma).unwrap()
    }

    #[test]
    fn empirical_covariance_of_a_single_sample() {
        let s = SampleSet::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            empirical_covariance(&s).unwrap(),
            sym(&[&[1.0, 0.0], &[0.0, 0.0]])
        );
        let empty = SampleSet::<f64>::from_row_major(0, 2, vec![]).unwrap();
        assert!(empirical_covariance(&empty).is_err());
    }

    #[test]
    fn empirical_covariance_is_quadratic_in_the_data() {
        let rows = vec![vec![1.0, -2.0, 0.5], vec![0.25, 3.0, -1.0]];
        let s = SampleSet::from_rows(&rows).unwrap();
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|x| 3.0 * x).collect())
            .collect();
        let a = empirical_covariance(&s).unwrap().scaled(9.0);
        let b = empirical_covariance(&SampleSet::from_rows(&scaled).unwrap()).unwrap();
        assert!(a.dist_sq(&b) < 1e-24);
    }

    #[test]
    fn corrected_empirical_identities() {
        let s = SampleSet::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 4.0]]).unwrap();
        let r = empirical_covariance(&s).unwrap();
        assert_eq!(corrected_empirical(&s, 0.0).unwrap(), r);
        let a = corrected_empirical(&s, 0.7).unwrap();
        assert_eq!(a.trace(), r.trace() - 0.7 * 3.0);
        assert!(corrected_empirical(&s, -1.0).is_err());
    }

    #[test]
    fn resolve_mu_examples() {
        let cfg = EstimatorConfig::new(4, 1.0).with_penalty(Penalty::Rule {
            c: 1.0,
            t: Some(1.0),
        });
        assert!((resolve_mu(100, 4, &cfg, 1.0) - 0.05f64.sqrt()).abs() < 1e-15);
        assert_eq!(resolve_mu(1, 4, &cfg, 1.0), 5.0);
        assert_eq!(
            resolve_mu(100, 4, &cfg, 2.0),
            2.0 * resolve_mu(100, 4, &cfg, 1.0)
        );
        let fixed = cfg.with_penalty(Penalty::Fixed(0.3));
        assert_eq!(resolve_mu(100, 4, &fixed, 9.0), 0.3);
        // Default t is log n.
        let dflt = EstimatorConfig::new(4, 1.0);
        let want = 2.0 * ((4.0 + 100f64.ln()) / 100.0).sqrt();
        assert!((resolve_mu(100, 4, &dflt, 1.0) - want).abs() < 1e-15);
    }

    #[test]
    fn soft_threshold_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = random_sym(4, &mut rng);
            let eig = m.eigen().unwrap();
            let psd = soft_threshold_psd(&m, 0.0).unwrap();
            let want =
                SymKernelMatrix::from_row_major(4, eig.reconstruct_with(|w| w.max(0.0))).unwrap();
            assert!(psd.dist_sq(&want) < 1e-24);
            let big = 2.0 * eig.values()[0].max(0.0);
            assert_eq!(soft_threshold_psd(&m, big).unwrap().norm_sq(), 0.0);
        }
        assert!(soft_threshold_psd(&SymKernelMatrix::<f64>::identity(2), -1.0).is_err());
    }

    /// Projected gradient descent on `||M - A||^2 + mu tr(A)` over the PSD cone.
    fn projected_gradient_oracle(m: &SymKernelMatrix<f64>, mu: f64) -> SymKernelMatrix<f64> {
        let l = m.level();
        let mut a = SymKernelMatrix::zeros(l);
        let step = 1e-3;
        for _ in 0..100_000 {
            let grad = SymKernelMatrix::from_upper_fn(l, |j, k| {
                let g = 2.0 * (a.get(j, k) - m.get(j, k));
                if j == k {
                    g + mu
                } else {
                    g
                }
            });
            let moved =
                SymKernelMatrix::from_upper_fn(l, |j, k| a.get(j, k) - step * grad.get(j, k));
            let eig = moved.eigen().unwrap();
            a = SymKernelMatrix::from_row_major(l, eig.reconstruct_with(|w: f64| w.max(0.0)))
                .unwrap();
        }
        a
    }

    #[test]
    fn soft_threshold_matches_projected_gradient_on_2x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let m = random_sym(2, &mut rng);
            let mu = rng.random_range(0.0..2.0);
            let closed = soft_threshold_psd(&m, mu).unwrap();
            let oracle = projected_gradient_oracle(&m, mu);
            assert!(closed.dist_sq(&oracle).sqrt() < 1e-6);
        }
    }

    #[test]
    fn nuclear_penalized_needs_resolved_noise() {
        let s = SampleSet::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let mut cfg = EstimatorConfig::new(2, 0.1);
        cfg.sigma2 = NoiseLevel::Estimate(NoiseEstConfig::new(2, 2).unwrap());
        assert!(nuclear_penalized(&s, &cfg).is_err());
        let cfg = cfg.resolve_noise(&[9.0, 9.0, 1.0, 3.0]).unwrap();
        assert_eq!(cfg.sigma2.value(), Some(5.0));
        assert!(nuclear_penalized(&s, &cfg).is_ok());
        assert!(nuclear_penalized(&s, &cfg.with_level(3)).is_err());
    }

    #[test]
    fn plugin_scale_is_top_eigenvalue() {
        let s = SampleSet::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let fit = nuclear_penalized(&s, &EstimatorConfig::new(2, 0.0)).unwrap();
        assert_eq!(fit.lambda_plus_sigma2, 2.0);
        let fit = nuclear_penalized(
            &s,
            &EstimatorConfig::new(2, 0.0).with_scale(ScaleSource::Known(4.0)),
        )
        .unwrap();
        assert_eq!(fit.lambda_plus_sigma2, 4.0);
    }

    proptest! {
        #[test]
        fn penalized_spectrum_is_soft_thresholded(seed in 0u64..500, mu1 in 0.0f64..3.0, dmu in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_sym(5, &mut rng);
            let a1 = soft_threshold_psd(&m, mu1).unwrap();
            let a2 = soft_threshold_psd(&m, mu1 + dmu).unwrap();
            let w = m.eigen().unwrap();
            let w1 = a1.eigen().unwrap();
            for (got, &mj) in w1.values().iter().zip(w.values()) {
                prop_assert!((got - (mj - mu1 / 2.0).max(0.0)).abs() < 1e-12);
            }
            prop_assert!(w1.values().iter().all(|&x| x >= -1e-12));
            prop_assert!(a1.rank(1e-12).unwrap() >= a2.rank(1e-12).unwrap());
            prop_assert!(a1.trace() >= a2.trace() - 1e-12);
        }

        #[test]
        fn selection_is_invariant_to_zero_padding(seed in 0u64..200) {
            let model = rank_two_model(6, 1.0);
            let samples = sample_coeffs(&model, 40, 6, &RngPolicy::new(seed)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fits: Vec<SymKernelMatrix<f64>> = (1..=6).map(|l| random_sym(l, &mut rng)).collect();
            let padded: Vec<SymKernelMatrix<f64>> = fits.iter().map(|a| a.embedded(6).unwrap()).collect();
            let a = adaptive_select(&fits, &samples, 1.0).unwrap();
            let b = adaptive_select(&padded, &samples, 1.0).unwrap();
            prop_assert_eq!(a.l_hat, b.l_hat);
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn split_partitions_rows(n in 2usize..50) {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
            let s = SampleSet::from_rows(&rows).unwrap();
            let (a, b) = s.split_halves();
            prop_assert_eq!(a.n(), n.div_ceil(2));
            prop_assert_eq!(a.n() + b.n(), n);
            let all: Vec<f64> = a.rows().chain(b.rows()).map(|r| r[0]).collect();
            prop_assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_candidate_selects_level_one() {
        let s = SampleSet::from_rows(&[vec![1.0], vec![-0.5]]).unwrap();
        let sel = adaptive_select(&[SymKernelMatrix::identity(1)], &s, 0.2).unwrap();
        assert_eq!(sel.l_hat, 1);
    }

    #[test]
    fn ties_go_to_the_smallest_level() {
        let s = SampleSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let zero1 = SymKernelMatrix::<f64>::zeros(1);
        let zero2 = SymKernelMatrix::<f64>::zeros(2);
        let sel = adaptive_select(&[zero1, zero2], &s, 0.0).unwrap();
        assert_eq!(sel.l_hat, 1);
    }

    #[test]
    fn selection_rejects_levels_beyond_the_scoring_sample() {
        let s = SampleSet::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let r = adaptive_select(&[SymKernelMatrix::<f64>::identity(2)], &s, 0.0);
        assert!(matches!(r, Err(Error::Bounds { .. })));
    }

    #[test]
    fn selection_prefers_truth_over_zero() {
        let model = rank_two_model(4, 1.0);
        let truth = project_kernel(&model.kernel, 4).unwrap();
        let mut wins = 0;
        for rep in 0..200 {
            let s = sample_coeffs(&model, 10_000, 4, &RngPolicy::new(77).replication(rep)).unwrap();
            let sel =
                adaptive_select(&[truth.clone(), SymKernelMatrix::zeros(4)], &s, 1.0).unwrap();
            if sel.l_hat == 1 {
                wins += 1;
            }
        }
        assert!(wins >= 190, "truth selected {wins}/200 times");
    }

    #[test]
    fn score_is_unbiased_for_the_risk_difference() {
        // E[score(A)] = ||A - K^(l)||^2 - ||K^(l)||^2 for a fixed A.
        let model = rank_two_model(3, 0.8);
        let truth = project_kernel(&model.kernel, 3).unwrap();
        let a = sym(&[&[0.5, 0.1, 0.0], &[0.1, 0.3, -0.2], &[0.0, -0.2, 0.4]]);
        let expected = a.dist_sq(&truth) - truth.norm_sq();
        let reps = 4000;
        let scores: Vec<f64> = (0..reps)
            .map(|rep| {
                let s = sample_coeffs(&model, 50, 3, &RngPolicy::new(5).replication(rep)).unwrap();
                selection_score(&a, &empirical_covariance(&s).unwrap(), model.sigma2())
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / reps as f64;
        let var = scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * se,
            "{mean} vs {expected} (se {se})"
        );
    }

    #[test]
    fn sigma2_estimator_examples() {
        let cfg = NoiseEstConfig::new(2, 3).unwrap();
        assert!(matches!(
            estimate_sigma2(&[1.0, 1.0, 1.0, 1.0], &cfg),
            Err(Error::Bounds { .. })
        ));
        // Pure signal supported on the first L_offset coefficients.
        assert_eq!(
            estimate_sigma2(&[3.0, -1.0, 0.0, 0.0, 0.0], &cfg).unwrap(),
            0.0
        );
        assert_eq!(
            estimate_sigma2(&[3.0, -1.0, 1.0, 2.0, 3.0], &cfg).unwrap(),
            14.0 / 3.0
        );
        assert!(NoiseEstConfig::new(2, 0).is_err());
    }

    #[test]
    fn sigma2_estimate_concentrates_for_white_noise() {
        let model = ModelSpec::new(KernelSpec::<f64>::zero(1).unwrap(), 1.0).unwrap();
        let m = 10_000;
        let cfg = NoiseEstConfig::new(0, m).unwrap();
        let mut rng = RngPolicy::new(4).rng();
        let x = crate::simulation::sample_trajectory_coeffs(&model, m, &mut rng);
        let est = estimate_sigma2(&x, &cfg).unwrap();
        assert!((est - 1.0).abs() <= 3.0 * (2.0 / m as f64).sqrt());
    }

    #[test]
    fn empirical_mean_is_b_l() {
        let model = rank_two_model(3, 1.0);
        let b = crate::simulation::covariance_at_level(&model, 3).unwrap();
        let reps = 10_000;
        let mats: Vec<SymKernelMatrix<f64>> = (0..reps)
            .map(|rep| {
                let s = sample_coeffs(&model, 20, 3, &RngPolicy::new(9).replication(rep)).unwrap();
                empirical_covariance(&s).unwrap()
            })
            .collect();
        for j in 0..3 {
            for k in 0..3 {
                let vals: Vec<f64> = mats.iter().map(|m| m.get(j, k)).collect();
                let mean = vals.iter().sum::<f64>() / reps as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
                let se = (var / reps as f64).sqrt();
                assert!(
                    (mean - b.get(j, k)).abs() <= 3.0 * se,
                    "({j},{k}) {mean} vs {}",
                    b.get(j, k)
                );
                let corrected_mean = mean - if j == k { model.sigma2() } else { 0.0 };
                let truth = project_kernel(&model.kernel, 3).unwrap().get(j, k);
                assert!((corrected_mean - truth).abs() <= 3.0 * se);
            }
        }
    }

    #[test]
    fn pipeline_basics() {
        let model = rank_two_model(8, 1.0);
        let s = sample_coeffs(&model, 301, 8, &RngPolicy::new(21)).unwrap();
        let cfg = EstimatorConfig::new(1, 1.0);
        let a = fit_pipeline(&s, &SelectorConfig::new(8), &cfg).unwrap();
        let b = fit_pipeline(&s, &SelectorConfig::new(8), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mus.len(), 8);
        assert_eq!(a.estimate.level(), a.l_hat);

        // L = 1 is the fixed level-1 estimator on the fitting half.
        let one = fit_pipeline(&s, &SelectorConfig::new(1), &cfg).unwrap();
        let (half, _) = s.split_halves();
        let direct = nuclear_penalized(&half, &cfg.with_level(1)).unwrap();
        assert_eq!(one.l_hat, 1);
        assert_eq!(one.estimate, direct.estimate);

        let swapped = SelectorConfig {
            max_level: 8,
            split: SplitPolicy::SecondHalfScore,
        };
        assert!(fit_pipeline(&s, &swapped, &cfg).is_ok());
        assert!(fit_pipeline(&s.slice_rows(0..1), &SelectorConfig::new(1), &cfg).is_err());
        assert!(fit_pipeline(&s, &SelectorConfig::new(9), &cfg).is_err());
    }
}
