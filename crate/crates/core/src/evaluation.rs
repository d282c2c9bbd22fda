//! Risk metrics, the closed-form risk of the corrected empirical estimator,
//! level rules for the smoothness classes, and log-log rate fits.

use serde::{Deserialize, Serialize};

use crate::basis::{bias2, project_kernel, KernelSpec, SymKernelMatrix};
use crate::error::{check_level, Error, Result};
use crate::scalar::{ceil_tolerant, Real};

/// Monte Carlo summary of `||Est - K||_2^2` for one (estimator, l, n) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub estimator: String,
    pub n: usize,
    pub l: usize,
    pub reps: usize,
    pub mc_risk: f64,
    pub mc_se: f64,
    pub exact_risk: Option<f64>,
    pub bias2: f64,
}

impl RiskReport {
    /// Aggregates per-replication losses in the given order.
    pub fn from_losses(
        estimator: impl Into<String>,
        n: usize,
        l: usize,
        losses: &[f64],
        exact_risk: Option<f64>,
        bias2: f64,
    ) -> Result<Self> {
        let (mc_risk, mc_se) = mean_and_se(losses)?;
        Ok(RiskReport {
            estimator: estimator.into(),
            n,
            l,
            reps: losses.len(),
            mc_risk,
            mc_se,
            exact_risk,
            bias2,
        })
    }

    /// `|mc_risk - exact_risk| <= k * mc_se`; false when there is no exact value.
    pub fn agrees_with_exact(&self, k: f64) -> bool {
        self.exact_risk
            .is_some_and(|e| (self.mc_risk - e).abs() <= k * self.mc_se)
    }
}

/// Sample mean and standard error `sd / sqrt(R)` (zero for a single value).
pub fn mean_and_se(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Domain("no replications to aggregate".into()));
    }
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    Ok((mean, (var / r).sqrt()))
}

/// `||est - K||_2^2 = ||est - K^(l)||_F^2 + ||K - K^(l)||_2^2` for `est` in `S_l`.
pub fn l2_risk<T: Real>(est: &SymKernelMatrix<T>, truth: &KernelSpec<T>) -> Result<T> {
    let l = est.level();
    check_level("estimate level", l.max(1), truth.l_max())?;
    Ok(est.dist_sq(&project_kernel(truth, l)?) + bias2(truth, l)?)
}

/// Precomputed `K^(l)` and `||K - K^(l)||^2` for `l = 1..=max_level`, for
/// scoring many estimates of one kernel.
#[derive(Clone, Debug)]
pub struct RiskEvaluator<T> {
    projections: Vec<(SymKernelMatrix<T>, T)>,
}

impl<T: Real> RiskEvaluator<T> {
    pub fn new(truth: &KernelSpec<T>, max_level: usize) -> Result<Self> {
        check_level("evaluator level", max_level, truth.l_max())?;
        let projections = (1..=max_level)
            .map(|l| Ok((project_kernel(truth, l)?, bias2(truth, l)?)))
            .collect::<Result<_>>()?;
        Ok(RiskEvaluator { projections })
    }

    pub fn max_level(&self) -> usize {
        self.projections.len()
    }

    pub fn projection(&self, l: usize) -> Result<&SymKernelMatrix<T>> {
        check_level("estimate level", l, self.max_level())?;
        Ok(&self.projections[l - 1].0)
    }

    pub fn bias2(&self, l: usize) -> Result<T> {
        check_level("estimate level", l, self.max_level())?;
        Ok(self.projections[l - 1].1)
    }

    pub fn risk(&self, est: &SymKernelMatrix<T>) -> Result<T> {
        let l = est.level();
        Ok(est.dist_sq(self.projection(l)?) + self.bias2(l)?)
    }
}

fn check_risk_args(truth_l_max: usize, l: usize, n: usize) -> Result<()> {
    check_level("level", l, truth_l_max)?;
    if n == 0 {
        return Err(Error::Domain("sample size must be at least 1".into()));
    }
    Ok(())
}

/// `E||A_bar^(l) - K||^2 = ||K - K^(l)||^2 + (||B_l||^2 + tr(B_l)^2) / n`.
pub fn exact_empirical_risk<T: Real>(
    truth: &KernelSpec<T>,
    sigma2: T,
    l: usize,
    n: usize,
) -> Result<T> {
    check_risk_args(truth.l_max(), l, n)?;
    let b = project_kernel(truth, l)?.shifted(sigma2);
    let tr = b.trace();
    Ok(bias2(truth, l)? + (b.norm_sq() + tr * tr) / T::from_usize_lossy(n))
}

/// `||K - K^(l)||^2 + sigma^4 l^2 / n`, a lower bound for the exact risk.
pub fn lower_bound_empirical<T: Real>(
    truth: &KernelSpec<T>,
    sigma2: T,
    l: usize,
    n: usize,
) -> Result<T> {
    check_risk_args(truth.l_max(), l, n)?;
    let lf = T::from_usize_lossy(l);
    Ok(bias2(truth, l)? + sigma2 * sigma2 * lf * lf / T::from_usize_lossy(n))
}

/// Kernel classes with known rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum RateClass {
    /// Rank `r` kernels in `S_l`.
    FiniteRank { r: usize, l: usize },
    /// Rank `r` with `||K||_{s,2} <= rho`.
    SobolevBall { r: usize, s: f64, rho: f64 },
    /// Rank `r` with eigenfunctions of smoothness `s`.
    SmoothEigenfunctions { r: usize, s: f64 },
}

/// A class together with the scale `lambda_max + sigma^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePrediction {
    pub class: RateClass,
    pub lambda_plus_sigma2: f64,
}

impl RatePrediction {
    pub fn new(class: RateClass, lambda_plus_sigma2: f64) -> Result<Self> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let ok = positive(lambda_plus_sigma2)
            && match class {
                RateClass::FiniteRank { r, l } => r >= 1 && l >= r,
                RateClass::SobolevBall { r, s, rho } => r >= 1 && positive(s) && positive(rho),
                RateClass::SmoothEigenfunctions { r, s } => r >= 1 && positive(s),
            };
        if !ok {
            return Err(Error::Domain(format!(
                "rate class parameters must be positive: {class:?}"
            )));
        }
        Ok(RatePrediction {
            class,
            lambda_plus_sigma2,
        })
    }

    /// Exponent `a` in `risk ~ n^-a` of the penalized estimator at the
    /// predicted level, for fixed `r` and large `n`: 1 or `2s/(2s+1)`.
    pub fn exponent(&self) -> f64 {
        match self.class {
            RateClass::FiniteRank { .. } => 1.0,
            RateClass::SobolevBall { s, .. } | RateClass::SmoothEigenfunctions { s, .. } => {
                2.0 * s / (2.0 * s + 1.0)
            }
        }
    }

    /// Best exponent of the corrected empirical estimator over all levels:
    /// `s/(s+1)` on the smoothness classes, 1 on `S_l`.
    pub fn empirical_exponent(&self) -> f64 {
        match self.class {
            RateClass::FiniteRank { .. } => 1.0,
            RateClass::SobolevBall { s, .. } | RateClass::SmoothEigenfunctions { s, .. } => {
                s / (s + 1.0)
            }
        }
    }
}

/// Level at which to fit for sample size `n`.
pub fn predicted_level(pred: &RatePrediction, n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::Domain("sample size must be at least 1".into()));
    }
    let nf = n as f64;
    let lvl = match pred.class {
        RateClass::FiniteRank { l, .. } => return Ok(l),
        RateClass::SobolevBall { r, s, rho } => {
            let a = rho * rho / (pred.lambda_plus_sigma2 * pred.lambda_plus_sigma2);
            let first = ceil_tolerant((a * nf / r as f64).powf(1.0 / (2.0 * s + 1.0)));
            let second = ceil_tolerant((a * nf).powf(1.0 / (2.0 * s + 2.0)));
            first.max(second)
        }
        RateClass::SmoothEigenfunctions { r, s } => {
            let first = ceil_tolerant(nf.powf(1.0 / (2.0 * s + 1.0)));
            let second = ceil_tolerant((r as f64 * nf).powf(1.0 / (2.0 * (s + 1.0))));
            first.max(second)
        }
    };
    Ok((lvl as usize).max(1))
}

/// Whether `(l + t) / n > 1`, i.e. the linear branch of `delta_n` is active.
pub fn preasymptotic(n: usize, l: usize, t: f64) -> bool {
    (l as f64 + t) / n as f64 > 1.0
}

/// Least-squares fit of `log(risk)` on `log(n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: Vec<(f64, f64)>,
}

pub const MIN_RATE_POINTS: usize = 4;

pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    fit_loglog(points, MIN_RATE_POINTS)
}

/// Log-log least squares with a caller-chosen minimum number of points.
pub fn fit_loglog(points: &[(f64, f64)], min_points: usize) -> Result<RateFit> {
    if points.len() < min_points.max(2) {
        return Err(Error::Domain(format!(
            "rate fit needs at least {} points, got {}",
            min_points.max(2),
            points.len()
        )));
    }
    if let Some(p) = points
        .iter()
        .find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(Error::Domain(format!(
            "rate fit needs positive finite points, got {p:?}"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain(
            "rate fit needs at least two distinct n".into(),
        ));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(RateFit {
        slope,
        intercept,
        r2,
        points: points.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::make_hard_kernel;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e1_kernel(l_max: usize, lambda: f64) -> KernelSpec<f64> {
        let mut v = vec![0.0; l_max];
        v[0] = 1.0;
        KernelSpec::new(vec![lambda], vec![v], l_max).unwrap()
    }

    fn random_kernel(rng: &mut ChaCha8Rng, l_max: usize) -> KernelSpec<f64> {
        let r = rng.random_range(1..=3);
        let rows = (0..r)
            .map(|_| (0..l_max).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let eigs = (0..r).map(|_| rng.random_range(0.1..3.0)).collect();
        KernelSpec::orthonormalized(eigs, rows, l_max).unwrap()
    }

    #[test]
    fn exact_risk_examples() {
        let zero = KernelSpec::<f64>::zero(5).unwrap();
        assert!((exact_empirical_risk(&zero, 1.0, 5, 200).unwrap() - 0.15).abs() < 1e-15);
        let k = e1_kernel(2, 1.0);
        assert!((exact_empirical_risk(&k, 1.0, 2, 100).unwrap() - 0.14).abs() < 1e-15);
        assert!(exact_empirical_risk(&k, 1.0, 3, 100).is_err());
        assert!(exact_empirical_risk(&k, 1.0, 2, 0).is_err());
    }

    #[test]
    fn lower_bound_gap_for_zero_kernel() {
        let zero = KernelSpec::<f64>::zero(8).unwrap();
        for l in 1..=8 {
            let n = 37;
            let exact = exact_empirical_risk(&zero, 2.0, l, n).unwrap();
            let lower = lower_bound_empirical(&zero, 2.0, l, n).unwrap();
            assert!((lower - 4.0 * (l * l) as f64 / n as f64).abs() < 1e-12);
            assert!((exact - lower - 4.0 * l as f64 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn risk_orderings_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let k = random_kernel(&mut rng, 10);
            let s2 = rng.random_range(0.1..2.0);
            for l in [1, 4, 10] {
                let exact = exact_empirical_risk(&k, s2, l, 50).unwrap();
                let lower = lower_bound_empirical(&k, s2, l, 50).unwrap();
                let b = bias2(&k, l).unwrap();
                assert!(exact >= lower && lower >= b && b >= 0.0);
            }
        }
    }

    #[test]
    fn l2_risk_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random_kernel(&mut rng, 6);
        let p = project_kernel(&k, 3).unwrap();
        assert!((l2_risk(&p, &k).unwrap() - bias2(&k, 3).unwrap()).abs() < 1e-15);
        let zero = KernelSpec::<f64>::zero(4).unwrap();
        assert_eq!(l2_risk(&SymKernelMatrix::zeros(4), &zero).unwrap(), 0.0);
        assert!(l2_risk(&SymKernelMatrix::zeros(7), &k).is_err());
    }

    #[test]
    fn l2_risk_matches_direct_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let k = random_kernel(&mut rng, 9);
            let l = rng.random_range(1..=9);
            let est = SymKernelMatrix::from_upper_fn(l, |_, _| rng.random_range(-1.0..1.0));
            let mut direct = 0.0;
            for j in 0..9 {
                for m in 0..9 {
                    let e = if j < l && m < l { est.get(j, m) } else { 0.0 };
                    direct += (e - k.coefficient(j, m)).powi(2);
                }
            }
            assert!((l2_risk(&est, &k).unwrap() - direct).abs() < 1e-10);
            let ev = RiskEvaluator::new(&k, 9).unwrap();
            assert!((ev.risk(&est).unwrap() - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn predicted_level_examples() {
        let smooth =
            RatePrediction::new(RateClass::SmoothEigenfunctions { r: 1, s: 1.0 }, 2.0).unwrap();
        assert_eq!(predicted_level(&smooth, 1000).unwrap(), 10);
        assert!((smooth.exponent() - 2.0 / 3.0).abs() < 1e-15);
        assert!((smooth.empirical_exponent() - 0.5).abs() < 1e-15);
        for n in [10, 100, 1000, 4096, 32768, 1_000_000] {
            for (r, s) in [(1, 1.0), (3, 2.0), (2, 0.5)] {
                let a = RatePrediction::new(RateClass::SmoothEigenfunctions { r, s }, 1.7).unwrap();
                let b =
                    RatePrediction::new(RateClass::SobolevBall { r, s, rho: 1.7 }, 1.7).unwrap();
                if r == 1 {
                    assert_eq!(
                        predicted_level(&a, n).unwrap(),
                        predicted_level(&b, n).unwrap()
                    );
                }
            }
        }
        let ball = RatePrediction::new(
            RateClass::SobolevBall {
                r: 1,
                s: 1.0,
                rho: 1.0,
            },
            1.0,
        )
        .unwrap();
        assert!((ball.exponent() - 2.0 / 3.0).abs() < 1e-15);
        assert!(
            RatePrediction::new(RateClass::SmoothEigenfunctions { r: 0, s: 1.0 }, 1.0).is_err()
        );
    }

    #[test]
    fn predicted_level_is_monotone_in_n() {
        let classes = [
            RateClass::SmoothEigenfunctions { r: 1, s: 1.0 },
            RateClass::SmoothEigenfunctions { r: 4, s: 2.5 },
            RateClass::SobolevBall {
                r: 2,
                s: 1.0,
                rho: 3.0,
            },
            RateClass::SobolevBall {
                r: 1,
                s: 0.5,
                rho: 0.2,
            },
        ];
        for class in classes {
            let p = RatePrediction::new(class, 2.0).unwrap();
            let mut prev = 0;
            for n in 1..5000 {
                let l = predicted_level(&p, n).unwrap();
                assert!(l >= prev, "{class:?} drops at n={n}");
                prev = l;
            }
        }
    }

    #[test]
    fn fit_rate_examples() {
        let pts: Vec<(f64, f64)> = (8..=16)
            .map(|k| {
                let n = 2f64.powi(k);
                (n, n.powf(-2.0 / 3.0))
            })
            .collect();
        let f = fit_rate(&pts).unwrap();
        assert!((f.slope + 2.0 / 3.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, 0.3)).collect();
        assert!(fit_rate(&flat).unwrap().slope.abs() < 1e-15);
        assert!(fit_rate(&pts[..3]).is_err());
        let mut bad = pts.clone();
        bad[2].1 = 0.0;
        assert!(fit_rate(&bad).is_err());
    }

    #[test]
    fn lower_bound_rate_on_hard_kernels() {
        // min over l of the lower bound with the hard kernel built at level l
        let s = 1.0;
        let pts: Vec<(f64, f64)> = (8..=16)
            .map(|k| {
                let n = 1usize << k;
                let best = (1..=128)
                    .map(|l| {
                        let h = make_hard_kernel(l, s, 1.0).unwrap();
                        lower_bound_empirical(&h, 1.0, l, n).unwrap()
                    })
                    .fold(f64::INFINITY, f64::min);
                (n as f64, best)
            })
            .collect();
        let f = fit_rate(&pts).unwrap();
        assert!((f.slope + s / (s + 1.0)).abs() <= 0.05, "slope {}", f.slope);
    }

    #[test]
    fn mean_and_se_examples() {
        assert_eq!(mean_and_se(&[2.0]).unwrap(), (2.0, 0.0));
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(mean_and_se(&[]).is_err());
    }

    proptest! {
        #[test]
        fn exact_dominates_lower(seed in 0u64..1000, l in 1usize..8, n in 1usize..500, s2 in 0.01f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_kernel(&mut rng, 8);
            let exact = exact_empirical_risk(&k, s2, l, n).unwrap();
            let lower = lower_bound_empirical(&k, s2, l, n).unwrap();
            prop_assert!(exact >= lower - 1e-12 * exact);
        }
    }
}
