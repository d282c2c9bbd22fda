//! Experiment configuration, Monte Carlo orchestration, rate fits over
//! bench output, and SVG plots.

pub mod config;
pub mod plot;
pub mod run;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use config::{Cell, EstimatorSpec, ExperimentConfig, ModelSource, NoiseSpec, ScaleSpec};
pub use run::{
    read_risk_csv, run_and_write, run_experiment, verify_manifest, write_risk_csv, CellResult,
    RunManifest, RunOptions, RunReport,
};

use crate::error::Result;
use crate::evaluation::{fit_rate, preasymptotic, RateFit, RiskReport, MIN_RATE_POINTS};

/// Rate fit of one estimator's risk curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRate {
    pub estimator: String,
    /// `n` values left out because `(l + log n) / n > 1` there.
    pub excluded_n: Vec<usize>,
    pub fit: RateFit,
}

/// Fits `log(mc_risk)` on `log(n)` per estimator. When a sample size has
/// several levels, the smallest risk among them is used (the best fixed
/// level). Leading sample sizes in the preasymptotic regime are dropped
/// while at least four points remain.
pub fn fit_rates(rows: &[RiskReport]) -> Result<Vec<EstimatorRate>> {
    let mut by_est: BTreeMap<&str, BTreeMap<usize, &RiskReport>> = BTreeMap::new();
    for r in rows {
        let slot = by_est
            .entry(&r.estimator)
            .or_default()
            .entry(r.n)
            .or_insert(r);
        if r.mc_risk < slot.mc_risk {
            *slot = r;
        }
    }
    let mut out = Vec::new();
    for (est, per_n) in by_est {
        let mut best: Vec<&RiskReport> = per_n.into_values().collect();
        let mut excluded_n = Vec::new();
        while best.len() > MIN_RATE_POINTS
            && preasymptotic(best[0].n, best[0].l, (best[0].n as f64).ln())
        {
            excluded_n.push(best.remove(0).n);
        }
        let points: Vec<(f64, f64)> = best.iter().map(|r| (r.n as f64, r.mc_risk)).collect();
        out.push(EstimatorRate {
            estimator: est.to_string(),
            excluded_n,
            fit: fit_rate(&points)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(est: &str, n: usize, l: usize, risk: f64) -> RiskReport {
        RiskReport {
            estimator: est.into(),
            n,
            l,
            reps: 1,
            mc_risk: risk,
            mc_se: 0.0,
            exact_risk: None,
            bias2: 0.0,
        }
    }

    #[test]
    fn best_level_per_n_and_preasymptotic_drop() {
        let mut rows = Vec::new();
        for n in [4usize, 100, 200, 400, 800] {
            rows.push(row("a", n, 4, 4.0 / n as f64));
            rows.push(row("a", n, 8, 9.0 / n as f64));
        }
        let fits = fit_rates(&rows).unwrap();
        assert_eq!(fits.len(), 1);
        assert_eq!(fits[0].excluded_n, vec![4]);
        assert!((fits[0].fit.slope + 1.0).abs() < 1e-12);
        assert!((fits[0].fit.intercept - 4f64.ln()).abs() < 1e-12);
    }
}
