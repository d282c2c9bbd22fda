//! Monte Carlo orchestration: one common sample per (cell, replication),
//! shared by every estimator, with results merged in replication order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Cell, EstimatorSpec, ExperimentConfig, NoiseSpec};
use crate::basis::SymKernelMatrix;
use crate::error::{Error, Result};
use crate::estimators::{empirical_covariance, fit_pipeline, penalized_from_covariance};
use crate::evaluation::{exact_empirical_risk, RiskEvaluator, RiskReport};
use crate::simulation::{fmt_f64, sample_trajectory_coeffs, CoeffSampler, ModelSpec, RngPolicy};

/// Numerical failures tolerated before a cell aborts, as a fraction of replications.
pub const MAX_FAILURE_RATE: f64 = 0.01;

/// How replication streams are derived from the master seed.
pub const STREAM_RULE: &str =
    "cell c, replication r: RngPolicy::with_stream(seed, c).replication(r); \
     sigma^2 trajectory: that policy's .replication(0)";

pub const RISK_CSV: &str = "risk.csv";
pub const REPORT_JSON: &str = "report.json";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the rayon default.
    pub workers: Option<usize>,
    /// Print one line per finished cell to stderr.
    pub log: bool,
}

/// Aggregated results of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub reports: Vec<RiskReport>,
    /// Per adaptive estimator, `counts[l - 1]` = number of replications with `l_hat = l`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub l_hat_counts: BTreeMap<String, Vec<usize>>,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub replications: usize,
    pub stream_rule: String,
    pub cells: Vec<CellResult>,
}

impl RunReport {
    pub fn reports(&self) -> impl Iterator<Item = &RiskReport> {
        self.cells.iter().flat_map(|c| c.reports.iter())
    }

    pub fn find(&self, estimator: &str, n: usize, l: usize) -> Option<&RiskReport> {
        self.reports()
            .find(|r| r.estimator == estimator && r.n == n && r.l == l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStream {
    pub index: usize,
    pub n: usize,
    pub l: usize,
    pub stream: u64,
}

/// Provenance for one run; `config` reruns it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub stream_rule: String,
    pub cell_streams: Vec<CellStream>,
    pub workers: Option<usize>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub files: Vec<FileDigest>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Per-replication outcome: one loss per estimator plus selected levels.
struct RepOutcome {
    losses: Vec<f64>,
    l_hats: Vec<Option<usize>>,
}

/// Everything an estimator needs that is fixed within a cell.
struct CellContext<'a> {
    cell: Cell,
    model: ModelSpec<f64>,
    sampler: CoeffSampler<f64>,
    evaluator: RiskEvaluator<f64>,
    estimators: &'a [EstimatorSpec],
    noise_horizon: usize,
    base: RngPolicy,
}

impl CellContext<'_> {
    fn replicate(&self, rep: usize) -> Result<RepOutcome> {
        let policy = self.base.replication(rep as u64);
        let samples = self.sampler.sample(self.cell.n, &policy);
        let trajectory = if self.noise_horizon > 0 {
            let mut rng = policy.replication(0).rng();
            sample_trajectory_coeffs(&self.model, self.noise_horizon, &mut rng)
        } else {
            Vec::new()
        };
        let r = empirical_covariance(&samples)?;
        let mut losses = Vec::with_capacity(self.estimators.len());
        let mut l_hats = Vec::with_capacity(self.estimators.len());
        for spec in self.estimators {
            let cfg = spec
                .estimator_config(self.cell.l, &self.model)
                .resolve_noise(&trajectory)?;
            let sigma2 = cfg.sigma2.value().unwrap_or(self.model.sigma2());
            let (estimate, l_hat): (SymKernelMatrix<f64>, Option<usize>) = match spec {
                EstimatorSpec::Empirical { .. } => (r.clone(), None),
                EstimatorSpec::Corrected { .. } => (r.shifted(-sigma2), None),
                EstimatorSpec::Penalized { .. } => (
                    penalized_from_covariance(&r, self.cell.n, &cfg)?.estimate,
                    None,
                ),
                EstimatorSpec::Adaptive { .. } => {
                    let selector = spec
                        .selector_config(self.cell.l)
                        .expect("adaptive has a selector");
                    let fit = fit_pipeline(&samples, &selector, &cfg)?;
                    (fit.estimate, Some(fit.l_hat))
                }
            };
            let loss = self.evaluator.risk(&estimate)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss for `{}`",
                    spec.label()
                )));
            }
            losses.push(loss);
            l_hats.push(l_hat);
        }
        Ok(RepOutcome { losses, l_hats })
    }
}

/// Closed-form risk where one exists: the corrected estimator with known
/// noise, and the uncorrected one (which adds `sigma^4 l`).
fn exact_risk(spec: &EstimatorSpec, model: &ModelSpec<f64>, cell: Cell) -> Result<Option<f64>> {
    let corrected = exact_empirical_risk(&model.kernel, model.sigma2(), cell.l, cell.n)?;
    Ok(match spec {
        EstimatorSpec::Corrected {
            noise: NoiseSpec::Known,
            ..
        } => Some(corrected),
        EstimatorSpec::Empirical { .. } => Some(corrected + model.sigma2().powi(2) * cell.l as f64),
        _ => None,
    })
}

fn run_cell(cfg: &ExperimentConfig, cell: Cell) -> Result<CellResult> {
    let model = cfg.model_for_level(cell.l)?;
    let noise_horizon = cfg
        .estimators
        .iter()
        .map(|e| match e.noise() {
            NoiseSpec::Known => 0,
            NoiseSpec::Estimate { offset, width } => offset + width,
        })
        .max()
        .unwrap_or(0);
    let ctx = CellContext {
        cell,
        sampler: CoeffSampler::new(&model, cell.l)?,
        evaluator: RiskEvaluator::new(&model.kernel, cell.l)?,
        model,
        estimators: &cfg.estimators,
        noise_horizon,
        base: RngPolicy::with_stream(cfg.seed, cell.index as u64),
    };

    let outcomes: Vec<Result<RepOutcome>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| ctx.replicate(rep))
        .collect();

    let mut failures = 0;
    let mut first_failure = None;
    let k = cfg.estimators.len();
    let mut losses: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.replications); k];
    let mut l_hat_counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                for (j, spec) in cfg.estimators.iter().enumerate() {
                    losses[j].push(o.losses[j]);
                    if let Some(lh) = o.l_hats[j] {
                        let counts = l_hat_counts
                            .entry(spec.label())
                            .or_insert_with(|| vec![0; cell.l]);
                        counts[lh - 1] += 1;
                    }
                }
            }
            Err(e) => {
                failures += 1;
                first_failure.get_or_insert_with(|| format!("replication {rep}: {e}"));
            }
        }
    }
    if failures as f64 > MAX_FAILURE_RATE * cfg.replications as f64 {
        return Err(Error::FailureThreshold {
            failed: failures,
            total: cfg.replications,
            first: first_failure.unwrap_or_default(),
        });
    }

    let bias2 = ctx.evaluator.bias2(cell.l)?;
    let reports = cfg
        .estimators
        .iter()
        .zip(&losses)
        .map(|(spec, l)| {
            let exact = exact_risk(spec, &ctx.model, cell)?;
            RiskReport::from_losses(spec.label(), cell.n, cell.l, l, exact, bias2)
        })
        .collect::<Result<_>>()?;
    Ok(CellResult {
        cell,
        reports,
        l_hat_counts,
        failures,
        first_failure,
    })
}

/// Runs every cell of the grid. Results do not depend on `opts.workers`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let cells = cfg.cells()?;
    let workers = opts.workers.or(cfg.workers);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config("workers", format!("cannot start worker pool: {e}")))?;

    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let res = pool.install(|| run_cell(cfg, cell))?;
        if opts.log {
            let summary: Vec<String> = res
                .reports
                .iter()
                .map(|r| format!("{}={:.4e}±{:.1e}", r.estimator, r.mc_risk, r.mc_se))
                .collect();
            eprintln!(
                "[{}] cell {} n={} l={} reps={} failures={} {}",
                cfg.name,
                cell.index,
                cell.n,
                cell.l,
                cfg.replications,
                res.failures,
                summary.join(" ")
            );
        }
        results.push(res);
    }
    Ok(RunReport {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        replications: cfg.replications,
        stream_rule: STREAM_RULE.to_string(),
        cells: results,
    })
}

pub const RISK_CSV_HEADER: [&str; 8] = [
    "estimator",
    "n",
    "l",
    "reps",
    "mc_risk",
    "mc_se",
    "exact_risk",
    "bias2",
];

/// Writes report rows as CSV with 17-significant-digit floats.
pub fn write_risk_csv<'a>(
    path: &Path,
    reports: impl IntoIterator<Item = &'a RiskReport>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(RISK_CSV_HEADER)
        .map_err(|e| csv_error(path, e))?;
    for r in reports {
        let exact = r.exact_risk.map(fmt_f64).unwrap_or_default();
        w.write_record([
            r.estimator.clone(),
            r.n.to_string(),
            r.l.to_string(),
            r.reps.to_string(),
            fmt_f64(r.mc_risk),
            fmt_f64(r.mc_se),
            exact,
            fmt_f64(r.bias2),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_risk_csv`].
pub fn read_risk_csv(path: &Path) -> Result<Vec<RiskReport>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().ne(RISK_CSV_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("expected header {}", RISK_CSV_HEADER.join(",")),
        });
    }
    rdr.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn digest_file(dir: &Path, name: &str) -> Result<FileDigest> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(FileDigest {
        path: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Runs the experiment and writes `risk.csv`, `report.json`, and
/// `manifest.json` under `out_dir`.
pub fn run_and_write(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    out_dir: &Path,
) -> Result<(RunReport, RunManifest)> {
    let started = now_ms();
    let report = run_experiment(cfg, opts)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_risk_csv(&out_dir.join(RISK_CSV), report.reports())?;
    let json_path = out_dir.join(REPORT_JSON);
    let json = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        seed: cfg.seed,
        stream_rule: STREAM_RULE.to_string(),
        cell_streams: cfg
            .cells()?
            .into_iter()
            .map(|c| CellStream {
                index: c.index,
                n: c.n,
                l: c.l,
                stream: c.index as u64,
            })
            .collect(),
        workers: opts.workers.or(cfg.workers),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        files: vec![
            digest_file(out_dir, RISK_CSV)?,
            digest_file(out_dir, REPORT_JSON)?,
        ],
    };
    let manifest_path = out_dir.join(MANIFEST_JSON);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok((report, manifest))
}

/// Reruns a manifest's config into `out_dir` and reports files whose digest differs.
pub fn verify_manifest(manifest: &RunManifest, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let opts = RunOptions {
        workers: manifest.workers,
        log: false,
    };
    let (_, fresh) = run_and_write(&manifest.config, &opts, out_dir)?;
    Ok(manifest
        .files
        .iter()
        .filter(|f| {
            !fresh
                .files
                .iter()
                .any(|g| g.path == f.path && g.sha256 == f.sha256)
        })
        .map(|f| out_dir.join(&f.path))
        .collect())
}
