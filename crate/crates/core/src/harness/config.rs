//! Experiment configuration: TOML (or JSON) schema, validation with field
//! paths, and model/estimator resolution.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{make_hard_kernel, KernelSpec};
use crate::error::{Error, Result};
use crate::estimators::{
    EstimatorConfig, NoiseEstConfig, NoiseLevel, Penalty, ScaleSource, SelectorConfig, SplitPolicy,
    DEFAULT_PENALTY_C,
};
use crate::evaluation::{RateClass, RatePrediction};
use crate::simulation::ModelSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub replications: usize,
    pub n_grid: Vec<usize>,
    /// Levels to run at; mutually exclusive with `level_rule`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub l_grid: Vec<usize>,
    /// Derive one level per `n` from a rate class instead of `l_grid`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_rule: Option<RateClass>,
    pub model: ModelSource,
    pub estimators: Vec<EstimatorSpec>,
    /// Worker threads; outputs do not depend on it, so it is not hashed.
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
}

/// Where the true kernel comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Zero {
        l_max: usize,
        sigma: f64,
    },
    /// Rank-1 hard kernel; with `level` unset it is rebuilt at each cell's level.
    Hard {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        level: Option<usize>,
        s: f64,
        #[serde(default = "one")]
        lambda_max: f64,
        sigma: f64,
    },
    /// Random orthonormal eigenvectors with eigenvalues uniform in `[eig_min, eig_max]`.
    Random {
        rank: usize,
        l_max: usize,
        sigma: f64,
        seed: u64,
        #[serde(default = "half")]
        eig_min: f64,
        #[serde(default = "two")]
        eig_max: f64,
    },
    Inline {
        kernel: KernelSpec<f64>,
        sigma: f64,
    },
    /// A `ModelSpec` JSON file, relative to the config file.
    File {
        path: PathBuf,
    },
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn two() -> f64 {
    2.0
}

/// How an estimator learns `sigma^2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    #[default]
    Known,
    /// Estimate from one extra trajectory per replication.
    Estimate { offset: usize, width: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSpec {
    /// `lambda_max + sigma^2` of the true model.
    Known,
    #[default]
    Plugin,
}

/// Tuning inputs shared by the penalized and adaptive estimators.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PenaltySpec {
    pub c: Option<f64>,
    pub t: Option<f64>,
    pub mu: Option<f64>,
    pub scale: ScaleSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    /// `R_n^(l)`, no noise correction.
    Empirical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Corrected {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default)]
        noise: NoiseSpec,
    },
    Penalized {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default)]
        noise: NoiseSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<f64>,
        /// Fixed regularization; overrides the rule.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mu: Option<f64>,
        #[serde(default)]
        scale: ScaleSpec,
    },
    /// Split-sample selection over levels `1..=l` of each cell.
    Adaptive {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default)]
        noise: NoiseSpec,
        #[serde(default)]
        split: SplitPolicy,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<f64>,
        /// Fixed regularization; overrides the rule.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mu: Option<f64>,
        #[serde(default)]
        scale: ScaleSpec,
    },
}

impl EstimatorSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            EstimatorSpec::Empirical { .. } => "empirical",
            EstimatorSpec::Corrected { .. } => "corrected",
            EstimatorSpec::Penalized { .. } => "penalized",
            EstimatorSpec::Adaptive { .. } => "adaptive",
        }
    }

    /// Label used in reports: `name`, or the kind.
    pub fn label(&self) -> String {
        let name = match self {
            EstimatorSpec::Empirical { name }
            | EstimatorSpec::Corrected { name, .. }
            | EstimatorSpec::Penalized { name, .. }
            | EstimatorSpec::Adaptive { name, .. } => name,
        };
        name.clone().unwrap_or_else(|| self.kind().to_string())
    }

    pub fn noise(&self) -> NoiseSpec {
        match self {
            EstimatorSpec::Empirical { .. } => NoiseSpec::Known,
            EstimatorSpec::Corrected { noise, .. }
            | EstimatorSpec::Penalized { noise, .. }
            | EstimatorSpec::Adaptive { noise, .. } => *noise,
        }
    }

    pub fn penalty_spec(&self) -> Option<PenaltySpec> {
        match *self {
            EstimatorSpec::Penalized {
                c, t, mu, scale, ..
            }
            | EstimatorSpec::Adaptive {
                c, t, mu, scale, ..
            } => Some(PenaltySpec { c, t, mu, scale }),
            _ => None,
        }
    }

    /// Library configuration at `level`; `model` supplies `sigma^2` when
    /// the noise is known and the scale when `scale = "known"`.
    pub fn estimator_config(&self, level: usize, model: &ModelSpec<f64>) -> EstimatorConfig<f64> {
        let mut cfg = EstimatorConfig::new(level, model.sigma2());
        if let NoiseSpec::Estimate { offset, width } = self.noise() {
            cfg.sigma2 = NoiseLevel::Estimate(NoiseEstConfig { offset, width });
        }
        if let Some(p) = self.penalty_spec() {
            cfg.penalty = match p.mu {
                Some(mu) => Penalty::Fixed(mu),
                None => Penalty::Rule {
                    c: p.c.unwrap_or(DEFAULT_PENALTY_C),
                    t: p.t,
                },
            };
            cfg.scale = match p.scale {
                ScaleSpec::Known => ScaleSource::Known(model.lambda_plus_sigma2()),
                ScaleSpec::Plugin => ScaleSource::PluginTopEigenvalue,
            };
        }
        cfg
    }

    pub fn selector_config(&self, level: usize) -> Option<SelectorConfig> {
        match self {
            EstimatorSpec::Adaptive { split, .. } => Some(SelectorConfig {
                max_level: level,
                split: *split,
            }),
            _ => None,
        }
    }
}

/// One `(n, l)` grid point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub n: usize,
    pub l: usize,
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the extension is `.json`; relative model
    /// file paths are resolved against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg: ExperimentConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
        } else {
            toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
        };
        if let ModelSource::File { path: model_path } = &mut cfg.model {
            if model_path.is_relative() {
                if let Some(dir) = path.parent() {
                    *model_path = dir.join(&*model_path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("<string>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON encoding (excluding `workers`).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must be nonempty"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications", "must be >= 1"));
        }
        if self.n_grid.is_empty() {
            return Err(Error::config("n_grid", "must be nonempty"));
        }
        for (i, &n) in self.n_grid.iter().enumerate() {
            if n < 2 {
                return Err(Error::config(
                    format!("n_grid[{i}]"),
                    format!("must be >= 2, got {n}"),
                ));
            }
        }
        match (&self.level_rule, self.l_grid.is_empty()) {
            (Some(_), false) => {
                return Err(Error::config(
                    "l_grid",
                    "give either `l_grid` or `level_rule`, not both",
                ))
            }
            (None, true) => return Err(Error::config("l_grid", "must be nonempty")),
            (Some(rule), true) => {
                RatePrediction::new(*rule, 1.0)
                    .map_err(|e| Error::config("level_rule", e.to_string()))?;
            }
            (None, false) => {
                for (i, &l) in self.l_grid.iter().enumerate() {
                    if l == 0 {
                        return Err(Error::config(format!("l_grid[{i}]"), "must be >= 1"));
                    }
                }
            }
        }
        if let Some(0) = self.workers {
            return Err(Error::config("workers", "must be >= 1"));
        }
        self.validate_model()?;
        if self.estimators.is_empty() {
            return Err(Error::config("estimators", "must be nonempty"));
        }
        let mut labels = HashSet::new();
        for (i, est) in self.estimators.iter().enumerate() {
            let at = |field: &str| format!("estimators[{i}].{field}");
            if !labels.insert(est.label()) {
                return Err(Error::config(
                    at("name"),
                    format!("duplicate estimator label `{}`", est.label()),
                ));
            }
            if let NoiseSpec::Estimate { width, .. } = est.noise() {
                if width == 0 {
                    return Err(Error::config(at("noise.width"), "must be >= 1"));
                }
            }
            if let Some(p) = est.penalty_spec() {
                if let Some(c) = p.c {
                    if !(c > 0.0 && c.is_finite()) {
                        return Err(Error::config(at("c"), format!("must be > 0, got {c}")));
                    }
                }
                if let Some(t) = p.t {
                    if !(t > 0.0 && t.is_finite()) {
                        return Err(Error::config(at("t"), format!("must be > 0, got {t}")));
                    }
                }
                if let Some(mu) = p.mu {
                    if !(mu >= 0.0 && mu.is_finite()) {
                        return Err(Error::config(at("mu"), format!("must be >= 0, got {mu}")));
                    }
                }
            }
        }
        // Every cell's level must fit the model.
        for cell in self.cells()? {
            let model = self
                .model_for_level(cell.l)
                .map_err(|e| Error::config("model", e.to_string()))?;
            if cell.l > model.kernel.l_max() {
                return Err(Error::config(
                    "l_grid",
                    format!(
                        "level {} exceeds the model's l_max = {}",
                        cell.l,
                        model.kernel.l_max()
                    ),
                ));
            }
        }
        Ok(())
    }

    fn validate_model(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let fail = |field: &str, msg: String| Err(Error::config(format!("model.{field}"), msg));
        match &self.model {
            ModelSource::Zero { l_max, sigma } => {
                if *l_max == 0 {
                    return fail("l_max", "must be >= 1".into());
                }
                if !positive(*sigma) {
                    return fail("sigma", format!("must be > 0, got {sigma}"));
                }
            }
            ModelSource::Hard {
                level,
                s,
                lambda_max,
                sigma,
            } => {
                if *level == Some(0) {
                    return fail("level", "must be >= 1".into());
                }
                if !positive(*s) {
                    return fail("s", format!("must be > 0, got {s}"));
                }
                if !positive(*lambda_max) {
                    return fail("lambda_max", format!("must be > 0, got {lambda_max}"));
                }
                if !positive(*sigma) {
                    return fail("sigma", format!("must be > 0, got {sigma}"));
                }
            }
            ModelSource::Random {
                rank,
                l_max,
                sigma,
                eig_min,
                eig_max,
                ..
            } => {
                if *rank == 0 || rank > l_max {
                    return fail(
                        "rank",
                        format!("must be in [1, l_max = {l_max}], got {rank}"),
                    );
                }
                if !positive(*sigma) {
                    return fail("sigma", format!("must be > 0, got {sigma}"));
                }
                if !(positive(*eig_min) && eig_min <= eig_max && eig_max.is_finite()) {
                    return fail(
                        "eig_min",
                        format!("need 0 < eig_min <= eig_max, got [{eig_min}, {eig_max}]"),
                    );
                }
            }
            ModelSource::Inline { sigma, .. } => {
                if !positive(*sigma) {
                    return fail("sigma", format!("must be > 0, got {sigma}"));
                }
            }
            ModelSource::File { .. } => {}
        }
        Ok(())
    }

    /// True model for cells at level `l`.
    pub fn model_for_level(&self, l: usize) -> Result<ModelSpec<f64>> {
        match &self.model {
            ModelSource::Zero { l_max, sigma } => ModelSpec::new(KernelSpec::zero(*l_max)?, *sigma),
            ModelSource::Hard {
                level,
                s,
                lambda_max,
                sigma,
            } => ModelSpec::new(
                make_hard_kernel(level.unwrap_or(l), *s, *lambda_max)?,
                *sigma,
            ),
            ModelSource::Random {
                rank,
                l_max,
                sigma,
                seed,
                eig_min,
                eig_max,
            } => {
                let mut rng = ChaCha20Rng::seed_from_u64(*seed);
                let kernel = random_kernel(&mut rng, *rank, *l_max, *eig_min, *eig_max)?;
                ModelSpec::new(kernel, *sigma)
            }
            ModelSource::Inline { kernel, sigma } => ModelSpec::new(kernel.clone(), *sigma),
            ModelSource::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })
            }
        }
    }

    /// Scale `lambda_max + sigma^2` for the level rule; the hard kernel's
    /// scale does not depend on its level.
    fn rule_scale(&self) -> Result<f64> {
        Ok(self.model_for_level(1)?.lambda_plus_sigma2())
    }

    /// Grid cells in order: `n` outer, `l` inner.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut out = Vec::new();
        for &n in &self.n_grid {
            let levels = match &self.level_rule {
                Some(rule) => {
                    let pred = RatePrediction::new(*rule, self.rule_scale()?)?;
                    vec![crate::evaluation::predicted_level(&pred, n)?]
                }
                None => self.l_grid.clone(),
            };
            for l in levels {
                out.push(Cell {
                    index: out.len(),
                    n,
                    l,
                });
            }
        }
        Ok(out)
    }
}

/// Random rank-`rank` kernel in `S_{l_max}` with Gaussian eigenvector draws.
pub fn random_kernel<R: Rng + ?Sized>(
    rng: &mut R,
    rank: usize,
    l_max: usize,
    eig_min: f64,
    eig_max: f64,
) -> Result<KernelSpec<f64>> {
    let rows: Vec<Vec<f64>> = (0..rank)
        .map(|_| {
            (0..l_max)
                .map(|_| <f64 as crate::scalar::Real>::standard_normal(rng))
                .collect()
        })
        .collect();
    let eigs: Vec<f64> = (0..rank)
        .map(|_| {
            if eig_max > eig_min {
                rng.random_range(eig_min..=eig_max)
            } else {
                eig_min
            }
        })
        .collect();
    KernelSpec::orthonormalized(eigs, rows, l_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PROP1: &str = r#"
name = "zero-kernel"
seed = 1
replications = 10
n_grid = [200]
l_grid = [5]

[model]
source = "zero"
l_max = 5
sigma = 1.0

[[estimators]]
kind = "corrected"
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_toml_str(PROP1).unwrap();
        assert_eq!(
            cfg.cells().unwrap(),
            vec![Cell {
                index: 0,
                n: 200,
                l: 5
            }]
        );
        assert_eq!(cfg.estimators[0].label(), "corrected");
        assert_eq!(
            cfg.hash(),
            ExperimentConfig::from_toml_str(PROP1).unwrap().hash()
        );
    }

    #[test]
    fn workers_do_not_change_the_hash() {
        let a = ExperimentConfig::from_toml_str(PROP1).unwrap();
        let b = ExperimentConfig::from_toml_str(
            &PROP1.replace("l_grid = [5]", "l_grid = [5]\nworkers = 4"),
        )
        .unwrap();
        assert_eq!(b.workers, Some(4));
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_toml_str(&PROP1.replace("seed = 1", "seed = 2")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn errors_carry_field_paths() {
        let cases = [
            (
                PROP1.replace("n_grid = [200]", "n_grid = [200, 0]"),
                "n_grid[1]",
            ),
            (
                PROP1.replace("replications = 10", "replications = 0"),
                "replications",
            ),
            (PROP1.replace("sigma = 1.0", "sigma = -1.0"), "model.sigma"),
            (PROP1.replace("l_grid = [5]", "l_grid = [6]"), "l_grid"),
            (
                format!("{PROP1}\n[[estimators]]\nkind = \"penalized\"\nc = -1.0\n"),
                "estimators[1].c",
            ),
            (
                format!("{PROP1}\n[[estimators]]\nkind = \"corrected\"\n"),
                "estimators[1].name",
            ),
        ];
        for (text, want) in cases {
            match ExperimentConfig::from_toml_str(&text) {
                Err(Error::Config { path, .. }) => assert_eq!(path, want),
                other => panic!("expected config error at {want}, got {other:?}"),
            }
        }
        assert!(matches!(
            ExperimentConfig::from_toml_str(&PROP1.replace("seed = 1", "seed = 1\nbogus = 3")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn level_rule_cells() {
        let text = r#"
name = "smooth"
seed = 3
replications = 2
n_grid = [512, 1000]
level_rule = { class = "smooth_eigenfunctions", r = 1, s = 1.0 }

[model]
source = "hard"
s = 1.0
sigma = 1.0

[[estimators]]
kind = "penalized"
t = 1.0
scale = "known"
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let cells = cfg.cells().unwrap();
        assert_eq!(cells.iter().map(|c| c.l).collect::<Vec<_>>(), vec![8, 10]);
        let model = cfg.model_for_level(10).unwrap();
        assert_eq!(model.kernel.l_max(), 20);
        let est = cfg.estimators[0].estimator_config(10, &model);
        assert_eq!(est.scale, ScaleSource::Known(2.0));
        assert_eq!(
            est.penalty,
            Penalty::Rule {
                c: 2.0,
                t: Some(1.0)
            }
        );
    }

    #[test]
    fn json_encoding_is_accepted() {
        let cfg = ExperimentConfig::from_toml_str(PROP1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(&p).unwrap(), cfg);
    }

    #[test]
    fn random_model_is_reproducible() {
        let text = PROP1.replace(
            "source = \"zero\"\nl_max = 5\nsigma = 1.0",
            "source = \"random\"\nrank = 2\nl_max = 8\nsigma = 0.5\nseed = 9",
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let a = cfg.model_for_level(5).unwrap();
        let b = cfg.model_for_level(5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kernel.rank(), 2);
    }
}
