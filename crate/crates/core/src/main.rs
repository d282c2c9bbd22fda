use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lowrankcov::estimators::{
    corrected_empirical, empirical_covariance, estimate_sigma2, fit_pipeline, nuclear_penalized,
    NoiseEstConfig, Penalty, ScaleSource, SelectorConfig, SplitPolicy,
};
use lowrankcov::harness::plot::{render_loglog, Series};
use lowrankcov::harness::{fit_rates, read_risk_csv, run_and_write, ExperimentConfig, RunOptions};
use lowrankcov::simulation::{
    fmt_f64, sample_coeffs, sample_trajectory_coeffs, ModelSpec, RngPolicy, SampleSet,
};
use lowrankcov::{Error, EstimatorConfig, SymKernelMatrix};

#[derive(Parser)]
#[command(
    name = "lowrankcov",
    version,
    about = "Low-rank covariance-function estimation in white noise"
)]
struct Cli {
    /// Master seed (overrides the config's seed for `bench`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "LOWRANKCOV_WORKERS")]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Draw basis-coefficient samples from a model.
    Simulate(SimulateArgs),
    /// Fit one estimator on a sample file and emit the coefficient matrix.
    Estimate(EstimateArgs),
    /// Split-sample level selection over levels 1..=L.
    Select(SelectArgs),
    /// Estimate sigma^2 from the high-frequency coefficients of one trajectory.
    Noise(NoiseArgs),
    /// Run a Monte Carlo experiment from --config.
    Bench,
    /// Fit log-log rates over a bench risk CSV and plot them.
    Rates(RatesArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// `ModelSpec` JSON; defaults to the model of --config.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(short = 'n', long)]
    n: usize,
    #[arg(short = 'l', long)]
    level: usize,
    /// Also write one trajectory's first H coefficients to `trajectory.csv`.
    #[arg(long)]
    noise_horizon: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorKind {
    Empirical,
    Corrected,
    Penalized,
}

#[derive(Args)]
struct PenaltyArgs {
    /// Fixed regularization mu; overrides the rule.
    #[arg(long)]
    mu: Option<f64>,
    /// Rule constant c in mu = c (lambda_max + sigma^2) delta_n(l, t).
    #[arg(long, default_value_t = lowrankcov::estimators::DEFAULT_PENALTY_C)]
    c: f64,
    /// Rule confidence t (default log n).
    #[arg(long)]
    t: Option<f64>,
    /// Known lambda_max + sigma^2; default is the top eigenvalue of R_n.
    #[arg(long)]
    scale: Option<f64>,
}

impl PenaltyArgs {
    fn apply(&self, cfg: EstimatorConfig<f64>) -> EstimatorConfig<f64> {
        let penalty = match self.mu {
            Some(mu) => Penalty::Fixed(mu),
            None => Penalty::Rule {
                c: self.c,
                t: self.t,
            },
        };
        let scale = self
            .scale
            .map_or(ScaleSource::PluginTopEigenvalue, ScaleSource::Known);
        cfg.with_penalty(penalty).with_scale(scale)
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Sample CSV (header x1..xl).
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorKind::Penalized)]
    estimator: EstimatorKind,
    /// Level; defaults to all columns.
    #[arg(short = 'l', long)]
    level: Option<usize>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[command(flatten)]
    penalty: PenaltyArgs,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Largest candidate level L; defaults to all columns.
    #[arg(long)]
    max_level: Option<usize>,
    #[arg(long)]
    sigma2: f64,
    /// Fit on the second half and score on the first.
    #[arg(long)]
    swap_halves: bool,
    #[command(flatten)]
    penalty: PenaltyArgs,
}

#[derive(Args)]
struct NoiseArgs {
    /// CSV whose row `--row` holds one trajectory's coefficients.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// L_offset: coefficients 1..=offset are skipped.
    #[arg(long)]
    offset: usize,
    /// M: number of coefficients averaged.
    #[arg(long)]
    width: usize,
}

#[derive(Args)]
struct RatesArgs {
    /// Risk CSV written by `bench`.
    #[arg(long)]
    input: PathBuf,
}

/// Exit status: 2 for configuration and input errors, 3 for numerical failures.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::FailureThreshold { .. } | Error::Numerical(_) => 3,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> lowrankcov::Result<()> {
    match &cli.command {
        Command::Simulate(args) => simulate(cli, args),
        Command::Estimate(args) => estimate(cli, args),
        Command::Select(args) => select(cli, args),
        Command::Noise(args) => noise(cli, args),
        Command::Bench => bench(cli),
        Command::Rates(args) => rates(cli, args),
    }
}

fn usage(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: msg.into(),
    }
}

fn write_file(path: &Path, contents: &str) -> lowrankcov::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `contents` to `--out/name`, or to stdout without --out.
fn emit(cli: &Cli, name: &str, contents: &str) -> lowrankcov::Result<()> {
    match &cli.out {
        Some(dir) => write_file(&dir.join(name), contents),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes()).map_err(|e| Error::Io {
                path: PathBuf::from("<stdout>"),
                source: e,
            })
        }
    }
}

fn to_json<S: Serialize>(value: &S) -> lowrankcov::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn matrix_csv(m: &SymKernelMatrix<f64>) -> String {
    m.rows()
        .iter()
        .take(m.level())
        .map(|r| r.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

/// An unreadable config file is a config error (exit 2), not an output failure.
fn load_config(path: &Path) -> lowrankcov::Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Parse {
            path,
            message: source.to_string(),
        },
        other => other,
    })
}

fn load_model(cli: &Cli, args: &SimulateArgs) -> lowrankcov::Result<ModelSpec<f64>> {
    match (&args.model, &cli.config) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })
        }
        (None, Some(cfg)) => load_config(cfg)?.model_for_level(args.level),
        (None, None) => Err(usage("--model", "give --model <json> or --config <file>")),
    }
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> lowrankcov::Result<()> {
    let model = load_model(cli, args)?;
    let policy = RngPolicy::new(cli.seed.unwrap_or(0));
    let samples = sample_coeffs(&model, args.n, args.level, &policy)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    match cli.format {
        Format::Csv => samples.write_csv(&out.join("samples.csv"))?,
        Format::Json => {
            #[derive(Serialize)]
            struct Doc<'a> {
                #[serde(flatten)]
                meta: lowrankcov::simulation::SampleSidecar,
                rows: Vec<&'a [f64]>,
            }
            let doc = Doc {
                meta: samples.sidecar(),
                rows: samples.rows().collect(),
            };
            write_file(&out.join("samples.json"), &to_json(&doc)?)?;
        }
    }
    write_file(
        &out.join("samples.meta.json"),
        &to_json(&samples.sidecar())?,
    )?;
    if let Some(h) = args.noise_horizon {
        let mut rng = policy.replication(0).rng();
        let x = sample_trajectory_coeffs(&model, h, &mut rng);
        SampleSet::from_row_major(1, h, x)?.write_csv(&out.join("trajectory.csv"))?;
    }
    eprintln!(
        "wrote {} samples at level {} to {}",
        args.n,
        args.level,
        out.display()
    );
    Ok(())
}

fn estimate(cli: &Cli, args: &EstimateArgs) -> lowrankcov::Result<()> {
    let samples = SampleSet::<f64>::read_csv(&args.samples)?;
    let level = args.level.unwrap_or(samples.level());
    let samples = samples.truncated(level)?;
    let need_sigma2 = || {
        args.sigma2.ok_or_else(|| {
            usage(
                "--sigma2",
                "required for the corrected and penalized estimators",
            )
        })
    };
    let m = match args.estimator {
        EstimatorKind::Empirical => empirical_covariance(&samples)?,
        EstimatorKind::Corrected => corrected_empirical(&samples, need_sigma2()?)?,
        EstimatorKind::Penalized => {
            let cfg = args
                .penalty
                .apply(EstimatorConfig::new(level, need_sigma2()?));
            let fit = nuclear_penalized(&samples, &cfg)?;
            eprintln!("mu = {}", fit.mu);
            fit.estimate
        }
    };
    match cli.format {
        Format::Json => emit(cli, "estimate.json", &to_json(&m)?),
        Format::Csv => emit(cli, "estimate.csv", &matrix_csv(&m)),
    }
}

fn select(cli: &Cli, args: &SelectArgs) -> lowrankcov::Result<()> {
    let samples = SampleSet::<f64>::read_csv(&args.samples)?;
    let selector = SelectorConfig {
        max_level: args.max_level.unwrap_or(samples.level()),
        split: if args.swap_halves {
            SplitPolicy::SecondHalfScore
        } else {
            SplitPolicy::FirstHalfFit
        },
    };
    let cfg = args.penalty.apply(EstimatorConfig::new(1, args.sigma2));
    let fit = fit_pipeline(&samples, &selector, &cfg)?;
    match cli.format {
        Format::Json => emit(cli, "select.json", &to_json(&fit)?),
        Format::Csv => {
            let mut s = String::from("l,mu,score\n");
            for (i, (mu, score)) in fit.mus.iter().zip(&fit.scores).enumerate() {
                s += &format!("{},{},{}\n", i + 1, fmt_f64(*mu), fmt_f64(*score));
            }
            eprintln!("l_hat = {}", fit.l_hat);
            emit(cli, "select.csv", &s)
        }
    }
}

fn noise(cli: &Cli, args: &NoiseArgs) -> lowrankcov::Result<()> {
    let samples = SampleSet::<f64>::read_csv(&args.samples)?;
    if args.row >= samples.n() {
        return Err(usage("--row", format!("file has {} rows", samples.n())));
    }
    let cfg = NoiseEstConfig::new(args.offset, args.width)?;
    let value = estimate_sigma2(samples.row(args.row), &cfg)?;
    #[derive(Serialize)]
    struct Out {
        sigma2_hat: f64,
        offset: usize,
        width: usize,
    }
    let out = Out {
        sigma2_hat: value,
        offset: args.offset,
        width: args.width,
    };
    match cli.format {
        Format::Json => emit(cli, "noise.json", &to_json(&out)?),
        Format::Csv => emit(
            cli,
            "noise.csv",
            &format!(
                "sigma2_hat,offset,width\n{},{},{}\n",
                fmt_f64(value),
                args.offset,
                args.width
            ),
        ),
    }
}

fn bench(cli: &Cli) -> lowrankcov::Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage("--config", "bench needs --config <file>"))?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("bench-out"));
    let opts = RunOptions {
        workers: cli.workers,
        log: true,
    };
    let (_, manifest) = run_and_write(&cfg, &opts, &out)?;
    for f in &manifest.files {
        eprintln!("{}  {}", f.sha256, out.join(&f.path).display());
    }
    Ok(())
}

fn rates(cli: &Cli, args: &RatesArgs) -> lowrankcov::Result<()> {
    let rows = read_risk_csv(&args.input)?;
    let fits = fit_rates(&rows)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let series: Vec<Series<'_>> = fits
        .iter()
        .map(|f| Series {
            label: &f.estimator,
            fit: &f.fit,
        })
        .collect();
    let title = format!("risk vs n ({})", args.input.display());
    write_file(&out.join("rates.svg"), &render_loglog(&title, &series))?;
    let json = to_json(&fits)?;
    write_file(&out.join("rates.json"), &json)?;
    match cli.format {
        Format::Json => print!("{json}"),
        Format::Csv => {
            println!("estimator,slope,intercept,r2");
            for f in &fits {
                println!(
                    "{},{},{},{}",
                    f.estimator,
                    fmt_f64(f.fit.slope),
                    fmt_f64(f.fit.intercept),
                    fmt_f64(f.fit.r2)
                );
            }
        }
    }
    Ok(())
}
