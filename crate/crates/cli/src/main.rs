mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{ConfigError, Format, RunConfig, DEFAULT_DRAWS, DEFAULT_SEED};
use output::{emit, json_bytes, Staged};
use spikelab::eigen::SubspaceGrouping;
use spikelab::limits::{hdlss_limit_sample, predict, HdlssLimitSample, LimitPrediction};
use spikelab::model::{build_model, classify_regime, Regime, RegimeReport, SpikeModel};
use spikelab::montecarlo::{
    self, identity_check, kde, read_replication_column, run_replications, sweep, verify, Density, Metric,
    MonteCarloError, MonteCarloSummary, Reference, RunOptions, Tolerances, VerificationReport, DEFAULT_MONITORED_NOISE,
    DEFAULT_REPS,
};
use spikelab::stats;

#[derive(Parser)]
#[command(name = "spikelab", version, about = "Spiked covariance PCA experiments")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "SPIKELAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the limiting angles and eigenvalue ratios as JSON.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Where to write the JSON (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run replications, verify against the limits and write CSV outputs.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean absolute angle deviation across sample sizes at fixed d/n.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated ascending sample sizes.
        #[arg(long = "n", value_delimiter = ',')]
        n_values: Option<Vec<usize>>,
        #[arg(long)]
        d_over_n: Option<f64>,
        /// Where to write the table (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-n limit draws compared with a finite-d simulation.
    Hdlss {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Limit draws [default: 100000].
        #[arg(long)]
        draws: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the exact finite-sample identities on one replication.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Largest acceptable residual.
        #[arg(long, default_value_t = 1e-7)]
        tolerance: f64,
    },
    /// Kernel density estimate of one column of a replications CSV.
    Kde {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "angle_vector_deg")]
        column: String,
        /// 1-based sample index.
        #[arg(long, default_value_t = 1)]
        index: usize,
        /// Bandwidth override (default: Silverman's rule).
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Where to write the curve (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Model or run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Treat n as fixed and d as growing.
    #[arg(long)]
    n_fixed: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Replications [default: 100].
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Noise indices measured after the spikes [default: 3].
    #[arg(long)]
    monitored_noise: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

enum Failure {
    Config(String),
    Verification(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<MonteCarloError> for Failure {
    fn from(e: MonteCarloError) -> Self {
        match e {
            MonteCarloError::Model(m) => Failure::Config(m.to_string()),
            MonteCarloError::BadNValues | MonteCarloError::BadDOverN(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Predict { common, out } => cmd_predict(&common, out.as_deref()),
        Command::Simulate { common, run, out } => cmd_simulate(&common, &run, out),
        Command::Sweep {
            common,
            run,
            n_values,
            d_over_n,
            out,
        } => cmd_sweep(&common, &run, n_values, d_over_n, out),
        Command::Hdlss {
            common,
            run,
            draws,
            out,
        } => cmd_hdlss(&common, &run, draws, out),
        Command::Check {
            common,
            seed,
            tolerance,
        } => cmd_check(&common, seed, tolerance),
        Command::Kde {
            input,
            column,
            index,
            bandwidth,
            format,
            out,
        } => cmd_kde(&input, &column, index, bandwidth, format.unwrap_or_default(), out.as_deref()),
    }
}

struct Loaded {
    run: RunConfig,
    model: SpikeModel,
    regime: RegimeReport,
}

fn load(common: &Common) -> Result<Loaded, Failure> {
    let run = config::load(&common.config)?;
    let model = build_model(&run.model).map_err(|e| Failure::Config(e.to_string()))?;
    for w in model.warnings() {
        eprintln!("warning: {w}");
    }
    let n_fixed = common.n_fixed || run.n_fixed.unwrap_or(false);
    let regime = classify_regime(&model, n_fixed);
    Ok(Loaded { run, model, regime })
}

struct Resolved {
    reps: usize,
    seed: u64,
    monitored_noise: usize,
    format: Format,
}

fn resolve(run: &RunConfig, args: &RunArgs) -> Result<Resolved, Failure> {
    let reps = args.reps.or(run.reps).unwrap_or(DEFAULT_REPS);
    if reps == 0 {
        return Err(Failure::Config("`reps` must be at least 1".into()));
    }
    Ok(Resolved {
        reps,
        seed: args.seed.or(run.seed).unwrap_or(DEFAULT_SEED),
        monitored_noise: args
            .monitored_noise
            .or(run.monitored_noise)
            .unwrap_or(DEFAULT_MONITORED_NOISE),
        format: args.format.or(run.format).unwrap_or_default(),
    })
}

fn out_dir(flag: Option<PathBuf>, run: &RunConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| run.out.clone())
        .ok_or_else(|| Failure::Config("`out` is required (flag --out or config key \"out\")".into()))
}

#[derive(Serialize)]
struct PredictOutput<'a> {
    /// Carried by `limits` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    regime: Option<Regime>,
    applicable_theorems: &'a [spikelab::model::LimitTheorem],
    #[serde(flatten)]
    limits: Option<&'a LimitPrediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    random_limits: Option<Vec<DrawMoments>>,
    warnings: &'a [String],
}

#[derive(Serialize)]
struct DrawMoments {
    index: usize,
    eigenvalue_ratio_mean: f64,
    eigenvalue_ratio_variance: f64,
    angle_mean_deg: f64,
    angle_std_deg: f64,
}

fn draw_moments(sample: &HdlssLimitSample) -> Vec<DrawMoments> {
    (0..sample.spike_count())
        .map(|j| {
            let ratios = stats::sorted(&sample.eigenvalue_ratio_draws(j));
            let angles = stats::sorted(&sample.angle_draws_deg(j));
            DrawMoments {
                index: j + 1,
                eigenvalue_ratio_mean: stats::mean(&ratios),
                eigenvalue_ratio_variance: stats::variance(&ratios),
                angle_mean_deg: stats::mean(&angles),
                angle_std_deg: stats::std_dev(&angles),
            }
        })
        .collect()
}

fn limit_draws(model: &SpikeModel, draws: usize, seed: u64) -> Result<HdlssLimitSample, Failure> {
    hdlss_limit_sample(model, draws, seed).map_err(|e| Failure::Config(e.to_string()))
}

fn cmd_predict(common: &Common, out: Option<&Path>) -> Outcome {
    let loaded = load(common)?;
    let (limits, random) = if loaded.regime.regime == Regime::Hdlss {
        let draws = loaded.run.draws.unwrap_or(DEFAULT_DRAWS);
        let seed = loaded.run.seed.unwrap_or(DEFAULT_SEED);
        (None, Some(draw_moments(&limit_draws(&loaded.model, draws, seed)?)))
    } else {
        let p = predict(&loaded.model, &loaded.regime).map_err(|e| Failure::Config(e.to_string()))?;
        (Some(p), None)
    };
    let doc = PredictOutput {
        regime: limits.is_none().then_some(loaded.regime.regime),
        applicable_theorems: &loaded.regime.applicable_theorems,
        limits: limits.as_ref(),
        random_limits: random,
        warnings: loaded.model.warnings(),
    };
    emit(out, &json_bytes(&doc))?;
    Ok(())
}

fn run_options(model_regime: Regime, monitored_noise: usize, pairwise: bool) -> RunOptions {
    RunOptions {
        monitored_noise,
        grouping: if model_regime == Regime::Hdlss {
            SubspaceGrouping::AllSpikes
        } else {
            SubspaceGrouping::Tiers
        },
        pairwise,
        score_ratios: false,
    }
}

/// Angle column that the limits refer to for each index.
fn angle_metric(model: &SpikeModel, regime: Regime, index: usize) -> Metric {
    let tier = model.tier_of(index);
    let tiered = model.tiers().get(tier).is_some_and(|t| t.multiplicity() > 1);
    if tiered && regime != Regime::Hdlss {
        Metric::AngleSubspaceDeg
    } else {
        Metric::AngleVectorDeg
    }
}

fn kde_curves(summary: &MonteCarloSummary, model: &SpikeModel, regime: Regime) -> Result<Vec<(usize, Density)>, Failure> {
    let mut curves = Vec::new();
    for index in summary.indices() {
        let values = summary.values(index, angle_metric(model, regime, index));
        if values.len() < 2 {
            continue;
        }
        let density = kde(&values, None).map_err(|e| Failure::Runtime(e.to_string()))?;
        curves.push((index, density));
    }
    Ok(curves)
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<(), MonteCarloError>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn verdict(report: &VerificationReport) -> Outcome {
    if report.pass {
        return Ok(());
    }
    let failed: Vec<&str> = report
        .criteria
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.name.as_str())
        .collect();
    Err(Failure::Verification(failed.join(", ")))
}

fn cmd_simulate(common: &Common, args: &RunArgs, out: Option<PathBuf>) -> Outcome {
    let loaded = load(common)?;
    let r = resolve(&loaded.run, args)?;
    let dir = out_dir(out, &loaded.run)?;
    let regime = loaded.regime.regime;
    let model = &loaded.model;
    let summary = run_replications(model, r.reps, r.seed, &run_options(regime, r.monitored_noise, true))?;

    let report = if regime == Regime::Hdlss {
        let draws = loaded.run.draws.unwrap_or(DEFAULT_DRAWS);
        let limit = limit_draws(model, draws, r.seed)?;
        verify(&summary, Reference::Hdlss(&limit), &Tolerances::default())?
    } else {
        let prediction = predict(model, &loaded.regime).map_err(|e| Failure::Config(e.to_string()))?;
        verify(&summary, Reference::Limits(&prediction), &Tolerances::default())?
    };
    let curves = kde_curves(&summary, model, regime)?;
    let tiers = model.tiers().len();

    let mut staged = Staged::default();
    match r.format {
        Format::Csv => {
            staged.add("replications.csv", csv_bytes(|b| montecarlo::write_replications_csv(&summary, tiers, b))?);
            staged.add(
                "aggregates.csv",
                csv_bytes(|b| montecarlo::write_aggregates_csv(&summary, Some(&report), tiers, b))?,
            );
            staged.add("kde.csv", csv_bytes(|b| montecarlo::write_kde_csv(&curves, b))?);
            staged.add("pairwise.csv", csv_bytes(|b| montecarlo::write_pairwise_csv(&summary, b))?);
        }
        Format::Json => {
            staged.add("summary.json", json_bytes(&summary));
            let kde_doc: Vec<_> = curves
                .iter()
                .map(|(i, d)| serde_json::json!({ "index": i + 1, "density": d }))
                .collect();
            staged.add("kde.json", json_bytes(&kde_doc));
        }
    }
    staged.add("verification.json", json_bytes(&report));
    staged.commit(&dir)?;
    eprintln!(
        "{} replications written to {} ({})",
        summary.reps - summary.failures.len(),
        dir.display(),
        if report.pass { "verification passed" } else { "verification failed" }
    );
    verdict(&report)
}

fn cmd_sweep(
    common: &Common,
    args: &RunArgs,
    n_values: Option<Vec<usize>>,
    d_over_n: Option<f64>,
    out: Option<PathBuf>,
) -> Outcome {
    // The template's own d and n are replaced at every sweep point.
    let run = config::load(&common.config)?;
    let r = resolve(&run, args)?;
    let n_values = n_values
        .or_else(|| run.n_values.clone())
        .ok_or_else(|| Failure::Config("`n_values` is required (flag --n or config key \"n_values\")".into()))?;
    let d_over_n = d_over_n
        .or(run.d_over_n)
        .ok_or_else(|| Failure::Config("`d_over_n` is required (flag --d-over-n or config key \"d_over_n\")".into()))?;
    let options = run_options(Regime::Distinguishable, r.monitored_noise, false);
    let table = sweep(&run.model, &n_values, d_over_n, r.reps, r.seed, &options)?;
    let bytes = match r.format {
        Format::Csv => csv_bytes(|b| montecarlo::write_convergence_csv(&table, b))?,
        Format::Json => json_bytes(&table.rows),
    };
    emit(out.as_deref().or(run.out.as_deref()), &bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct LimitDrawRow {
    draw: usize,
    index: usize,
    w_eigenvalue: f64,
    eigenvalue_ratio: f64,
    angle_deg: f64,
}

fn cmd_hdlss(common: &Common, args: &RunArgs, draws: Option<usize>, out: Option<PathBuf>) -> Outcome {
    let mut loaded = load(common)?;
    loaded.regime = classify_regime(&loaded.model, true);
    let r = resolve(&loaded.run, args)?;
    let dir = out_dir(out, &loaded.run)?;
    let draws = draws.or(loaded.run.draws).unwrap_or(DEFAULT_DRAWS);
    let limit = limit_draws(&loaded.model, draws, r.seed)?;
    let summary = run_replications(
        &loaded.model,
        r.reps,
        r.seed,
        &run_options(Regime::Hdlss, r.monitored_noise, false),
    )?;
    let report = verify(&summary, Reference::Hdlss(&limit), &Tolerances::default())?;

    let m = limit.spike_count();
    let ratio_draws: Vec<Vec<f64>> = (0..m).map(|j| limit.eigenvalue_ratio_draws(j)).collect();
    let angle_draws: Vec<Vec<f64>> = (0..m).map(|j| limit.angle_draws_deg(j)).collect();
    let mut staged = Staged::default();
    match r.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let write = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
                w.write_record(["draw", "index", "w_eigenvalue", "eigenvalue_ratio", "angle_deg"])?;
                for (draw, eig) in limit.w_eigenvalues().iter().enumerate() {
                    for j in 0..m {
                        w.write_record([
                            draw.to_string(),
                            (j + 1).to_string(),
                            format!("{}", eig[j]),
                            format!("{}", ratio_draws[j][draw]),
                            format!("{}", angle_draws[j][draw]),
                        ])?;
                    }
                }
                w.flush()?;
                Ok(())
            };
            write(&mut w).map_err(|e| Failure::Runtime(e.to_string()))?;
            let bytes = w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;
            staged.add("limit_draws.csv", bytes);
            staged.add(
                "replications.csv",
                csv_bytes(|b| montecarlo::write_replications_csv(&summary, loaded.model.tiers().len(), b))?,
            );
        }
        Format::Json => {
            let rows: Vec<LimitDrawRow> = limit
                .w_eigenvalues()
                .iter()
                .enumerate()
                .flat_map(|(draw, eig)| {
                    let (ratio_draws, angle_draws) = (&ratio_draws, &angle_draws);
                    (0..m).map(move |j| LimitDrawRow {
                        draw,
                        index: j + 1,
                        w_eigenvalue: eig[j],
                        eigenvalue_ratio: ratio_draws[j][draw],
                        angle_deg: angle_draws[j][draw],
                    })
                })
                .collect();
            staged.add("limit_draws.json", json_bytes(&rows));
            staged.add("summary.json", json_bytes(&summary));
        }
    }
    staged.add(
        "verification.json",
        json_bytes(&serde_json::json!({
            "limit_moments": draw_moments(&limit),
            "report": report,
        })),
    );
    staged.commit(&dir)?;
    verdict(&report)
}

fn cmd_check(common: &Common, seed: Option<u64>, tolerance: f64) -> Outcome {
    let loaded = load(common)?;
    let seed = seed.or(loaded.run.seed).unwrap_or(DEFAULT_SEED);
    let residuals = identity_check(&loaded.model, seed).map_err(|e| match e {
        MonteCarloError::Eigen(spikelab::eigen::EigenError::IdentityPrecondition) => {
            Failure::Config("identity check needs `basis` = \"identity\" and `mean` = \"zero\"".into())
        }
        other => Failure::from(other),
    })?;
    let max = residuals.max();
    let doc = serde_json::json!({
        "seed": seed,
        "residuals": residuals,
        "max": max,
        "tolerance": tolerance,
        "pass": max <= tolerance,
    });
    emit(None, &json_bytes(&doc))?;
    if max <= tolerance {
        Ok(())
    } else {
        Err(Failure::Verification(format!("max residual {max:e} exceeds {tolerance:e}")))
    }
}

fn cmd_kde(input: &Path, column: &str, index: usize, bandwidth: Option<f64>, format: Format, out: Option<&Path>) -> Outcome {
    let file = std::fs::File::open(input).map_err(|e| Failure::Config(format!("{}: {e}", input.display())))?;
    let values =
        read_replication_column(file, column, index).map_err(|e| Failure::Config(format!("{}: {e}", input.display())))?;
    if index == 0 {
        return Err(Failure::Config("`index` is 1-based".into()));
    }
    let density = kde(&values, bandwidth).map_err(|e| Failure::Config(format!("{e} (column {column}, index {index})")))?;
    let curves = vec![(index - 1, density)];
    let bytes = match format {
        Format::Csv => csv_bytes(|b| montecarlo::write_kde_csv(&curves, b))?,
        Format::Json => json_bytes(&serde_json::json!({ "index": index, "density": curves[0].1 })),
    };
    emit(out, &bytes)?;
    Ok(())
}
