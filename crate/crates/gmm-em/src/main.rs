//! `gmm-em`: estimate spherical Gaussian mixtures with EM and reproduce the
//! convergence/error experiments from the command line.
//!
//! Exit codes: 0 success (for `fit`/`experiment`: the run converged/passed),
//! 2 for a completed `fit` that hit the iteration budget or an `experiment`
//! whose statistical check failed, 1 for any error.

use std::fs::File;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use gmm_em::diagnostics::bad_event_rate;
use gmm_em::em::{default_max_iters, default_variance_floor, EmConfig};
use gmm_em::experiments::{run_experiment, ExperimentConfig, STREAM_DATA, STREAM_INSTANCE};
use gmm_em::kmeans::one_step_kmeans;
use gmm_em::model::{Dataset, GmmSpec};
use gmm_em::synth::{make_separated_spec, sample_dataset, SeededRng, VarianceProfile, WeightProfile};
use gmm_em::{Error, Result};

#[derive(Parser)]
#[command(
    name = "gmm-em",
    version,
    about = "Spherical Gaussian mixture estimation: seeded data generation, \
             EM fitting, k-means initialization, and statistical experiments",
    after_help = "The GMM_EM_THREADS environment variable caps the worker \
                  count (0 or unset = one worker per core)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Every iteration uses the full dataset.
    Plain,
    /// Each iteration consumes a fresh disjoint batch.
    Split,
}

/// `uniform`, `geometric:R`, or an explicit comma list like `0.5,0.3,0.2`.
fn parse_weight_profile(s: &str) -> std::result::Result<WeightProfile, String> {
    if s == "uniform" {
        return Ok(WeightProfile::Uniform);
    }
    if let Some(r) = s.strip_prefix("geometric:") {
        let r: f64 = r.parse().map_err(|e| format!("geometric ratio {r:?}: {e}"))?;
        return Ok(WeightProfile::Geometric(r));
    }
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("weight {t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    Ok(WeightProfile::Explicit(vals))
}

/// `unit` or `geometric:R`.
fn parse_variance_profile(s: &str) -> std::result::Result<VarianceProfile, String> {
    if s == "unit" {
        return Ok(VarianceProfile::Unit);
    }
    if let Some(r) = s.strip_prefix("geometric:") {
        let r: f64 = r.parse().map_err(|e| format!("geometric ratio {r:?}: {e}"))?;
        return Ok(VarianceProfile::Geometric(r));
    }
    Err(format!("expected `unit` or `geometric:R`, got {s:?}"))
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a separated instance and a labeled dataset sampled from it.
    ///
    /// Writes `<OUT>.spec.json` and `<OUT>.data.csv`. The instance comes
    /// from --spec when given, otherwise it is placed from --k/--d with the
    /// requested profiles. Identical invocations produce identical bytes.
    Generate {
        /// Existing instance JSON to sample from (instead of --k/--d).
        #[arg(long, conflicts_with_all = ["k", "d", "margin_multiple"])]
        spec: Option<PathBuf>,
        /// Number of components.
        #[arg(long, required_unless_present = "spec")]
        k: Option<usize>,
        /// Dimension.
        #[arg(long, required_unless_present = "spec")]
        d: Option<usize>,
        /// Multiple of the base separation threshold to place means at.
        #[arg(long, default_value_t = 1.0)]
        margin_multiple: f64,
        /// `uniform`, `geometric:R`, or explicit weights `w0,w1,...`.
        #[arg(long, default_value = "uniform", value_parser = parse_weight_profile)]
        weights: WeightProfile,
        /// `unit` or `geometric:R`.
        #[arg(long, default_value = "unit", value_parser = parse_variance_profile)]
        variances: VarianceProfile,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Seed for both instance placement and sampling.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output path prefix.
        #[arg(long)]
        out: String,
    },
    /// Run EM from an initialization; write the iterate trace and final fit.
    ///
    /// Writes `<OUT>.trace.csv` and `<OUT>.final.json`. Exits 0 when the
    /// successive-change tolerance was reached, 2 when the iteration budget
    /// ran out first.
    Fit {
        /// Initialization (instance JSON).
        #[arg(long)]
        init: PathBuf,
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Ground-truth instance JSON; adds the D_m column to the trace.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Iteration style.
        #[arg(long, value_enum, default_value_t = ModeArg::Plain)]
        mode: ModeArg,
        /// Batch count for split mode (must equal --max-iters when both given).
        #[arg(long)]
        batches: Option<usize>,
        /// Iteration budget; default derived from --tol.
        #[arg(long)]
        max_iters: Option<usize>,
        /// Successive-change stopping tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Output path prefix.
        #[arg(long)]
        out: String,
    },
    /// One-step k-means: assign, then estimate weights/means/variances.
    ///
    /// Reads initial means from --init (instance JSON; weights and variances
    /// in it are ignored) and writes the resulting estimate JSON to --out.
    InitKmeans {
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Source of the initial means (instance JSON).
        #[arg(long)]
        init: PathBuf,
        /// Output path for the estimate JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Good-event diagnostics for one target component on labeled data.
    ///
    /// Evaluates the per-sample event indicators for every source component
    /// against the target and reports empirical bad rates next to the
    /// analytic bound. JSON goes to --out, or stdout when --out is absent.
    Diagnose {
        /// Labeled dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Ground-truth instance JSON.
        #[arg(long)]
        truth: PathBuf,
        /// Estimate JSON the events are evaluated with; defaults to truth.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Target component index.
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Output path for the report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a configured experiment across seeds.
    ///
    /// Writes `<OUT>.rows.csv` and `<OUT>.summary.json` (prefix from --out
    /// or the config's `out` field) and prints the summary. Exits 0 when the
    /// experiment's statistical check passes, 2 when it fails.
    Experiment {
        /// Experiment config JSON (schema 1).
        #[arg(long)]
        config: PathBuf,
        /// Output path prefix; overrides the config's `out` field.
        #[arg(long)]
        out: Option<String>,
    },
}

/// Apply the GMM_EM_THREADS cap (0 or unset = one worker per core).
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("GMM_EM_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("GMM_EM_THREADS = {raw:?} is not a number")))?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn cmd_generate(
    spec_path: Option<PathBuf>,
    k: Option<usize>,
    d: Option<usize>,
    margin_multiple: f64,
    weights: &WeightProfile,
    variances: &VarianceProfile,
    n: usize,
    seed: u64,
    out: &str,
) -> Result<i32> {
    let spec = match spec_path {
        Some(p) => GmmSpec::read_json_file(p)?,
        None => {
            // clap enforces presence when --spec is absent.
            let (k, d) = (k.expect("required by clap"), d.expect("required by clap"));
            make_separated_spec(
                k,
                d,
                margin_multiple,
                weights,
                variances,
                &mut SeededRng::new(seed, STREAM_INSTANCE),
            )?
        }
    };
    let data = sample_dataset(&spec, n, &mut SeededRng::new(seed, STREAM_DATA))?;
    let spec_out = format!("{out}.spec.json");
    let data_out = format!("{out}.data.csv");
    spec.write_json_file(&spec_out)?;
    data.write_csv_file(&data_out)?;
    println!("wrote {spec_out} and {data_out} ({n} rows, k={}, d={})", spec.k(), spec.d());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    init: PathBuf,
    data: PathBuf,
    truth: Option<PathBuf>,
    mode: ModeArg,
    batches: Option<usize>,
    max_iters: Option<usize>,
    tol: f64,
    out: &str,
) -> Result<i32> {
    let init = GmmSpec::read_json_file(init)?;
    let data = Dataset::read_csv_file(data)?;
    let truth = truth.map(GmmSpec::read_json_file).transpose()?;

    let max_iters = match (mode, max_iters, batches) {
        (ModeArg::Plain, mi, None) => mi.unwrap_or_else(|| default_max_iters(tol)),
        (ModeArg::Plain, _, Some(_)) => {
            return Err(Error::Config("--batches only applies to --mode split".into()));
        }
        (ModeArg::Split, Some(mi), Some(b)) if mi != b => {
            return Err(Error::Config(format!(
                "split mode runs one batch per iteration: --max-iters {mi} != --batches {b}"
            )));
        }
        (ModeArg::Split, Some(mi), _) => mi,
        (ModeArg::Split, None, Some(b)) => b,
        (ModeArg::Split, None, None) => default_max_iters(tol),
    };
    let floor = default_variance_floor(&data);
    let cfg = match mode {
        ModeArg::Plain => EmConfig::plain(max_iters, tol, floor)?,
        ModeArg::Split => EmConfig::sample_split(max_iters, tol, floor)?,
    };

    let trace = gmm_em::em::fit(&init, &data, &cfg, truth.as_ref())?;
    let trace_out = format!("{out}.trace.csv");
    let final_out = format!("{out}.final.json");
    trace.write_csv(File::create(&trace_out)?)?;
    trace.final_estimate().write_json_file(&final_out)?;

    let last = trace.steps.last().expect("trace holds the initialization");
    let d_m = last.d_m.map(|v| format!(" D_m={v:.6}")).unwrap_or_default();
    println!(
        "converged={} iterations={} loglik={:.6}{d_m} (wrote {trace_out}, {final_out})",
        trace.converged,
        trace.steps.len() - 1,
        last.log_likelihood,
    );
    Ok(if trace.converged { 0 } else { 2 })
}

fn cmd_init_kmeans(data: PathBuf, init: PathBuf, out: PathBuf) -> Result<i32> {
    let data = Dataset::read_csv_file(data)?;
    let init = GmmSpec::read_json_file(init)?;
    let estimate = one_step_kmeans(&data, init.means())?;
    estimate.write_json_file(&out)?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_diagnose(
    data: PathBuf,
    truth: PathBuf,
    spec: Option<PathBuf>,
    target: usize,
    out: Option<PathBuf>,
) -> Result<i32> {
    let data = Dataset::read_csv_file(data)?;
    let truth = GmmSpec::read_json_file(truth)?;
    let estimate = match spec {
        Some(p) => GmmSpec::read_json_file(p)?,
        None => truth.clone(),
    };
    let reports = bad_event_rate(&data, &estimate, &truth, target)?;
    let json = serde_json::to_string_pretty(&reports)?;
    match out {
        Some(path) => {
            std::fs::write(&path, format!("{json}\n"))?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(0)
}

fn cmd_experiment(config: PathBuf, out: Option<String>) -> Result<i32> {
    let cfg = ExperimentConfig::read_json_file(config)?;
    let prefix = out.or_else(|| cfg.out.clone());
    let run = run_experiment(&cfg)?;
    let json = run.summary_json();
    if let Some(prefix) = &prefix {
        let rows_out = format!("{prefix}.rows.csv");
        let summary_out = format!("{prefix}.summary.json");
        run.write_rows_csv(File::create(&rows_out)?)?;
        std::fs::write(&summary_out, format!("{json}\n"))?;
        eprintln!("wrote {rows_out} and {summary_out}");
    }
    println!("{json}");
    Ok(if run.summary.pass() { 0 } else { 2 })
}

fn run(cli: Cli) -> Result<i32> {
    configure_threads()?;
    match cli.cmd {
        Cmd::Generate { spec, k, d, margin_multiple, weights, variances, n, seed, out } => {
            cmd_generate(spec, k, d, margin_multiple, &weights, &variances, n, seed, &out)
        }
        Cmd::Fit { init, data, truth, mode, batches, max_iters, tol, out } => {
            cmd_fit(init, data, truth, mode, batches, max_iters, tol, &out)
        }
        Cmd::InitKmeans { data, init, out } => cmd_init_kmeans(data, init, out),
        Cmd::Diagnose { data, truth, spec, target, out } => {
            cmd_diagnose(data, truth, spec, target, out)
        }
        Cmd::Experiment { config, out } => cmd_experiment(config, out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; bad flags are errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}
