//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for configuration problems, 2 when some
//! repetitions (or report inputs) failed but others succeeded, 3 when
//! nothing succeeded.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use bnmf_cli::config::{split_override, ConfigErrors, RunConfig};
use bnmf_cli::report;
use bnmf_cli::run::{self, RunOpts, RunStats};

#[derive(Parser)]
#[command(
    name = "bnmf",
    version,
    about = "Characterize the solution space of Bayesian nonnegative matrix factorization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (flat `key = value` text).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Base seed; repetition i runs with seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel repetition workers (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Replace one config value, e.g. --override rrt.s0=0.02 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerKind {
    Gibbs,
    Hmc,
}

#[derive(Subcommand)]
enum Cmd {
    /// Projected-gradient solver restarts (best factorization and errors).
    Solve(CommonArgs),
    /// Rank-R truncated SVD of the dataset.
    Svd(CommonArgs),
    /// Batch variational mixture fit.
    Nvi(CommonArgs),
    /// MCMC chain, feeding the online mixture unless --raw is given.
    Sample {
        #[arg(value_enum)]
        sampler: SamplerKind,
        /// Chain and logs only; skip the online mixture sink.
        #[arg(long)]
        raw: bool,
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Tree exploration over the solution manifold, feeding the online mixture.
    Explore(CommonArgs),
    /// Angular-distance, covering, and persistence statistics over a
    /// directory of mixture files.
    Metrics {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Gen(CommonArgs),
    /// Summarize run directories into a table and bundled CSVs.
    Report {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Builds the typed config from the file (if any), generic overrides, the
/// dedicated seed flag, and finally the subcommand's method choice.
fn load_config(args: &CommonArgs, method: Option<&str>) -> Result<RunConfig> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| {
            anyhow::Error::new(ConfigErrors(vec![format!("{}: {e}", path.display())]))
        })?,
        None => String::new(),
    };
    let mut pairs = Vec::new();
    let mut bad = Vec::new();
    for raw in &args.overrides {
        match split_override(raw) {
            Ok(kv) => pairs.push(kv),
            Err(e) => bad.push(e),
        }
    }
    if !bad.is_empty() {
        return Err(anyhow::Error::new(ConfigErrors(bad)));
    }
    if let Some(seed) = args.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(m) = method {
        pairs.push(("method".into(), m.to_string()));
    }
    RunConfig::from_text(&text, &pairs).map_err(anyhow::Error::new)
}

fn default_workers(requested: Option<usize>, repetitions: usize) -> usize {
    let available =
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    requested.unwrap_or_else(|| available.min(repetitions.max(1))).max(1)
}

fn stats_exit(stats: RunStats) -> ExitCode {
    if stats.failed == 0 {
        ExitCode::SUCCESS
    } else if stats.failed < stats.repetitions {
        eprintln!("{} of {} repetitions failed", stats.failed, stats.repetitions);
        ExitCode::from(2)
    } else {
        eprintln!("all {} repetitions failed", stats.repetitions);
        ExitCode::from(3)
    }
}

fn run_pipeline(args: &CommonArgs, method: &str, opts: RunOpts) -> Result<ExitCode> {
    let config = load_config(args, Some(method))?;
    let workers = default_workers(args.workers, config.repetitions);
    let stats = run::execute(&config, &args.out, workers, opts)?;
    println!(
        "{}: {}/{} repetitions succeeded -> {}",
        method,
        stats.succeeded,
        stats.repetitions,
        args.out.display()
    );
    Ok(stats_exit(stats))
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Solve(args) => run_pipeline(&args, "lin_restarts", RunOpts::default()),
        Cmd::Nvi(args) => run_pipeline(&args, "nvi", RunOpts::default()),
        Cmd::Explore(args) => run_pipeline(&args, "rrt_onvi", RunOpts::default()),
        Cmd::Sample { sampler, raw, args } => {
            let method = match sampler {
                SamplerKind::Gibbs => "gibbs_onvi",
                SamplerKind::Hmc => "hmc_onvi",
            };
            run_pipeline(&args, method, RunOpts { raw_chain: raw })
        }
        Cmd::Svd(args) => {
            let config = load_config(&args, None)?;
            let out = run::svd_out(&config, &args.out)?;
            println!("svd factors written -> {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gen(args) => {
            let config = load_config(&args, None)?;
            run::generate(&config, &args.out)?;
            println!("dataset written -> {}", args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Metrics { dir, out } => {
            let out_dir = out.unwrap_or_else(|| dir.clone());
            let summary = report::metrics_dir(&dir, &out_dir)?;
            for s in &summary.skipped {
                eprintln!("skipped: {s}");
            }
            println!(
                "{} components from {} files; covering number at 0.01 degrees: {}",
                summary.samples, summary.files, summary.covering_at_001
            );
            Ok(if summary.skipped.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Cmd::Report { dir, out } => {
            let bundle = report::render(&dir, out.as_deref())?;
            print!("{}", bundle.table);
            for w in &bundle.warnings {
                eprintln!("warning: {w}");
            }
            Ok(if bundle.rows == 0 {
                eprintln!("no run directories found under {}", dir.display());
                ExitCode::from(1)
            } else if bundle.warnings.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            if let Some(cfg) = e.downcast_ref::<ConfigErrors>() {
                eprintln!("{cfg}");
                ExitCode::from(1)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(3)
            }
        }
    }
}
