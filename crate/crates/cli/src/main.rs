mod check;
mod experiment;
mod output;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Offline model-based optimization with diversity-seeking distribution
/// matching and a Wasserstein critic constraint.
#[derive(Parser, Debug)]
#[command(name = "dynamo", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample an offline dataset from a built-in task and write it as CSV.
    GenData(GenDataArgs),
    /// Run one or more experiments (seeds x sweep cells).
    #[command(long_about = RUN_ABOUT)]
    Run(experiment::RunArgs),
    /// Build Rank and Optimality-Gap tables from a results directory.
    Report(ReportArgs),
    /// Run a quick invariant self-check suite.
    Check,
}

const RUN_ABOUT: &str = "Run one or more experiments (seeds x sweep cells).

Every (cell, seed) pair writes <out>/<cell>/seed-<s>.json and a per-iteration
log CSV. The output directory also receives aggregate.csv with the mean and a
95% confidence interval across seeds, computed as mean +- 1.96 * s / sqrt(m)
with s the sample standard deviation over m seeds, plus plot-ready histogram
CSVs. Flags override the config file, which overrides built-in defaults.
The process exits nonzero only if every run fails.";

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Task name (branin, gaussian-modes, seq-toy).
    #[arg(long)]
    task: String,
    /// Number of designs to sample before the ceiling filter.
    #[arg(long, default_value_t = 800)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the floor(q * n) lowest-scoring designs.
    #[arg(long)]
    ceiling: Option<f64>,
    /// Output file; defaults to <DYNAMO_OUT_DIR>/<task>-seed<seed>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "DYNAMO_OUT_DIR", default_value = "results")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory searched recursively for result JSON files.
    #[arg(long, env = "DYNAMO_OUT_DIR", default_value = "results")]
    results: PathBuf,
    /// Where report CSVs are written; defaults to the results directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Errors that map to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    use dynamo_core::tasks::{generate_offline, Sampler, Task};
    let task = Task::by_name(&args.task).map_err(|e| UsageError(e.to_string()))?;
    let ds = generate_offline(&task, args.n, &Sampler::Sobol, args.ceiling, args.seed)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| args.out_dir.join(format!("{}-seed{}.csv", args.task, args.seed)));
    output::write_atomic(&path, ds.to_csv_string().as_bytes())?;
    let raw = ds.raw_scores();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!("wrote {}: n = {}, d = {}, score range [{lo:.6}, {hi:.6}]", path.display(), ds.len(), ds.dim());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => experiment::run(a),
        Command::Report(a) => report::run(&a.results, a.out.as_deref()),
        Command::Check => check::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
