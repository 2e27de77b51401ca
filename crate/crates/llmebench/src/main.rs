use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use llmebench::driver;
use llmebench::types::ExperimentParams;

/// Benchmark LLMs with declarative recipes: datasets, prompts, providers,
/// caching, and metrics in one run.
#[derive(Debug, Parser)]
#[command(name = "llmebench", version)]
struct Cli {
    /// Wildcard pattern selecting assets by name (* and ?)
    #[arg(long, default_value = "*")]
    filter: String,

    /// Number of few-shot examples per prompt
    #[arg(long = "n_shots", default_value_t = 0)]
    n_shots: u32,

    /// Evaluate only the first N samples of each test set
    #[arg(long)]
    limit: Option<usize>,

    /// Skip cache reads; responses are still written back to the cache
    #[arg(long = "ignore_cache")]
    ignore_cache: bool,

    /// Worker threads per asset
    #[arg(long = "max-parallel", default_value_t = 1)]
    max_parallel: usize,

    /// Recompute predictions from cached responses without model calls
    #[arg(long)]
    reprocess: bool,

    /// List matching assets and exit
    #[arg(long)]
    list: bool,

    /// Seed recorded with the run
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Directory containing recipe files (searched recursively)
    benchmark_dir: PathBuf,

    /// Directory for caches and results (required unless --list)
    results_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}

fn execute(cli: Cli) -> Result<(), driver::DriverError> {
    if cli.list {
        let assets = driver::discover_assets(&cli.benchmark_dir, &cli.filter)?;
        for asset in assets {
            println!("{}\t{}", asset.name, asset.path.display());
        }
        return Ok(());
    }

    let results_dir = cli.results_dir.ok_or_else(|| {
        driver::DriverError::Params("a results directory is required".to_string())
    })?;

    let mut params = ExperimentParams::new(cli.benchmark_dir, results_dir);
    params.asset_filter = cli.filter;
    params.n_shots = cli.n_shots;
    params.limit = cli.limit;
    params.ignore_cache = cli.ignore_cache;
    params.max_parallel = cli.max_parallel;
    params.seed = cli.seed;

    let reports = driver::run(&params, cli.reprocess)?;
    for report in &reports {
        let summary = &report.summary;
        let headline = match summary.evaluation.primary_metric() {
            Some((name, value)) => format!("{name}={value:.4}"),
            None => "done".to_string(),
        };
        println!(
            "{} {}-shot: {} ({} samples, {} cache hits, {} provider calls, {:.2}s)",
            summary.asset_name,
            summary.n_shots,
            headline,
            summary.sample_count,
            summary.cache_hits,
            summary.provider_calls,
            summary.elapsed_seconds,
        );
        if !summary.failures.is_empty() {
            println!("  failures: {}", summary.failures.len());
            for failure in &summary.failures {
                println!(
                    "    {} [{}] {}",
                    failure.sample_id, failure.error_class, failure.detail
                );
            }
        }
        println!("  results: {}", report.results_path.display());
    }
    Ok(())
}
