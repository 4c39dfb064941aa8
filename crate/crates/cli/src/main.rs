//! `crps` command line: one subcommand per pipeline stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crps_core::pipeline::{
    self, build_client, stage_critique, stage_emit, stage_eval, stage_explore, stage_pair,
    stage_stats, stage_synthesize, write_atomic, BackendKind, PipelineError, RunConfig,
};
use crps_core::record::serialize_line;
use crps_core::toy;

#[derive(Parser)]
#[command(name = "crps", about = "Search-based contrastive reasoning data synthesis", version)]
struct Cli {
    /// Run directory holding stage files.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Config file (TOML). Defaults to <run-dir>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the backend.
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    #[command(subcommand)]
    command: Command,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "live" => Ok(BackendKind::Live),
        "mock" => Ok(BackendKind::Mock),
        other => Err(format!("unknown backend {other:?} (expected live or mock)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run tree search per problem (problems.jsonl -> trees.jsonl, trajectories.jsonl).
    Explore,
    /// Draw contrastive pairs (trajectories.jsonl -> pairs.jsonl).
    Pair,
    /// Request and validate analyst critiques (pairs.jsonl -> critiques.jsonl).
    Critique,
    /// Synthesize and verify new paths (critiques.jsonl -> synth.jsonl).
    Synthesize,
    /// Sample the verified pool into the dataset (synth.jsonl -> dataset.jsonl).
    Emit {
        /// Override the dataset target size.
        #[arg(long)]
        target_size: Option<usize>,
        /// Balance draws across problems instead of global-uniform sampling.
        #[arg(long)]
        balance_per_problem: bool,
    },
    /// Perturb, solve, and score each problem (problems.jsonl -> eval.jsonl, report.json).
    Eval,
    /// Report per-stage counts and health metrics.
    Stats {
        /// Also write the aggregates as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the bundled 12-problem demo corpus into the run directory.
    InitDemo,
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let default_path = cli.run_dir.join("config.toml");
            if default_path.exists() {
                RunConfig::load(&default_path)?
            } else {
                RunConfig::default()
            }
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(backend) = cli.backend {
        cfg.backend = backend;
    }
    if let Command::Emit {
        target_size,
        balance_per_problem,
    } = &cli.command
    {
        if let Some(t) = target_size {
            cfg.target_size = *t;
        }
        if *balance_per_problem {
            cfg.balance_per_problem = true;
        }
    }
    // Resolve a relative mock script against the run directory.
    if let Some(script) = &cfg.mock_script {
        if script.is_relative() && !script.exists() {
            let candidate = cli.run_dir.join(script);
            if candidate.exists() {
                cfg.mock_script = Some(candidate);
            }
        }
    }
    // Live runs cache responses by default; search revisits prefixes and
    // cached replies make interrupted runs cheap to resume.
    if cfg.backend == BackendKind::Live && cfg.cache_dir.is_none() {
        cfg.cache_dir = Some(cli.run_dir.join("cache"));
    }
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn init_demo(run_dir: &PathBuf) -> Result<(), PipelineError> {
    std::fs::create_dir_all(run_dir).map_err(|e| PipelineError::Io {
        path: run_dir.display().to_string(),
        source: e,
    })?;
    let (problems, script) = toy::toy_corpus();
    let mut lines = String::new();
    for p in &problems {
        lines.push_str(&serialize_line(p));
        lines.push('\n');
    }
    write_atomic(&run_dir.join(pipeline::files::PROBLEMS), lines.as_bytes())?;
    let script_path = run_dir.join("mock_script.json");
    crps_core::client::save_script_sorted(&script, &script_path)
        .map_err(PipelineError::Script)?;
    let mut cfg = toy::toy_config();
    cfg.mock_script = Some(PathBuf::from("mock_script.json"));
    cfg.save(&run_dir.join("config.toml"))?;
    println!(
        "demo corpus written to {} ({} problems); run stages with --run-dir {}",
        run_dir.display(),
        problems.len(),
        run_dir.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    if matches!(cli.command, Command::InitDemo) {
        return init_demo(&cli.run_dir);
    }
    let cfg = load_config(cli)?;
    let run_dir = cli.run_dir.as_path();
    match &cli.command {
        Command::Explore => {
            let client = build_client(&cfg)?;
            let stats = stage_explore(run_dir, &cfg, &client)?;
            println!(
                "explore: {} problems, {} trees, {} trajectories ({} aborted rollouts)",
                stats.problems, stats.trees, stats.trajectories, stats.aborted_rollouts
            );
        }
        Command::Pair => {
            let stats = stage_pair(run_dir, &cfg)?;
            println!(
                "pair: {} pairs over {}/{} problems (dropped: {} no-positive, {} no-negative)",
                stats.pairs,
                stats.problems_paired,
                stats.problems_in,
                stats.dropped_no_positive,
                stats.dropped_no_negative
            );
        }
        Command::Critique => {
            let client = build_client(&cfg)?;
            let stats = stage_critique(run_dir, &cfg, &client)?;
            println!(
                "critique: {} validated, {} rejected (failure rate {:.4})",
                stats.validated, stats.rejected, stats.failure_rate
            );
        }
        Command::Synthesize => {
            let client = build_client(&cfg)?;
            let stats = stage_synthesize(run_dir, &cfg, &client)?;
            println!(
                "synthesize: {} candidates, {} verified, {} dropped by filter",
                stats.candidates, stats.verified, stats.dropped_by_filter
            );
        }
        Command::Emit { .. } => {
            let stats = stage_emit(run_dir, &cfg)?;
            println!(
                "emit: {} records from pool of {} (target {}, shortfall {})",
                stats.emitted, stats.pool, stats.target, stats.shortfall
            );
        }
        Command::Eval => {
            let client = build_client(&cfg)?;
            let report = stage_eval(run_dir, &cfg, &client)?;
            println!(
                "eval: n={} acc_orig={:.4} acc_pert={:.4} strict_consistency={:.4}",
                report.n, report.accuracy_orig, report.accuracy_pert, report.strict_consistency
            );
        }
        Command::Stats { csv } => {
            let report = stage_stats(run_dir)?;
            print!("{}", report.to_text());
            if let Some(path) = csv {
                write_atomic(path, report.to_csv().as_bytes())?;
                println!("csv written to {}", path.display());
            }
        }
        Command::InitDemo => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
