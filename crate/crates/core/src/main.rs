use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use proxitr::cli::{self, LearnerChoice, Overrides, RunConfig};
use proxitr::simgen::ScenarioName;
use proxitr::Result;

#[derive(Parser)]
#[command(name = "proxitr", version, about = "Proximal learning of individualized treatment regimes")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_parser = parse_scenario)]
    scenario: Option<ScenarioName>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true, value_parser = parse_learner)]
    learner: Option<LearnerChoice>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Draw a synthetic data set with ground truth.
    Simulate,
    /// Fit a policy learner on a data file.
    Fit,
    /// Score a saved policy.
    Evaluate,
    /// Replicated simulate, fit and oracle-evaluate runs.
    Benchmark,
}

fn parse_scenario(s: &str) -> std::result::Result<ScenarioName, String> {
    s.parse().map_err(|e: proxitr::Error| e.to_string())
}

fn parse_learner(s: &str) -> std::result::Result<LearnerChoice, String> {
    s.parse().map_err(|e: proxitr::Error| e.to_string())
}

/// Writes a line to stdout, ignoring a closed pipe.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn run(args: &Args) -> Result<i32> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        out: args.out.clone(),
        seed: args.seed,
        workers: args.workers,
        scenario: args.scenario,
        n: args.n,
        learner: args.learner,
    });
    cfg.validate()?;
    match args.command {
        Command::Simulate => {
            let m = cli::cmd_simulate(&cfg)?;
            emit(&serde_json::to_string(&m)?);
        }
        Command::Fit | Command::Evaluate => {
            let rec = if matches!(args.command, Command::Fit) { cli::cmd_fit(&cfg)? } else { cli::cmd_evaluate(&cfg)? };
            emit(&serde_json::to_string(&rec)?);
        }
        Command::Benchmark => {
            let b = cli::cmd_benchmark(&cfg)?;
            for row in &b.summary {
                emit(&format!("{} n={} median={:.4} q1={:.4} q3={:.4}", row.learner, row.count, row.median, row.q1, row.q3));
            }
            if !b.coverage.is_empty() {
                let hits = b.coverage.iter().filter(|c| c.covered).count();
                emit(&format!("coverage {hits}/{}", b.coverage.len()));
            }
            if b.failures > 0 {
                eprintln!("{} replicate runs failed", b.failures);
            }
            return Ok(b.exit_code);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROXITR_LOG", "warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
