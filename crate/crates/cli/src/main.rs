//! `qbranch`: run one scenario file and write its artifacts.

mod experiments;
mod output;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::experiments::Overrides;
use crate::output::{sha256_hex, RunManifest};
use crate::scenario::EXPERIMENTS;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "qbranch", version, about = "Branching-tree and decoherence experiments from JSON scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file; exit 0 when every check passes, 1 otherwise.
    Run(RunArgs),
    /// List the experiment kinds a scenario can name.
    List,
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Output directory for artifacts and the manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Validate the scenario without computing anything.
    #[arg(long)]
    dry_run: bool,
    /// Override a tolerance, e.g. `eps_x=1e-3`.
    #[arg(long, value_parser = parse_tolerance)]
    tolerance: Option<f64>,
    /// Cap on live tree paths.
    #[arg(long)]
    max_paths: Option<usize>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_tolerance(s: &str) -> Result<f64, String> {
    let (key, value) = s.split_once('=').ok_or("expected KEY=VALUE")?;
    if key.trim() != "eps_x" {
        return Err(format!("unknown tolerance `{key}` (only eps_x)"));
    }
    match value.trim().parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("eps_x must be a positive number, got `{value}`")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            for (name, help) in EXPERIMENTS {
                println!("{name:<11} {help}");
            }
            ExitCode::SUCCESS
        }
        Command::Run(args) => run(args),
    }
}

fn run(args: RunArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.scenario) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", args.scenario.display());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let mut scenario = match scenario::parse(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", args.scenario.display());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(eps) = args.tolerance {
        scenario.eps_x = eps;
    }
    if args.max_paths == Some(0) {
        eprintln!("error: --max-paths must be positive");
        return ExitCode::from(EXIT_USAGE);
    }
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads {n}: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    if args.dry_run {
        return match experiments::dry_run(&scenario) {
            Ok(msg) => {
                println!("{msg}");
                println!("scenario valid (dry run, nothing written)");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_USAGE)
            }
        };
    }

    let started = Instant::now();
    let outcome = match experiments::run(&scenario, Overrides { max_paths: args.max_paths }) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {} failed: {e:#}", scenario.experiment.name());
            return ExitCode::from(EXIT_CHECK_FAILED);
        }
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        experiment: scenario.experiment.name(),
        scenario_sha256: sha256_hex(text.as_bytes()),
        seed: scenario.seed,
        eps_x: scenario.eps_x,
        wall_time_s: started.elapsed().as_secs_f64(),
        pass: outcome.pass,
        summary: outcome.summary.clone(),
        files: Vec::new(),
    };
    if let Err(e) = output::write_all(&args.out, &outcome.artifacts, manifest) {
        eprintln!("error: writing artifacts: {e:#}");
        return ExitCode::from(EXIT_CHECK_FAILED);
    }
    for line in &outcome.summary {
        println!("{line}");
    }
    println!("wrote {} file(s) and manifest.json to {}", outcome.artifacts.len(), args.out.display());
    if outcome.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    }
}
