//! `storage-impact`: storage dispatch and intraday price experiments.

mod config;
mod error;
mod output;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{Kind, Overrides, RunConfig};
use error::CliError;
use output::{sha256_hex, OutputDir, RunLog};

#[derive(Parser)]
#[command(name = "storage-impact", version, about = "Storage dispatch and equilibrium intraday prices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimal dispatch of one agent against an exogenous price.
    Control(Common),
    /// Deterministic equilibrium price in closed form.
    DetEq(Common),
    /// Stochastic equilibrium by Picard iteration on the FBSDE.
    StoEq(Common),
    /// Hourly profile and OU fit of a `timestamp,value` CSV.
    Calibrate(Common),
    /// Revenue of a reference agent as storage is added.
    Cannibalize(Common),
    /// Long-term scenarios.
    Scenario(Common),
    /// Check a config without running anything.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; calibrated defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default `out`, or `output_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Worker threads.
    #[arg(long, env = "STORAGE_IMPACT_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

fn execute(kind: Kind, args: Common) -> Result<(), CliError> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(format!("thread pool: {e}")))?;
    }
    let cfg = load(args.config.as_deref())?;
    let overrides = Overrides { seed: args.seed, paths: args.paths, steps: args.steps };
    let cfg = cfg.resolve(kind, &overrides).map_err(CliError::Schema)?;
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(CliError::Schema(violations.join("; ")));
    }
    let config_dir = args.config.as_deref().and_then(Path::parent).unwrap_or(Path::new(".")).to_path_buf();
    let dir = args.out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut out = OutputDir::create(&dir)?;
    RunLog::install(&out.path().join("run.log"))?;

    let resolved = serde_json::to_value(&cfg).map_err(|e| CliError::Other(e.to_string()))?;
    let hash = sha256_hex(resolved.to_string().as_bytes());
    log::info!("{} {} config {hash}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    let start = Instant::now();
    let outcome = run::run(kind, &cfg, &config_dir, &mut out);
    log::info!("finished in {:.2} s", start.elapsed().as_secs_f64());
    let (status, results, err) = match outcome {
        Ok(o) => match o.not_converged {
            None => ("ok", o.results, None),
            Some(m) => ("not_converged", o.results, Some(CliError::NotConverged(m))),
        },
        Err(e) => {
            log::error!("{}", e.message());
            ("error", json!({ "error": e.category(), "message": e.message() }), Some(e))
        }
    };
    out.summary(json!({
        "tool": "storage-impact",
        "version": env!("CARGO_PKG_VERSION"),
        "schema_version": config::SCHEMA_VERSION,
        "experiment": kind.name(),
        "status": status,
        "seed": cfg.seed,
        "config_hash": hash,
        "config": resolved,
        "results": results,
    }))?;
    log::logger().flush();
    err.map_or(Ok(()), Err)
}

fn validate(args: ValidateArgs) -> Result<(), CliError> {
    let report = match load(Some(&args.config)) {
        Err(e) => json!({ "valid": false, "violations": [e.message()], "warnings": [] }),
        Ok(cfg) => {
            let cfg = match cfg.kind {
                Some(k) => cfg.resolve(k, &Overrides::default()),
                None => Ok(cfg),
            };
            match cfg {
                Err(m) => json!({ "valid": false, "violations": [m], "warnings": [] }),
                Ok(cfg) => {
                    let v = cfg.violations();
                    json!({ "valid": v.is_empty(), "violations": v, "warnings": cfg.warnings() })
                }
            }
        }
    };
    println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Control(a) => execute(Kind::Control, a),
        Command::DetEq(a) => execute(Kind::DetEq, a),
        Command::StoEq(a) => execute(Kind::StoEq, a),
        Command::Calibrate(a) => execute(Kind::Calibrate, a),
        Command::Cannibalize(a) => execute(Kind::Cannibalize, a),
        Command::Scenario(a) => execute(Kind::Scenario, a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.category(), "message": e.message() }));
            e.exit_code()
        }
    }
}
