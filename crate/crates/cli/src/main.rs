//! Command-line driver: dispatches the harness experiments and the oracle
//! check suite, writing CSV artifacts plus a meta.json per run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use natgrad_core::harness::{
    order_csv, run_checks, run_invariance, run_mlp_benchmark, run_order_study,
    run_small_curvature, runs_csv, CheckReport, ExperimentConfig,
};
use natgrad_core::Error;

#[derive(Parser)]
#[command(name = "natgrad", version, about = "Natural gradient experiment driver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// JSON experiment config
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for CSV and meta.json artifacts
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// Override the config's RNG seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Increase logging detail
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Cmd {
    /// Gamma invariance study across parameterizations
    Invariance,
    /// Convergence-order study against exact references
    OrderStudy,
    /// Toy MLP training benchmark
    Mlp,
    /// Geodesic vs perturbation correction study
    SmallCurvature,
    /// Run the oracle check suite
    Check {
        /// Deliberately break an oracle input to demonstrate sensitivity
        #[arg(long)]
        fault_injection: bool,
    },
}

/// Exit 1 for configuration problems, 2 for runtime numerical failures.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Io(_) | Error::Json(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("missing required --config <FILE>".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("invalid config {}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Config(format!("cannot create out-dir {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn write_meta(dir: &Path, config: &ExperimentConfig) -> Result<(), Failure> {
    let meta = serde_json::json!({
        "experiment": config.experiment,
        "seed": config.seed,
        "build": format!("natgrad {}", env!("CARGO_PKG_VERSION")),
        "config": config,
    });
    let text = serde_json::to_string_pretty(&meta).map_err(Error::from)?;
    write_artifact(dir, "meta.json", &format!("{text}\n"))
}

fn run_experiment(cli: &Cli, csv_name: &str) -> Result<(), Failure> {
    let config = load_config(cli)?;
    let csv = match &cli.cmd {
        Cmd::Invariance => runs_csv(&run_invariance(&config)?),
        Cmd::OrderStudy => order_csv(&run_order_study(&config)?.records),
        Cmd::Mlp => runs_csv(&run_mlp_benchmark(&config)?),
        Cmd::SmallCurvature => runs_csv(&run_small_curvature(&config)?),
        Cmd::Check { .. } => unreachable!("check does not take a config"),
    };
    write_artifact(&cli.out_dir, csv_name, &csv)?;
    write_meta(&cli.out_dir, &config)?;
    if cli.verbose > 0 {
        let rows = csv.lines().count().saturating_sub(1);
        println!(
            "wrote {} ({} rows) and meta.json to {}",
            csv_name,
            rows,
            cli.out_dir.display()
        );
    }
    Ok(())
}

fn run_check(cli: &Cli, fault_injection: bool) -> Result<CheckReport, Failure> {
    let report = run_checks(fault_injection);
    for c in &report.checks {
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {} observed={:.3e} tolerance={:.3e}",
            c.name, c.observed, c.tolerance
        );
    }
    println!("{} checks, {} failures", report.checks.len(), report.failures);
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write_artifact(&cli.out_dir, "check_report.json", &format!("{json}\n"))?;
    Ok(report)
}

fn dispatch(cli: &Cli) -> Result<bool, Failure> {
    match &cli.cmd {
        Cmd::Invariance => run_experiment(cli, "invariance.csv").map(|_| true),
        Cmd::OrderStudy => run_experiment(cli, "order.csv").map(|_| true),
        Cmd::Mlp => run_experiment(cli, "mlp.csv").map(|_| true),
        Cmd::SmallCurvature => run_experiment(cli, "smallcurve.csv").map(|_| true),
        Cmd::Check { fault_injection } => {
            let report = run_check(cli, *fault_injection)?;
            Ok(report.all_pass())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
