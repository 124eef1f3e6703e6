use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdiff::config::ExperimentConfig;
use gdiff::experiments::{self, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "gdiff", version, about = "Diffusions under volatility uncertainty: simulation, condition checks and PDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the system over the scenario ensemble and export paths.
    Simulate(Common),
    /// Evaluate the configured conditions (exit 0 satisfied, 1 violated, 2 config).
    Check(Common),
    /// Evaluate the generator at x0 and its small-time limit table.
    Generator(Common),
    /// Solve the nonlinear PDE for the datum.
    SolvePde(Common),
    /// Comparison hypotheses plus a pathwise check on coupled scenarios.
    VerifyComparison(Common),
    /// Reproduce the counterexample to the weakened drift condition.
    CounterexampleRemark(Common),
    /// Monotonicity conditions plus monotone-scheme solves.
    VerifyMonotone(Common),
    /// Order conditions plus dominance of the two PDE solutions.
    VerifyOrder(Common),
    /// PDE value against the Monte Carlo supremum over controls.
    FeynmanCrosscheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config, or a JSON report to re-run. Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Seed; overrides the config, which overrides GDIFF_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set scenario.n_paths=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<String>,
    /// CSV output path.
    #[arg(long)]
    csv: Option<String>,
    /// Binary grid dump path (solve-pde).
    #[arg(long)]
    dump: Option<String>,
}

impl Command {
    fn split(&self) -> (&'static str, &Common) {
        match self {
            Command::Simulate(c) => ("simulate", c),
            Command::Check(c) => ("check", c),
            Command::Generator(c) => ("generator", c),
            Command::SolvePde(c) => ("solve-pde", c),
            Command::VerifyComparison(c) => ("verify-comparison", c),
            Command::CounterexampleRemark(c) => ("counterexample-remark", c),
            Command::VerifyMonotone(c) => ("verify-monotone", c),
            Command::VerifyOrder(c) => ("verify-order", c),
            Command::FeynmanCrosscheck(c) => ("feynman-crosscheck", c),
        }
    }
}

fn load(common: &Common) -> gdiff::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p, &common.overrides, common.seed)?,
        None => {
            let mut cfg = ExperimentConfig::from_toml_with_overrides("", &common.overrides)?;
            cfg.resolve_seed(common.seed)?;
            cfg
        }
    };
    if common.csv.is_some() {
        cfg.output.csv = common.csv.clone();
    }
    if common.dump.is_some() {
        cfg.output.dump = common.dump.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (name, common) = cli.command.split();
    let cfg = match load(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("gdiff {name}: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let report = experiments::run(name, &cfg);
    let json = report.to_json();
    // the destination flag stays out of the embedded config so reports of
    // identical runs compare equal
    match common.report.as_ref().or(cfg.output.report.as_ref()) {
        Some(p) => {
            if let Err(e) = std::fs::write(p, json + "\n") {
                eprintln!("gdiff {name}: cannot write report {p}: {e}");
                return ExitCode::from(EXIT_CONFIG as u8);
            }
        }
        None => println!("{json}"),
    }
    eprintln!("gdiff {name}: {} (exit {}): {}", report.status, report.exit_code, report.message);
    ExitCode::from(report.exit_code as u8)
}
