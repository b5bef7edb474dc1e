use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qoesim::{emit_reports, run_scenario, sweep, Mode, ReportError, RunReport, ScenarioConfig, ScenarioError};

#[derive(Parser)]
#[command(name = "qoesim", version, about = "QoE-aware video delivery simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured mode over every capacity in the config.
    Run(Common),
    /// Run both modes over every capacity in the config.
    Sweep(Common),
    /// Check a config file and print the resolved settings.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV and plot data.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the mode from the config file.
    #[arg(long)]
    mode: Option<Mode>,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_INVARIANT: u8 = 2;
const EXIT_IO: u8 = 3;

fn load(args: &Common) -> Result<ScenarioConfig, ScenarioError> {
    let mut cfg = match &args.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(reports: &[RunReport]) {
    println!(
        "{:<20} {:>9} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "run", "capacity", "admitted", "mean_mos", "drop%", "util%", "events"
    );
    for r in reports {
        let m = &r.metrics;
        println!(
            "{:<20} {:>9} {:>8} {:>8} {:>8.2} {:>8.2} {:>9}",
            r.run_id,
            format!("{:.0}k", r.capacity / 1000.0),
            m.admitted,
            m.mean_mos().map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into()),
            m.drop_ratio * 100.0,
            m.utilization * 100.0,
            r.diagnostics.events,
        );
    }
}

fn write(reports: &[RunReport], out: &Path) -> Result<(), ReportError> {
    for path in emit_reports(reports, out)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn scenario_exit(e: &ScenarioError) -> u8 {
    match e {
        ScenarioError::Config(_) => EXIT_CONFIG,
        _ => EXIT_INVARIANT,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, both) = match &cli.command {
        Command::Run(a) => (a, false),
        Command::Sweep(a) => (a, true),
        Command::Validate(a) => {
            return match load(a) {
                Ok(cfg) => {
                    print!("{}", cfg.to_toml_string());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_CONFIG)
                }
            };
        }
    };

    let cfg = match load(args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let reports = match if both { sweep(&cfg) } else { run_scenario(&cfg) } {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(scenario_exit(&e));
        }
    };
    print_summary(&reports);
    if let Err(e) = write(&reports, &args.out) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_IO);
    }
    ExitCode::SUCCESS
}
