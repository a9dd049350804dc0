use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcvar_core::experiment::{run_experiment, solve_window, ExperimentConfig, RunOverrides};
use mcvar_core::scenarios::write_prices_long;
use mcvar_core::synthetic::{generate, SyntheticSpec};
use mcvar_core::{Error, StrategyKind};

/// Mixed-CVaR portfolio backtests with nominal and kernel-robust models.
///
/// Log verbosity is read from MCVAR_LOG (e.g. `MCVAR_LOG=info`).
#[derive(Parser)]
#[command(name = "mcvar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration and its data without solving anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the rolling-window backtest and write reports.
    Backtest {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides run.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for window solves; 0 uses all cores.
        #[arg(long)]
        threads: Option<usize>,
        /// Restrict to these strategies (repeatable).
        #[arg(long = "strategy", value_parser = parse_strategy)]
        strategies: Vec<StrategyKind>,
    },
    /// Solve one in-sample window and print the portfolio.
    SolveWindow {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        window: usize,
        #[arg(long, value_parser = parse_strategy, default_value = "nominal")]
        strategy: StrategyKind,
    },
    /// Write the seeded synthetic price panel in long format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        weeks: Option<usize>,
    },
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    StrategyKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown strategy {s:?}; expected one of {}", names.join(", "))
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::WindowFailure { .. }
        | Error::CorruptSolution(_)
        | Error::InvalidProgram(_)
        | Error::NotFactorizable { .. }
        | Error::TooLarge { .. } => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let data = cfg.load_dataset()?;
            let names: Vec<&str> = cfg.strategies.iter().map(|k| k.name()).collect();
            println!(
                "{}: ok ({} assets, {} periods, {} windows; strategies {})",
                config.display(),
                data.scen.n_assets(),
                data.scen.periods(),
                data.plan.len(),
                names.join(", ")
            );
        }
        Command::Backtest {
            config,
            out,
            threads,
            strategies,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let overrides = RunOverrides {
                output_dir: out,
                threads,
                strategies: (!strategies.is_empty()).then_some(strategies),
            };
            let report = run_experiment(&cfg, &overrides)?;
            for f in &report.files {
                println!("wrote {}", f.display());
            }
        }
        Command::SolveWindow {
            config,
            window,
            strategy,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            print!("{}", solve_window(&cfg, strategy, window)?);
        }
        Command::Synth { out, seed, weeks } => {
            let mut spec = SyntheticSpec::default();
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(w) = weeks {
                spec.weeks = w;
            }
            let text = write_prices_long(&generate(&spec)?);
            std::fs::write(&out, text).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MCVAR_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::WindowFailure { partial, .. } = &e {
                eprintln!(
                    "{} windows completed before the failure",
                    partial.per_window.len()
                );
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
