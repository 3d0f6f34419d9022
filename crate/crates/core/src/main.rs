use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dqid_core::cli::{self, CliError, RunConfig};

/// dq admittance identification of a grid-forming inverter testbed
#[derive(Parser)]
#[command(name = "dqid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run experiments and identification, then write artifacts
    Run {
        /// TOML configuration; defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// era, sem, sfra (comma separated) or all
        #[arg(long, default_value = "all")]
        methods: String,
        /// Output directory; overrides output.directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cross-method comparison band LO:HI in Hz
        #[arg(long, default_value = "1:100")]
        band: String,
    },
    /// Compare two Bode CSV files
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Band LO:HI in Hz
        #[arg(long, default_value = "1:100")]
        band: String,
        /// Report CSV path; a .txt summary is written next to it
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        /// Maximum deviation MAG_DB:PHASE_DEG
        #[arg(long, default_value = "1:5")]
        thresholds: String,
    },
    /// Check all methods against the closed-form RL admittance
    Oracle {
        #[arg(long, default_value = "dqid-oracle")]
        out: PathBuf,
        /// Tolerances REL_MAG:PHASE_DEG
        #[arg(long, default_value = "0.02:2")]
        thresholds: String,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            config,
            methods,
            out,
            band,
        } => {
            let methods = cli::parse_methods(&methods)?;
            let band = cli::parse_band(&band)?;
            let cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
            let outcome = cli::cmd_run(&cfg, &methods, &out, band)?;
            for (a, b, r) in &outcome.reports {
                print!("{a} vs {b}, {}", r.summary());
            }
            println!(
                "{} step experiments, {} sweep simulations; {} files in {}",
                outcome.step_experiments,
                outcome.sweep_simulations,
                outcome.artifacts.files.len() + 1,
                out.display()
            );
            Ok(())
        }
        Command::Compare {
            a,
            b,
            band,
            out,
            thresholds,
        } => {
            let band = cli::parse_band(&band)?;
            let thresholds = cli::parse_thresholds(&thresholds)?;
            let o = cli::cmd_compare(&a, &b, band, &out, thresholds)?;
            print!(
                "{}",
                std::fs::read_to_string(&o.summary_path).unwrap_or_default()
            );
            if o.within {
                Ok(())
            } else {
                Err(CliError::Failed(format!(
                    "deviation exceeds {} dB / {} deg",
                    thresholds.0, thresholds.1
                )))
            }
        }
        Command::Oracle {
            out,
            thresholds,
            inject_sign_flip,
        } => {
            let thresholds = cli::parse_thresholds(&thresholds)?;
            let o = cli::cmd_oracle(&out, thresholds, inject_sign_flip)?;
            print!("{}", o.table());
            if o.passed() {
                println!("oracle passed");
                Ok(())
            } else {
                Err(CliError::Failed(cli::oracle_failure_message(&o)))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
