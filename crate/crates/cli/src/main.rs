//! `cimflow`: train, map, simulate and performance-model tiny networks on an
//! analog compute-in-memory accelerator.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ToolConfig;

#[derive(Parser)]
#[command(name = "cimflow", version, about = "Analog CiM toolchain: train / map / simulate / perf / sweep / calibrate / report")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config value.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel jobs for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage hardware-aware training; writes a checkpoint directory.
    Train,
    /// Place the network on the crossbar; writes plan.json and an occupancy map.
    Map {
        /// ADC mux scheme override (M1/M2/M4).
        #[arg(long)]
        scheme: Option<String>,
        /// Tile geometry override, e.g. 1024x512 or 64x64.
        #[arg(long)]
        tile: Option<String>,
    },
    /// Run the repeated-evaluation accuracy protocol on the noise simulator.
    Simulate,
    /// Analytic latency/energy/area report for one configuration.
    Perf {
        /// Activation precision (4, 6 or 8).
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Design-space sweep over schemes, precisions and tile geometries.
    Sweep,
    /// Fit energy constants to a full-utilization efficiency table.
    Calibrate {
        /// CSV with header scheme,bits,tops_per_w.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Pretty-print a JSON summary produced by the other commands.
    Report {
        /// Summary file to print.
        #[arg(long, required_unless_present = "golden")]
        input: Option<PathBuf>,
        /// Print the built-in peak-throughput self-check instead.
        #[arg(long)]
        golden: bool,
    },
}

fn load_config(cli: &Cli) -> cimflow_core::Result<ToolConfig> {
    match &cli.config {
        Some(path) => ToolConfig::load(path),
        None => Ok(ToolConfig::default()),
    }
}

fn run(cli: &Cli) -> cimflow_core::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train => commands::cmd_train(&cfg, cli.seed, &cli.out),
        Command::Map { scheme, tile } => commands::cmd_map(&cfg, &cli.out, scheme.clone(), tile.clone()),
        Command::Simulate => commands::cmd_simulate(&cfg, cli.seed, &cli.out),
        Command::Perf { bits, scheme } => commands::cmd_perf(&cfg, &cli.out, *bits, scheme.clone()),
        Command::Sweep => commands::cmd_sweep(&cfg, &cli.out, cli.jobs),
        Command::Calibrate { table } => commands::cmd_calibrate(&cfg, &cli.out, table.clone()),
        Command::Report { input, golden } => {
            if *golden {
                print!("{}", commands::golden_summary()?);
                Ok(())
            } else {
                commands::cmd_report(input.as_ref().unwrap())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
