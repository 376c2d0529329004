mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splitinfer_core::attacks::Strategy;

use crate::commands::QueryArgs;
use crate::config::{ExperimentConfig, RawConfig};
use crate::error::CliError;

/// Split inference for MLPs: train, split, serve, query and attack.
#[derive(Debug, Parser)]
#[command(name = "splitinfer", version)]
struct Cli {
    /// More logging (-v info, -vv debug). RUST_LOG also works.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct ConfigArgs {
    /// Built-in preset applied before the config file (see `splitinfer config --list-presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve_raw(&self) -> Result<RawConfig, CliError> {
        let mut raw = RawConfig::default();
        if let Some(p) = &self.preset {
            raw.apply_preset(p)?;
        }
        if let Some(path) = &self.config {
            raw.apply_file(path)?;
        }
        for kv in &self.overrides {
            raw.apply_override(kv)?;
        }
        Ok(raw)
    }

    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::from_raw(&self.resolve_raw()?)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes the model file and a loss-curve CSV.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model path (default: <output.dir>/model.bin).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test accuracy of a model.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Accuracy when first-layer outputs are dropped, as CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// CSV path (default: <output.dir>/sweep.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct test inputs from what the server receives.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Not needed for `bruteforce`, which runs on a toy layer.
        #[arg(long)]
        model: Option<PathBuf>,
        /// exact, pinv, transpose, transpose2, bruteforce or repeated.
        #[arg(long, default_value = "transpose")]
        strategy: Strategy,
        /// Output directory (default: <output.dir>/attack-<strategy>).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Cut a model into front.bin and rear.bin at split.cut.
    Split {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Output directory (default: output.dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Serve a rear half over TCP until killed.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        rear: PathBuf,
        /// Listen address (default: wire.addr); port 0 picks a free port.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Classify test samples through a remote rear half.
    Query {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        front: PathBuf,
        /// Server address (default: wire.addr).
        #[arg(long)]
        addr: Option<String>,
        /// First test sample to send.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Number of consecutive samples.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Print the client-side first-layer latency.
        #[arg(long)]
        bench: bool,
    },
    /// Markdown summary of the sweep and attack outputs in a directory.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory to scan (default: output.dir).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Describe the wire format with example frames.
    ProtocolDump,
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        list_presets: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { cfg, out } => commands::train(&cfg.resolve()?, out),
        Command::Evaluate { cfg, model } => commands::evaluate_cmd(&cfg.resolve()?, &model),
        Command::Sweep { cfg, model, out } => commands::sweep(&cfg.resolve()?, &model, out),
        Command::Attack {
            cfg,
            model,
            strategy,
            out_dir,
        } => {
            let resolved = cfg.resolve()?;
            match (strategy, model) {
                (Strategy::BruteForce, m) => {
                    commands::attack(&resolved, &m.unwrap_or_default(), strategy, out_dir)
                }
                (_, Some(m)) => commands::attack(&resolved, &m, strategy, out_dir),
                (_, None) => Err(CliError::Usage(format!("--model is required for strategy {strategy}"))),
            }
        }
        Command::Split { cfg, model, out_dir } => commands::split(&cfg.resolve()?, &model, out_dir),
        Command::Serve { cfg, rear, addr } => commands::serve_cmd(&cfg.resolve()?, &rear, addr),
        Command::Query {
            cfg,
            front,
            addr,
            index,
            count,
            bench,
        } => commands::query(
            &cfg.resolve()?,
            &QueryArgs {
                front,
                addr,
                index,
                count,
                bench,
            },
        ),
        Command::Report { cfg, dir } => {
            let dir = match dir {
                Some(d) => d,
                None => cfg.resolve()?.output_dir,
            };
            commands::report(&dir)
        }
        Command::ProtocolDump => {
            print!("{}", commands::protocol_dump()?);
            Ok(())
        }
        Command::Config { cfg, list_presets } => {
            if list_presets {
                for (name, text) in config::PRESETS {
                    let first = text.lines().next().unwrap_or("").trim_start_matches('#').trim();
                    println!("{name:<20} {first}");
                }
                return Ok(());
            }
            let raw = cfg.resolve_raw()?;
            ExperimentConfig::from_raw(&raw)?;
            print!("{}", raw.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
