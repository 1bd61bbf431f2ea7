//! `cpd`: generate data, train, evaluate and plot cross-modal pair discrimination runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpd_core::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cpd", version, about = "Cross-modal pair discrimination at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable and applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (falls back to $CPD_OUT_DIR, then the current directory).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic paired dataset, its splits and class prototypes.
    GenData,
    /// Train encoders through the curriculum.
    Train,
    /// kNN, linear probe and retrieval on frozen features.
    Eval,
    /// Zero-shot classification against class prototypes.
    Zeroshot,
    /// SVG charts from one or more metrics CSVs.
    Plot,
}

/// 0 ok, 2 config error, 3 I/O error, 4 numeric fault.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::Shape(_) | Error::ContractViolation(_) => 2,
        Error::Io(_) | Error::Parse { .. } | Error::Schema { .. } | Error::Format(_) => 3,
        Error::NumericFault(_) | Error::DegenerateVector { .. } => 4,
    }
}

fn resolve(cli: &Cli) -> cpd_core::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, out_dir: &PathBuf) -> cpd_core::Result<()> {
    let cfg = resolve(cli)?;
    std::fs::create_dir_all(out_dir)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, out_dir),
        Command::Train => commands::train(&cfg, out_dir),
        Command::Eval => commands::eval(&cfg, out_dir),
        Command::Zeroshot => commands::zeroshot(&cfg, out_dir),
        Command::Plot => commands::plot(&cfg, out_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("CPD_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    match run(&cli, &out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            log::error!("{e}");
            commands::log_error(&out_dir, &format!("exit {code}: {e}"));
            ExitCode::from(code)
        }
    }
}
