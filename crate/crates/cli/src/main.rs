//! `robustnet <train|attack|certify|report|rank> [--config run.toml] [flags]`

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "robustnet", version, about = "Train, attack and certify robust ReLU classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus its objective history.
    Train(Flags),
    /// Run an attack over a dataset split and write per-sample records.
    Attack(Flags),
    /// Certify samples against L1 perturbations and write per-sample records.
    Certify(Flags),
    /// Evaluate several models into one accuracy table.
    Report(Flags),
    /// Average per-dataset ranks of methods across report tables.
    Rank(Flags),
}

#[derive(Args, Debug, Default)]
pub struct Flags {
    /// TOML run configuration with one section per command.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// csv or json.
    #[arg(long)]
    pub format: Option<String>,
    /// Radius or comma-separated radii.
    #[arg(long)]
    pub rho: Option<String>,
    /// Attack kind (fgsm, fgm, pgd) or, for `rank`, an attack label such as pgd_l2.
    #[arg(long)]
    pub attack: Option<String>,
    /// Norm order: 1, 2 or inf.
    #[arg(long)]
    pub p: Option<String>,
    /// Dataset file (images file for IDX), or `moons`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Model path; for `report`, repeated `method=path`.
    #[arg(long)]
    pub model: Vec<String>,
    /// Training objective: nominal, baseline, arub or rub.
    #[arg(long)]
    pub objective: Option<String>,
    /// Report tables to rank (repeatable).
    #[arg(long)]
    pub table: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(f) => commands::train(f),
        Command::Attack(f) => commands::attack(f),
        Command::Certify(f) => commands::certify(f),
        Command::Report(f) => commands::report(f),
        Command::Rank(f) => commands::rank(f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
