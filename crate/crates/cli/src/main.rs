//! Command-line front end for the volume-discount pricing engine.

mod campaign;
mod files;
mod pipeline;

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Parser, Subcommand};
use pvdb_core::config::EngineConfig;

#[derive(Parser)]
#[command(name = "pvdb", version, about = "Two-phase volume-discount pricing engine")]
struct Cli {
    /// Engine configuration file (TOML)
    #[arg(long, global = true, default_value = "pvdb.toml")]
    config: PathBuf,
    /// Override the master seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Price products for a week: demand fit, Thompson draw, grid
    /// optimization, then the volume-discount schedule
    Price {
        /// Product to price; default prices every product in the CSV
        #[arg(long)]
        product: Option<String>,
        /// Week index to price (counted from each product's first
        /// transaction); default is the week after the last observed one
        #[arg(long)]
        week: Option<u32>,
    },
    /// Compute the discount schedule alone, for a given target price
    Discounts {
        #[arg(long)]
        product: String,
        /// Target single-unit price (the phase-1 optimum when known)
        #[arg(long)]
        price: f64,
        #[arg(long)]
        week: Option<u32>,
    },
    /// Run the configured synthetic market under the pricing policy
    Simulate,
    /// Simulated A/B campaign plus its statistical evaluation
    Abtest,
    /// Permutation-test report from two weekly-margin CSV files
    Report {
        /// Margin CSV of the treatment set
        #[arg(long)]
        a: PathBuf,
        /// Margin CSV of the control set
        #[arg(long)]
        b: PathBuf,
        /// Week index splitting the reference and test windows
        #[arg(long)]
        split: Option<u32>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = EngineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.paths.output_dir = out;
    }
    let base = cli
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    match cli.command {
        Command::Price { product, week } => {
            pipeline::cmd_price(&config, &base, product.as_deref(), week)
        }
        Command::Discounts { product, price, week } => {
            pipeline::cmd_discounts(&config, &base, &product, price, week)
        }
        Command::Simulate => campaign::cmd_simulate(&config, &base),
        Command::Abtest => campaign::cmd_abtest(&config, &base),
        Command::Report { a, b, split } => campaign::cmd_report(&config, &base, &a, &b, split),
    }
}
