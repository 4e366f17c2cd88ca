#![allow(clippy::neg_cmp_op_on_partial_ord)]
use anyhow::{Context, Result};
use bilevel_kfac_cli::{run, ExperimentConfig, Kind};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "bilevel-kfac",
    version,
    about = "Bilevel hypergradients with Kronecker-factored curvature"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Inverse-curvature approximation study on synthetic linear regression.
    Diagnostic(Common),
    /// Training-example reweighting under label noise.
    Hyperclean(Common),
    /// Quadratic toy problem with a closed-form hypergradient.
    Toy(Common),
    /// Batch-size and solver sweep over the reweighting task.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (kind, common) = match cli.verb {
        Verb::Diagnostic(c) => (Kind::Diagnostic, c),
        Verb::Hyperclean(c) => (Kind::Hyperclean, c),
        Verb::Toy(c) => (Kind::ToyQuadratic, c),
        Verb::Sweep(c) => (Kind::BatchSweep, c),
    };
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_path(p, Some(kind))?,
        None => ExperimentConfig::defaults(kind),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(d) = common.out_dir {
        cfg.out_dir = d;
    }
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let outcome = run(&cfg, common.quiet)?;
    if let Some(e) = outcome.error {
        anyhow::bail!("run stopped early (partial results in {}): {e}", outcome.out_dir.display());
    }
    Ok(())
}
