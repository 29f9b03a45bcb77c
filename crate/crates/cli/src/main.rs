use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mergelab_cli::commands;
use mergelab_cli::io::Manifest;
use mergelab_cli::plan::{ExperimentPlan, Overrides};

#[derive(Parser)]
#[command(name = "mergelab", version, about = "Noise-controlled training and model-merging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(clap::Args)]
struct Common {
    /// Plan file (TOML).
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Output directory; overrides `out` in the plan.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for grid cells and probes; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Arithmetic width of training and evaluation: 32 or 64.
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
    #[arg(long, value_enum)]
    charts: Option<OnOff>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and log per-epoch metrics.
    Train(Common),
    /// Trunk, branches and merges for one configuration.
    Bifurcate(Common),
    /// The bifurcation protocol over the whole hyperparameter grid.
    Sweep(Common),
    /// Merge saved models and trace the interpolation curve.
    Merge(Common),
    /// Leading Hessian eigenvalues of a saved model.
    Hessian(Common),
    /// Loss on the plane through three saved models.
    Slice(Common),
    /// Summary tables and charts from the CSVs of an output directory.
    Report(Common),
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            workers: self.workers,
            precision: self.precision.as_deref().map(|p| p.parse().expect("validated by clap")),
            charts: self.charts.map(|c| matches!(c, OnOff::On)),
        }
    }
}

fn run(cli: Cli) -> Result<Manifest> {
    let (name, common) = match &cli.command {
        Command::Train(c) => ("train", c),
        Command::Bifurcate(c) => ("bifurcate", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Merge(c) => ("merge", c),
        Command::Hessian(c) => ("hessian", c),
        Command::Slice(c) => ("slice", c),
        Command::Report(c) => ("report", c),
    };
    if let Command::Report(c) = &cli.command {
        let dir = c.out.clone().context("report needs --out <dir> holding the CSVs of a run")?;
        let mut plan = ExperimentPlan::default();
        let source = match &c.plan {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        if c.plan.is_some() {
            plan = ExperimentPlan::parse(&source)?;
        }
        plan.apply(&c.overrides());
        return commands::report(&dir, plan.charts, &source, plan.seed);
    }
    let path = common.plan.as_deref().with_context(|| format!("`{name}` needs --plan <file>"))?;
    let plan = ExperimentPlan::load(path, &common.overrides())?;
    let out = commands::out_dir(&plan, common.out.as_deref())?;
    match cli.command {
        Command::Train(_) => commands::train(&plan, &out),
        Command::Bifurcate(_) => commands::bifurcate(&plan, &out),
        Command::Sweep(_) => commands::sweep(&plan, &out),
        Command::Merge(_) => commands::merge(&plan, &out),
        Command::Hessian(_) => commands::hessian(&plan, &out),
        Command::Slice(_) => commands::slice(&plan, &out),
        Command::Report(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(m) => {
            for d in &m.diverged {
                eprintln!("diverged: {d}");
            }
            for f in &m.failures {
                eprintln!("failed: {}: {}", f.config_id, f.error);
            }
            eprintln!("{}: {:?}, {} artifacts", m.command, m.status, m.artifacts.len());
            ExitCode::from(m.status.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
