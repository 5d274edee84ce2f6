use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use stochflow::sampler::Solver;
use stochflow_cli::commands::{self, PointState};
use stochflow_cli::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "stochflow", version, about = "Train, sample and evaluate distribution-to-distribution flow models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; `manifest.txt` is written here.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// euler, heun or sde.
    #[arg(long)]
    solver: Option<Solver>,
    #[arg(long)]
    steps: Option<usize>,
    /// Inference-time source jitter.
    #[arg(long)]
    eps: Option<f64>,
    /// Use the EMA weights.
    #[arg(long)]
    ema: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_path(&self.config)?;
        Overrides { seed: self.seed, solver: self.solver, steps: self.steps, eps: self.eps, ema: self.ema }
            .apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus loss history.
    Train(Common),
    /// Score a checkpoint on the test split and append to results.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the checkpoint in --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate samples, optionally with per-sample trajectories.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long)]
        trajectories: bool,
    },
    /// Train and evaluate every point of the [sweep] grid.
    Sweep(Common),
    /// Compare interpolant noise schedules over the [ablate] grid.
    AblateGamma(Common),
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(c) => {
            let m = commands::cmd_train(&c.load()?, &c.out)?;
            println!("run {} trained into {}", m.run_id, c.out.display());
        }
        Command::Eval { common, checkpoint } => {
            let row = commands::cmd_eval(&common.load()?, &common.out, checkpoint.as_deref())?;
            if let Some(r) = row.report {
                println!(
                    "mean_cosine={:.4} sinkhorn={:.6} mse={:.6} match_fraction={:.4}",
                    r.mean_cosine, r.sinkhorn, r.mse, r.match_fraction
                );
            }
        }
        Command::Sample { common, checkpoint, n, trajectories } => {
            let s = commands::cmd_sample(&common.load()?, &common.out, checkpoint.as_deref(), n, trajectories)?;
            println!("wrote {} and {} trajectories", s.samples.display(), s.trajectories.len());
        }
        Command::Sweep(c) => {
            let out = commands::cmd_sweep(&c.load()?, &c.out, commands::default_jobs())?;
            println!(
                "{} points: {} run, {} reused, {} failed",
                out.outcomes.len(),
                out.count(PointState::Executed),
                out.count(PointState::Skipped),
                out.count(PointState::Failed)
            );
        }
        Command::AblateGamma(c) => {
            let cells = commands::cmd_ablate_gamma(&c.load()?, &c.out, commands::default_jobs())?;
            for cell in cells {
                let (sk, sd) = cell.stats.metrics[1];
                println!("{} a={}: sinkhorn {sk:.6} ± {sd:.6}", cell.schedule.kind(), cell.schedule.scale());
            }
        }
    }
    Ok(())
}
