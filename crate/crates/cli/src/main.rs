use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use leapflow::pipeline::{self, EvalOptions};
use leapflow::RunConfig;

/// Leap-flow consistency distillation on synthetic scene latents.
#[derive(Parser)]
#[command(name = "leapflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval splits.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overwrite existing dataset files.
        #[arg(long)]
        force: bool,
    },
    /// Train the teacher noise predictor.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Continue from the existing teacher checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Distil the consistency student and train the leap-time policy.
    Distill {
        #[command(flatten)]
        common: Common,
    },
    /// Generate student samples for the eval priors.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Student steps; the first entry is used.
        #[arg(long, value_name = "LIST")]
        steps: Option<String>,
    },
    /// Write the step sweep and, with --ablate, the ablation table.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated step counts, e.g. 1,4,50.
        #[arg(long, value_name = "LIST")]
        steps: Option<String>,
        /// Train and evaluate the ablation rows over several seeds.
        #[arg(long)]
        ablate: bool,
        /// Add the per-arm reward sweep to the policy decision log.
        #[arg(long)]
        oracle: bool,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn steps(list: Option<&str>) -> Result<Option<Vec<usize>>> {
    list.map(|s| pipeline::parse_steps(s).context("parsing --steps"))
        .transpose()
}

fn main() -> Result<()> {
    leapflow::par::configure_from_env();
    let cli = Cli::parse();
    let written = match &cli.command {
        Command::GenData { common, force } => pipeline::gen_data(&load(common)?, *force)?,
        Command::TrainTeacher { common, resume } => {
            let cfg = load(common)?;
            pipeline::train_teacher(&cfg, *resume)?;
            let p = pipeline::RunPaths::new(&cfg.output_dir);
            vec![p.teacher(), p.teacher_log()]
        }
        Command::Distill { common } => {
            let cfg = load(common)?;
            pipeline::distill(&cfg)?;
            let p = pipeline::RunPaths::new(&cfg.output_dir);
            vec![p.student(), p.policy(), p.distill_log(), p.policy_log()]
        }
        Command::Sample { common, steps: s } => {
            let n = steps(s.as_deref())?.and_then(|v| v.first().copied()).unwrap_or(1);
            vec![pipeline::sample(&load(common)?, n)?]
        }
        Command::Eval {
            common,
            steps: s,
            ablate,
            oracle,
        } => {
            let opts = EvalOptions {
                steps: steps(s.as_deref())?,
                ablate: *ablate,
                oracle: *oracle,
            };
            pipeline::evaluate(&load(common)?, &opts)?
        }
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
