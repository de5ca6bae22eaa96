use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use skipdepth::bench::{self, Axis, PipelineConfig};
use skipdepth::runtime::Mode;

#[derive(Parser)]
#[command(name = "skipdepth", version, about = "Layer-skipping policy inference pipeline and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration file (JSON); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations.
    GenData(Common),
    /// Behavior-clone the base policy.
    TrainBase(Common),
    /// Layer similarity profile and static layer selection.
    Profile(Common),
    /// Two-stage distillation of adapters and controllers.
    Distill(Common),
    /// Closed-loop evaluation of the requested modes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// full, dysl, controllers-only or random-skip; repeatable.
        #[arg(long = "mode")]
        modes: Vec<Mode>,
    },
    /// Sweep one parameter and evaluate each value.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values; the standard grid when absent.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Completion rate under weight noise injected in selected steps.
    NoiseStudy(Common),
    /// Markdown summary of all artifacts.
    Report(Common),
    /// Show the configuration.
    Config {
        #[command(flatten)]
        common: Common,
        /// Print the built-in defaults.
        #[arg(long)]
        dump_defaults: bool,
    },
}

fn load(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(c) => {
            let s = bench::gen_data(&load(&c)?, &c.out)?;
            info!(
                "{} train steps, {} val steps, expert success {:.3}, fine fraction {:.3}",
                s.train_steps, s.val_steps, s.expert_success_rate, s.fine_fraction
            );
        }
        Command::TrainBase(c) => {
            let s = bench::train_base(&load(&c)?, &c.out)?;
            info!("validation mse {:.5} -> {:.5}", s.initial_val_mse, s.final_val_mse);
        }
        Command::Profile(c) => {
            let s = bench::profile(&load(&c)?, &c.out)?;
            info!("static layers {:?}, spearman {:.3}", s.static_layers, s.spearman);
        }
        Command::Distill(c) => {
            let s = bench::distill(&load(&c)?, &c.out)?;
            info!(
                "stage 1 {:.5} -> {:.5}; skip rate two-stage {:.4}, joint {:?}",
                s.stage1_initial_loss, s.stage1_final_loss, s.two_stage_skip_rate, s.joint_skip_rate
            );
        }
        Command::Evaluate { common, modes } => {
            let s = bench::evaluate(&load(&common)?, &common.out, &modes)?;
            print!("{}", bench::bench_csv(&s.rows));
        }
        Command::Ablate { common, axis, values } => {
            print!("{}", bench::ablate(&load(&common)?, &common.out, axis, &values)?);
        }
        Command::NoiseStudy(c) => print!("{}", bench::noise_study(&load(&c)?, &c.out)?),
        Command::Report(c) => print!("{}", bench::report(&load(&c)?, &c.out)?),
        Command::Config { common, dump_defaults } => {
            let cfg = if dump_defaults { PipelineConfig::default() } else { load(&common)? };
            println!("{}", cfg.to_json()?);
        }
    }
    Ok(())
}
