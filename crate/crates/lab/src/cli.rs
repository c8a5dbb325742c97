use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, TrainOptions};
use crate::config::ExperimentConfig;
use crate::dataset::Split;
use crate::error::{LabError, Result};
use crate::executor::RayonExecutor;

#[derive(Debug, Parser)]
#[command(name = "nextpoint", version, about = "Next-point nucleus detection: data generation, SFT, GRPO fine-tuning, evaluation and reports")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML). Defaults are used for anything it omits.
    #[arg(long, short, global = true, env = "NEXTPOINT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set sft.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output_dir` from the config).
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the train and val scene files plus a manifest.
    Generate {
        /// Dataset directory [default: <out>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Replace a previously generated dataset.
        #[arg(long)]
        force: bool,
    },
    /// Supervised fine-tuning (pre-trains the frozen mask decoder first if needed).
    Sft {
        /// Dataset directory [default: <out>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// GRPO fine-tuning from an SFT checkpoint.
    Rft {
        /// Dataset directory [default: <out>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// SFT checkpoint [default: <out>/sft.ckpt].
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Greedy decoding and the full metric suite on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory [default: <out>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// `train` or `val`.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Plots and a summary table from training logs and eval reports.
    Report {
        /// Training log (NDJSON). Repeatable.
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
        /// Eval report (JSON). Repeatable.
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed steps.
    #[arg(long)]
    until: Option<usize>,
}

impl TrainArgs {
    fn options(&self) -> TrainOptions {
        TrainOptions { resume: self.resume.clone(), until: self.until }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let config = ExperimentConfig::load(g.config.as_deref(), &g.overrides)?;
    let split = match &cli.command {
        Command::Eval { split, .. } => Some(split.parse::<Split>()?),
        _ => None,
    };
    let exec = RayonExecutor::new(g.threads).map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    let out = commands::resolve_output(&config, g.out.as_deref());
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| out.join("data"));
    match &cli.command {
        Command::Generate { data, force } => {
            let dir = data_dir(data);
            let m = commands::generate(&config, &dir, *force, &exec)?;
            println!("wrote {} scenes and {} to {}", m.entries.len(), crate::dataset::MANIFEST, dir.display());
        }
        Command::Sft { data, train } => {
            let o = commands::sft(&config, &data_dir(data), &out, &train.options(), &exec)?;
            report_training("sft", &o);
        }
        Command::Rft { data, init, train } => {
            let init = init.clone().unwrap_or_else(|| out.join(commands::SFT_CHECKPOINT));
            let o = commands::rft(&config, &data_dir(data), &init, &out, &train.options(), &exec)?;
            report_training("rft", &o);
        }
        Command::Eval { checkpoint, data, .. } => {
            let (doc, path) = commands::eval(&config, checkpoint, &data_dir(data), split.expect("parsed above"), &out, &exec)?;
            let a = &doc.aggregate;
            println!("{} scenes: F1 {:.4}  PQ {:.4}  AJI {:.4}  format failures {}", a.scenes, a.f1, a.pq, a.aji, a.format_failures);
            println!("report: {}", path.display());
        }
        Command::Report { logs, evals } => {
            let s = commands::report(logs, evals, &out)?;
            if s.skipped_lines > 0 {
                eprintln!("warning: skipped {} malformed log lines", s.skipped_lines);
            }
            println!("wrote plots and summary to {}", out.display());
        }
    }
    Ok(())
}

fn report_training(stage: &str, o: &commands::TrainOutcome) {
    match o.last_val_f1 {
        Some(f1) => println!("{stage}: {} steps, val F1 {f1:.4}", o.steps_done),
        None => println!("{stage}: {} steps", o.steps_done),
    }
    println!("checkpoint: {}", o.checkpoint.display());
}
