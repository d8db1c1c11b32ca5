use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use drivewm::envsim::Task;
use drivewm::harness::evaluate::{rollout, write_report};
use drivewm::harness::train::train_with_progress;
use drivewm::harness::{evaluate, logs, Checkpoint, EvalOptions, EvalPolicy, RunConfig};

#[derive(Parser)]
#[command(name = "drivewm", version, about = "Train and evaluate a latent world-model driving agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full schedule and write logs, plot series and a checkpoint into DIR.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and write report.csv and report.txt into DIR.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: Task,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "actor")]
        policy: EvalPolicy,
        /// Sample actions instead of taking the policy mode.
        #[arg(long)]
        sample: bool,
    },
    /// Drive the greedy actor and dump every frame as a PPM.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: Task,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        dump_frames: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Turn training logs into per-curve step,value CSVs and SVG charts.
    Plot {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, seed, out, overrides, quiet } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::for_task(Task::Highway),
            };
            for kv in &overrides {
                let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let summary = train_with_progress(&cfg, &out, |msg| {
                if !quiet {
                    eprintln!("{msg}");
                }
            })?;
            println!(
                "trained {} world-model steps over {} episodes; checkpoint {}",
                summary.world_model_steps,
                summary.episodes,
                summary.checkpoint.display()
            );
        }
        Command::Eval { checkpoint, env, episodes, seed, out, policy, sample } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let opts = EvalOptions { task: env, episodes, seed, policy, greedy: !sample };
            let (report, _) = evaluate(&ckpt, &opts)?;
            write_report(&report, &out)?;
            print!("{}", report.to_table());
        }
        Command::Rollout { checkpoint, env, steps, dump_frames, seed } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let s = rollout(&ckpt, env, steps, seed, &dump_frames)?;
            println!("wrote {} frames over {} episodes to {}", s.frames, s.episodes, dump_frames.display());
        }
        Command::Plot { logs: dir, out } => {
            let files = logs::emit_plots(&dir, &out)?;
            println!("wrote {} series to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
