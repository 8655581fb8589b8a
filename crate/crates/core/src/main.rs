use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use selfloop::eval::{eval_val_loss, load_corpus, EvalWindows};
use selfloop::experiments::sweep::{all_completed, ensure_base, summary_csv, RunSummary};
use selfloop::experiments::{
    emit_report, run_lr_sweep, run_size_sweep, run_transcript_capture, ExperimentPlan,
};
use selfloop::model::checkpoint::load_checkpoint;
use selfloop::optim::TrainConfig;
use selfloop::selftrain::meta::{execute_run, RunSpec};

#[derive(Parser)]
#[command(name = "selfloop", version, about = "Self-training collapse experiments on small GPT-style models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plan file with key=value lines.
    #[arg(long, global = true)]
    plan: Option<PathBuf>,
    /// Plan override, applied after the plan file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run a single seed instead of the plan's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation corpus as NAME=PATH (repeatable; replaces the plan's list).
    #[arg(long = "corpus", value_name = "NAME=PATH", global = true)]
    corpus: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or reuse) the base checkpoint for a preset.
    Pretrain {
        #[arg(long, default_value = "tiny")]
        preset: String,
    },
    /// Run one self-training run, or rerun one from its run.meta.
    Selftrain {
        /// Reproduce the run described by this run.meta.
        #[arg(long, conflicts_with_all = ["base", "lr"])]
        meta: Option<PathBuf>,
        /// Base checkpoint to start from.
        #[arg(long, required_unless_present = "meta")]
        base: Option<PathBuf>,
        /// Learning rate (defaults to the first in the plan).
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Learning-rate sweep over presets, learning rates and seeds.
    SweepLr,
    /// Model-size sweep at a fixed learning rate.
    SweepSize,
    /// Validation loss of a checkpoint on the evaluation corpora.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Figure tables and plots from the sweeps under the output root.
    Report,
    /// Transcript of a run directory at iterations 0, 50, 100 and the last.
    Transcript {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_plan(c: &Common) -> anyhow::Result<ExperimentPlan> {
    let mut overrides = Vec::new();
    for s in &c.set {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("--set {s:?} is not KEY=VALUE"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = c.seed {
        overrides.push(("seeds".into(), seed.to_string()));
    }
    if let Some(out) = &c.out {
        overrides.push(("out".into(), out.display().to_string()));
    }
    if !c.corpus.is_empty() {
        let mut list = Vec::new();
        for s in &c.corpus {
            let (name, path) = s
                .split_once('=')
                .with_context(|| format!("--corpus {s:?} is not NAME=PATH"))?;
            list.push(format!("{name}:{path}"));
        }
        overrides.push(("corpora".into(), list.join(",")));
    }
    let plan = match &c.plan {
        Some(p) => ExperimentPlan::read(p, &overrides)?,
        None => {
            let mut kv = selfloop::selftrain::meta::KeyValues::default();
            kv.0 = overrides;
            ExperimentPlan::from_kv(&kv)?
        }
    };
    Ok(plan)
}

fn print_summaries(summaries: &[RunSummary]) -> ExitCode {
    print!("{}", summary_csv(summaries));
    if all_completed(summaries) {
        ExitCode::SUCCESS
    } else {
        eprintln!("some runs did not finish with a stop reason");
        ExitCode::from(2)
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let plan = load_plan(&cli.common)?;
    match cli.command {
        Command::Pretrain { preset } => {
            let path = ensure_base(&plan, &preset)?;
            println!("{}", path.display());
        }
        Command::Selftrain { meta, base, lr } => {
            let spec = match meta {
                Some(m) => RunSpec::read(&m)?,
                None => {
                    let base = base.expect("clap requires --base without --meta");
                    let lr = lr.unwrap_or(plan.learning_rates[0]);
                    let seed = cli.common.seed.unwrap_or(plan.seeds[0]);
                    RunSpec {
                        seed,
                        base_checkpoint: std::path::absolute(&base)?,
                        base_digest: None,
                        corpora: plan
                            .corpora
                            .iter()
                            .map(|(n, p)| Ok((n.clone(), std::path::absolute(p)?, None)))
                            .collect::<std::io::Result<_>>()?,
                        sampling: plan.sampling.clone(),
                        train: TrainConfig {
                            learning_rate: lr,
                            ..plan.train.clone()
                        },
                        stop: plan.stop.clone(),
                        eval: plan.eval.clone(),
                        options: plan.options.clone(),
                    }
                }
            };
            let Some(out) = cli.common.out else {
                bail!("selftrain needs --out for the run directory");
            };
            let outcome = execute_run(&spec, &out)?;
            println!(
                "stop_reason={} iterations={}",
                outcome.stop_reason,
                outcome.records.len()
            );
            if let Some(f) = outcome.failure {
                eprintln!("failure: {f}");
            }
        }
        Command::SweepLr => return Ok(print_summaries(&run_lr_sweep(&plan)?)),
        Command::SweepSize => return Ok(print_summaries(&run_size_sweep(&plan)?)),
        Command::Eval { checkpoint } => {
            let model = load_checkpoint(&checkpoint)?;
            let block = model.config().block_size;
            for (name, path) in &plan.corpora {
                let c = load_corpus(path, name, block)?;
                let w = EvalWindows::new(&c, block, &plan.eval)?;
                println!("{name}\t{:.6}\t{} windows", eval_val_loss(&model, &c, &w)?, w.len());
            }
        }
        Command::Report => {
            for f in emit_report(&plan.out)? {
                println!("{}", f.display());
            }
        }
        Command::Transcript { run } => {
            let (path, _) = run_transcript_capture(&run)?;
            println!("{}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
