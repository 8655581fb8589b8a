//! Learning-rate and model-size sweeps over self-training runs.
//!
//! Layout under the plan's output root:
//!
//! ```text
//! base/<preset>.ckpt          pretrained base model
//! base/<preset>.meta          pretraining settings and final validation loss
//! base/<preset>.log.csv       pretraining log
//! lr_sweep/<run id>/          one directory per run (see `execute_run`)
//! lr_sweep/summary.csv
//! size_sweep/<run id>/
//! size_sweep/summary.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{load_corpus, sha256_hex, EvalConfig, EvalWindows};
use crate::model::checkpoint::save_checkpoint;
use crate::model::ModelConfig;
use crate::optim::TrainConfig;
use crate::par;
use crate::selftrain::meta::{execute_run, KeyValues, RunSpec};
use crate::selftrain::records::{read_records, IterationRecord};
use crate::selftrain::StopReason;

use super::plan::ExperimentPlan;
use super::pretrain::pretrain;

pub const LR_SWEEP_DIR: &str = "lr_sweep";
pub const SIZE_SWEEP_DIR: &str = "size_sweep";

/// One planned run: where it goes and how to reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    pub run_id: String,
    pub dir: PathBuf,
    pub spec: RunSpec,
}

/// Per-run digest of `records.csv`, identified through `run.meta`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    /// Preset name when the model shape matches one, otherwise `custom`.
    pub preset: String,
    pub learning_rate: f32,
    pub seed: u64,
    pub params: usize,
    pub max_iters: u64,
    pub base_digest: Option<String>,
    pub corpora: Vec<String>,
    /// Number of records written.
    pub iterations: u64,
    /// `None` while the run has not finished (no `status` file) or when it
    /// failed before writing any record.
    pub stop_reason: Option<StopReason>,
    pub collapse_iteration: Option<u64>,
    /// Per corpus: first, middle and last validated values.
    pub val_first: Vec<Option<f64>>,
    pub val_mid: Vec<Option<f64>>,
    pub val_last: Vec<Option<f64>>,
    pub final_train_loss: Option<f64>,
    /// Set when the run could not be executed or summarized.
    pub error: Option<String>,
}

impl RunSummary {
    /// Collapse iteration with non-collapsed runs counted as `max_iters + 1`.
    pub fn collapse_rank(&self) -> u64 {
        self.collapse_iteration.unwrap_or(self.max_iters + 1)
    }

    fn failed(run_id: &str, spec: &RunSpec, preset: &str, error: String) -> Self {
        RunSummary {
            run_id: run_id.to_string(),
            preset: preset.to_string(),
            learning_rate: spec.train.learning_rate,
            seed: spec.seed,
            params: 0,
            max_iters: spec.stop.max_iters,
            base_digest: spec.base_digest.clone(),
            corpora: spec.corpora.iter().map(|(n, _, _)| n.clone()).collect(),
            iterations: 0,
            stop_reason: None,
            collapse_iteration: None,
            val_first: Vec::new(),
            val_mid: Vec::new(),
            val_last: Vec::new(),
            final_train_loss: None,
            error: Some(error),
        }
    }
}

/// Stop reason implied by the records alone.
pub fn stop_reason_from_records(records: &[IterationRecord], max_iters: u64) -> Option<StopReason> {
    let last = records.last()?;
    Some(if last.collapsed {
        StopReason::Collapsed
    } else if records.len() as u64 >= max_iters {
        StopReason::MaxIters
    } else {
        StopReason::NumericFailure
    })
}

fn preset_of(kv: &KeyValues) -> Result<String> {
    let shape = [
        kv.parse_key::<usize>("model.n_layer")?,
        kv.parse_key("model.n_head")?,
        kv.parse_key("model.n_embd")?,
        kv.parse_key("model.block_size")?,
        kv.parse_key("model.vocab_size")?,
    ];
    Ok(crate::model::PRESETS
        .iter()
        .find(|p| {
            let c = ModelConfig::preset(p).expect("preset names are valid");
            [c.n_layer, c.n_head, c.n_embd, c.block_size, c.vocab_size] == shape
        })
        .map_or("custom", |p| p)
        .to_string())
}

/// Summarizes a finished run directory from `records.csv`, `run.meta` and
/// the presence of `status`.
pub fn summarize_run(dir: &Path) -> Result<RunSummary> {
    let meta_path = dir.join("run.meta");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let spec = RunSpec::from_meta(&text)?;
    let kv = KeyValues::parse(&text)?;
    let (corpora, records) = read_records(&dir.join("records.csv"))?;
    let finished = dir.join("status").exists();
    let stop_reason = if finished {
        stop_reason_from_records(&records, spec.stop.max_iters)
    } else {
        None
    };
    let per_corpus = |pick: fn(&[f64]) -> Option<f64>| -> Vec<Option<f64>> {
        (0..corpora.len())
            .map(|c| {
                let vals: Vec<f64> = records.iter().filter_map(|r| r.val_losses[c]).collect();
                pick(&vals)
            })
            .collect()
    };
    let (val_first, val_mid, val_last) = (
        per_corpus(|v| v.first().copied()),
        per_corpus(|v| v.get(v.len() / 2).copied()),
        per_corpus(|v| v.last().copied()),
    );
    Ok(RunSummary {
        run_id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        preset: preset_of(&kv)?,
        learning_rate: spec.train.learning_rate,
        seed: spec.seed,
        params: kv.parse_key("model.params")?,
        max_iters: spec.stop.max_iters,
        base_digest: spec.base_digest,
        corpora,
        iterations: records.len() as u64,
        collapse_iteration: match stop_reason {
            Some(StopReason::Collapsed) => records.last().map(|r| r.iteration),
            _ => None,
        },
        stop_reason,
        val_first,
        val_mid,
        val_last,
        final_train_loss: records.last().map(|r| r.train_loss()),
        error: None,
    })
}

fn cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

/// Combined summary table. Corpus columns follow the first summary that
/// names any corpora.
pub fn summary_csv(summaries: &[RunSummary]) -> String {
    let corpora: Vec<String> = summaries
        .iter()
        .find(|s| !s.corpora.is_empty())
        .map(|s| s.corpora.clone())
        .unwrap_or_default();
    let mut head = vec![
        "run_id",
        "preset",
        "learning_rate",
        "seed",
        "params",
        "iterations",
        "stop_reason",
        "collapse_iteration",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for c in &corpora {
        for at in ["first", "mid", "last"] {
            head.push(format!("val_{at}_{c}"));
        }
    }
    head.extend(["final_train_loss", "base_sha256", "error"].map(String::from));
    let mut out = head.join(",");
    out.push('\n');
    for s in summaries {
        let mut row = vec![
            s.run_id.clone(),
            s.preset.clone(),
            s.learning_rate.to_string(),
            s.seed.to_string(),
            s.params.to_string(),
            s.iterations.to_string(),
            s.stop_reason.map(|r| r.to_string()).unwrap_or_default(),
            cell(&s.collapse_iteration),
        ];
        for c in 0..corpora.len() {
            for v in [&s.val_first, &s.val_mid, &s.val_last] {
                row.push(v.get(c).map(cell).unwrap_or_default());
            }
        }
        row.push(cell(&s.final_train_loss));
        row.push(cell(&s.base_digest));
        row.push(
            s.error
                .as_deref()
                .unwrap_or("")
                .replace([',', '\n'], ";"),
        );
        writeln!(out, "{}", row.join(",")).expect("string write");
    }
    out
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn pretrain_settings(plan: &ExperimentPlan, preset: &str, train_digest: &str, val_digest: &str) -> String {
    let p = &plan.pretrain;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
    kv("preset", preset.into());
    kv("train_corpus_sha256", train_digest.into());
    kv("val_corpus_sha256", val_digest.into());
    kv("steps", p.steps.to_string());
    kv("batch_size", p.batch_size.to_string());
    kv("seed", p.seed.to_string());
    kv("learning_rate", p.train.learning_rate.to_string());
    kv("eval_every", p.eval_every.to_string());
    kv("target_val_loss", cell(&p.target_val_loss));
    kv("eval_windows", cell(&plan.pretrain_eval_windows));
    kv("eval_seed", plan.eval.seed.to_string());
    s
}

/// Returns the base checkpoint for `preset`, pretraining it unless a
/// checkpoint produced with identical settings already exists.
pub fn ensure_base(plan: &ExperimentPlan, preset: &str) -> Result<PathBuf> {
    let config = ModelConfig::preset(preset)?;
    let dir = plan.out.join("base");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt = dir.join(format!("{preset}.ckpt"));
    let meta = dir.join(format!("{preset}.meta"));
    let train = load_corpus(&plan.train_corpus, "train", config.block_size)?;
    let (val_name, val_path) = &plan.corpora[0];
    let val = load_corpus(val_path, val_name, config.block_size)?;
    let settings = pretrain_settings(plan, preset, &train.digest, &val.digest);
    if ckpt.exists() {
        if let Ok(old) = fs::read_to_string(&meta) {
            if old.starts_with(&settings) {
                log::info!("reusing base checkpoint {}", ckpt.display());
                return absolute(&ckpt);
            }
        }
    }
    log::info!("pretraining {preset} base model");
    let windows = EvalWindows::new(
        &val,
        config.block_size,
        &EvalConfig {
            windows_per_eval: plan.pretrain_eval_windows,
            seed: plan.eval.seed,
        },
    )?;
    let log_path = dir.join(format!("{preset}.log.csv"));
    let out = pretrain(&config, &train, Some((&val, &windows)), &plan.pretrain, Some(&log_path))?;
    save_checkpoint(&out.model, &ckpt)?;
    let text = format!(
        "{settings}steps_run={}\nval_loss={}\nparams={}\n",
        out.steps,
        cell(&out.val_loss),
        out.model.count_params()
    );
    fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
    absolute(&ckpt)
}

fn run_id(preset: &str, lr: f32, seed: u64) -> String {
    format!("{preset}_lr{lr:e}_s{seed}")
}

/// The runs of one sweep for a given base checkpoint, in (lr, seed) order.
pub fn plan_runs(
    plan: &ExperimentPlan,
    sweep_dir: &Path,
    preset: &str,
    base: &Path,
    learning_rates: &[f32],
) -> Result<Vec<PlannedRun>> {
    let digest = sha256_hex(&fs::read(base).map_err(|e| Error::io(base, e))?);
    let corpora = plan
        .corpora
        .iter()
        .map(|(n, p)| Ok((n.clone(), absolute(p)?, None)))
        .collect::<Result<Vec<_>>>()?;
    let mut runs = Vec::new();
    for &lr in learning_rates {
        for &seed in &plan.seeds {
            let id = run_id(preset, lr, seed);
            runs.push(PlannedRun {
                dir: sweep_dir.join(&id),
                run_id: id,
                spec: RunSpec {
                    seed,
                    base_checkpoint: absolute(base)?,
                    base_digest: Some(digest.clone()),
                    corpora: corpora.clone(),
                    sampling: plan.sampling.clone(),
                    train: TrainConfig {
                        learning_rate: lr,
                        ..plan.train.clone()
                    },
                    stop: plan.stop.clone(),
                    eval: plan.eval.clone(),
                    options: plan.options.clone(),
                },
            });
        }
    }
    Ok(runs)
}

/// Executes `runs` (in parallel when enabled) and summarizes each. A run
/// that errors is reported through [`RunSummary::error`]; the others proceed.
pub fn execute_runs(runs: &[(String, PlannedRun)]) -> Vec<RunSummary> {
    par::map(runs, |(preset, run)| {
        log::info!("starting run {}", run.run_id);
        let result = if run.dir.exists() {
            fs::remove_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))
        } else {
            Ok(())
        }
        .and_then(|_| execute_run(&run.spec, &run.dir))
        .and_then(|_| summarize_run(&run.dir));
        match result {
            Ok(s) => {
                log::info!(
                    "run {} stopped ({}) after {} iterations",
                    run.run_id,
                    cell(&s.stop_reason),
                    s.iterations
                );
                s
            }
            Err(e) => {
                log::error!("run {} failed: {e}", run.run_id);
                RunSummary::failed(&run.run_id, &run.spec, preset, e.to_string())
            }
        }
    })
}

fn write_summary(dir: &Path, summaries: &[RunSummary]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("summary.csv");
    fs::write(&p, summary_csv(summaries)).map_err(|e| Error::io(&p, e))
}

fn record_plan(plan: &ExperimentPlan, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("plan.txt");
    fs::write(&p, plan.to_text()).map_err(|e| Error::io(&p, e))
}

/// One run per (preset, lr, seed) of `plan.presets × plan.learning_rates ×
/// plan.seeds`; runs of a preset share one base checkpoint.
pub fn run_lr_sweep(plan: &ExperimentPlan) -> Result<Vec<RunSummary>> {
    plan.validate()?;
    let dir = plan.out.join(LR_SWEEP_DIR);
    record_plan(plan, &dir)?;
    let mut runs = Vec::new();
    for preset in &plan.presets {
        let base = ensure_base(plan, preset)?;
        for r in plan_runs(plan, &dir, preset, &base, &plan.learning_rates)? {
            runs.push((preset.clone(), r));
        }
    }
    let summaries = execute_runs(&runs);
    write_summary(&dir, &summaries)?;
    Ok(summaries)
}

/// One run per (preset, seed) of `plan.size_presets × plan.seeds`, all at
/// `plan.size_lr`.
pub fn run_size_sweep(plan: &ExperimentPlan) -> Result<Vec<RunSummary>> {
    plan.validate()?;
    let dir = plan.out.join(SIZE_SWEEP_DIR);
    record_plan(plan, &dir)?;
    let mut runs = Vec::new();
    for preset in &plan.size_presets {
        let base = ensure_base(plan, preset)?;
        for r in plan_runs(plan, &dir, preset, &base, &[plan.size_lr])? {
            runs.push((preset.clone(), r));
        }
    }
    let summaries = execute_runs(&runs);
    write_summary(&dir, &summaries)?;
    Ok(summaries)
}

/// Summaries of every run directory below `sweep_dir`, sorted by name.
pub fn collect_summaries(sweep_dir: &Path) -> Result<Vec<RunSummary>> {
    let mut dirs = Vec::new();
    if sweep_dir.exists() {
        for entry in fs::read_dir(sweep_dir).map_err(|e| Error::io(sweep_dir, e))? {
            let entry = entry.map_err(|e| Error::io(sweep_dir, e))?;
            if entry.path().join("run.meta").exists() {
                dirs.push(entry.path());
            }
        }
    }
    dirs.sort();
    dirs.iter().map(|d| summarize_run(d)).collect()
}

/// True when every summary finished with a stop reason and no error.
pub fn all_completed(summaries: &[RunSummary]) -> bool {
    summaries
        .iter()
        .all(|s| s.error.is_none() && s.stop_reason.is_some())
}
