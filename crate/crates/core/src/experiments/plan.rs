//! Flat `key=value` experiment plans.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::optim::TrainConfig;
use crate::sampler::SamplingConfig;
use crate::selftrain::meta::KeyValues;
use crate::selftrain::{RunOptions, StopCriteria};

use super::pretrain::PretrainConfig;

/// Everything a sweep needs. Every field has a default, so an empty plan
/// file is valid.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub presets: Vec<String>,
    pub learning_rates: Vec<f32>,
    pub seeds: Vec<u64>,
    /// Presets for the size sweep, all run at `size_lr`.
    pub size_presets: Vec<String>,
    pub size_lr: f32,
    pub train_corpus: PathBuf,
    /// Evaluation corpora as `(name, path)`; the first is the primary one.
    pub corpora: Vec<(String, PathBuf)>,
    pub out: PathBuf,
    pub sampling: SamplingConfig,
    /// Optimizer settings for self-training; the learning rate is replaced
    /// per run.
    pub train: TrainConfig,
    pub stop: StopCriteria,
    pub eval: EvalConfig,
    pub options: RunOptions,
    pub pretrain: PretrainConfig,
    /// Validation windows used while pretraining.
    pub pretrain_eval_windows: Option<usize>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            presets: vec!["tiny".into()],
            learning_rates: vec![1e-4, 5e-4, 2e-3],
            seeds: vec![0, 1, 2, 3, 4],
            size_presets: vec!["tiny".into(), "small".into(), "medium".into()],
            size_lr: 5e-4,
            train_corpus: PathBuf::from("corpora/train.txt"),
            corpora: vec![
                ("moby_valid".into(), PathBuf::from("corpora/moby_valid.txt")),
                ("sotu_valid".into(), PathBuf::from("corpora/sotu_valid.txt")),
            ],
            out: PathBuf::from("runs"),
            sampling: SamplingConfig::default(),
            train: TrainConfig::default(),
            stop: StopCriteria::default(),
            eval: EvalConfig {
                windows_per_eval: Some(64),
                seed: 0,
            },
            options: RunOptions::default(),
            pretrain: PretrainConfig::default(),
            pretrain_eval_windows: Some(256),
        }
    }
}

const KEYS: &[&str] = &[
    "presets",
    "learning_rates",
    "seeds",
    "size_presets",
    "size_lr",
    "train_corpus",
    "corpora",
    "out",
    "temperature",
    "top_k",
    "max_new_tokens",
    "beta1",
    "beta2",
    "eps",
    "grad_clip",
    "weight_decay",
    "max_iters",
    "tau",
    "patience",
    "windows_per_eval",
    "eval_seed",
    "val_stride",
    "snapshot_every",
    "pretrain_steps",
    "pretrain_lr",
    "pretrain_batch_size",
    "pretrain_seed",
    "pretrain_eval_every",
    "pretrain_target_val_loss",
    "pretrain_eval_windows",
];

fn list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("bad entry {s:?} in {key}")))
        })
        .collect()
}

fn one<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value {raw:?} for {key}")))
}

fn optional<T: std::str::FromStr>(key: &str, raw: &str, none: &str) -> Result<Option<T>> {
    if raw == none {
        Ok(None)
    } else {
        one(key, raw).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl ExperimentPlan {
    /// Applies `key=value` pairs on top of the defaults, in order.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut p = ExperimentPlan::default();
        for (k, v) in &kv.0 {
            p.set(k, v)?;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn read(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kv = KeyValues::parse(&text)?;
        kv.0.extend(overrides.iter().cloned());
        Self::from_kv(&kv)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "presets" => self.presets = list(key, v)?,
            "learning_rates" => self.learning_rates = list(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "size_presets" => self.size_presets = list(key, v)?,
            "size_lr" => self.size_lr = one(key, v)?,
            "train_corpus" => self.train_corpus = PathBuf::from(v),
            "corpora" => {
                self.corpora = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|entry| {
                        let (name, path) = entry.trim().split_once(':').ok_or_else(|| {
                            Error::Config(format!("corpus entry {entry:?} is not name:path"))
                        })?;
                        Ok((name.to_string(), PathBuf::from(path)))
                    })
                    .collect::<Result<_>>()?
            }
            "out" => self.out = PathBuf::from(v),
            "temperature" => self.sampling.temperature = one(key, v)?,
            "top_k" => self.sampling.top_k = one(key, v)?,
            "max_new_tokens" => self.sampling.max_new_tokens = one(key, v)?,
            "beta1" => self.train.beta1 = one(key, v)?,
            "beta2" => self.train.beta2 = one(key, v)?,
            "eps" => self.train.eps = one(key, v)?,
            "grad_clip" => self.train.grad_clip = optional(key, v, "none")?,
            "weight_decay" => self.train.weight_decay = one(key, v)?,
            "max_iters" => self.stop.max_iters = one(key, v)?,
            "tau" => self.stop.tau = one(key, v)?,
            "patience" => self.stop.patience = one(key, v)?,
            "windows_per_eval" => self.eval.windows_per_eval = optional(key, v, "all")?,
            "eval_seed" => self.eval.seed = one(key, v)?,
            "val_stride" => self.options.val_stride = one(key, v)?,
            "snapshot_every" => self.options.snapshot_every = optional(key, v, "none")?,
            "pretrain_steps" => self.pretrain.steps = one(key, v)?,
            "pretrain_lr" => self.pretrain.train.learning_rate = one(key, v)?,
            "pretrain_batch_size" => self.pretrain.batch_size = one(key, v)?,
            "pretrain_seed" => self.pretrain.seed = one(key, v)?,
            "pretrain_eval_every" => self.pretrain.eval_every = one(key, v)?,
            "pretrain_target_val_loss" => {
                self.pretrain.target_val_loss = optional(key, v, "none")?
            }
            "pretrain_eval_windows" => self.pretrain_eval_windows = optional(key, v, "all")?,
            other => {
                return Err(Error::Config(format!(
                    "unknown plan key {other:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.presets.iter().chain(&self.size_presets) {
            ModelConfig::preset(p)?;
        }
        if self.corpora.is_empty() {
            return Err(Error::Config("plan lists no evaluation corpora".into()));
        }
        for (name, _) in &self.corpora {
            let ok = !name.is_empty()
                && name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                return Err(Error::Config(format!(
                    "corpus name {name:?} may only use letters, digits, '_' and '-'"
                )));
            }
        }
        if self.learning_rates.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one learning rate and seed".into()));
        }
        self.sampling.validate()?;
        self.stop.validate()?;
        for lr in self.learning_rates.iter().chain([&self.size_lr]) {
            TrainConfig {
                learning_rate: *lr,
                ..self.train.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    /// The plan as it would be written to a file; reading it back yields the
    /// same plan.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("presets", join(&self.presets));
        kv("learning_rates", join(&self.learning_rates));
        kv("seeds", join(&self.seeds));
        kv("size_presets", join(&self.size_presets));
        kv("size_lr", self.size_lr.to_string());
        kv("train_corpus", self.train_corpus.display().to_string());
        kv(
            "corpora",
            self.corpora
                .iter()
                .map(|(n, p)| format!("{n}:{}", p.display()))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("out", self.out.display().to_string());
        kv("temperature", self.sampling.temperature.to_string());
        kv("top_k", self.sampling.top_k.to_string());
        kv("max_new_tokens", self.sampling.max_new_tokens.to_string());
        kv("beta1", self.train.beta1.to_string());
        kv("beta2", self.train.beta2.to_string());
        kv("eps", self.train.eps.to_string());
        kv("grad_clip", opt(&self.train.grad_clip, "none"));
        kv("weight_decay", self.train.weight_decay.to_string());
        kv("max_iters", self.stop.max_iters.to_string());
        kv("tau", self.stop.tau.to_string());
        kv("patience", self.stop.patience.to_string());
        kv("windows_per_eval", opt(&self.eval.windows_per_eval, "all"));
        kv("eval_seed", self.eval.seed.to_string());
        kv("val_stride", self.options.val_stride.to_string());
        kv("snapshot_every", opt(&self.options.snapshot_every, "none"));
        kv("pretrain_steps", self.pretrain.steps.to_string());
        kv("pretrain_lr", self.pretrain.train.learning_rate.to_string());
        kv("pretrain_batch_size", self.pretrain.batch_size.to_string());
        kv("pretrain_seed", self.pretrain.seed.to_string());
        kv("pretrain_eval_every", self.pretrain.eval_every.to_string());
        kv(
            "pretrain_target_val_loss",
            opt(&self.pretrain.target_val_loss, "none"),
        );
        kv("pretrain_eval_windows", opt(&self.pretrain_eval_windows, "all"));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_plan_is_the_default() {
        let p = ExperimentPlan::from_kv(&KeyValues::default()).unwrap();
        assert_eq!(p, ExperimentPlan::default());
        assert_eq!(p.learning_rates, vec![1e-4, 5e-4, 2e-3]);
        assert_eq!(p.stop.max_iters, 1000);
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let mut p = ExperimentPlan::default();
        p.set("learning_rates", "3e-4, 1e-3").unwrap();
        p.set("corpora", "a:x/a.txt,b:y/b.txt").unwrap();
        p.set("grad_clip", "none").unwrap();
        p.set("windows_per_eval", "all").unwrap();
        let back = ExperimentPlan::from_kv(&KeyValues::parse(&p.to_text()).unwrap()).unwrap();
        assert_eq!(back, p);
        let mut kv = KeyValues::parse("max_iters=50\nmax_iters=70\n").unwrap();
        kv.set("seeds", "9");
        let q = ExperimentPlan::from_kv(&kv).unwrap();
        assert_eq!((q.stop.max_iters, q.seeds.clone()), (70, vec![9]));
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let bad = |s: &str| ExperimentPlan::from_kv(&KeyValues::parse(s).unwrap()).is_err();
        assert!(bad("max_iter=5"));
        assert!(bad("presets=huge"));
        assert!(bad("corpora=nocolon"));
        assert!(bad("corpora=bad name:x.txt"));
        assert!(bad("tau=2"));
        assert!(bad("seeds="));
    }
}
