//! `run.meta`: everything needed to reproduce a self-training run, as flat
//! `key=value` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{run_self_training, RunOptions, RunOutcome, SelfTrainState, StopCriteria};
use crate::error::{Error, Result};
use crate::eval::{load_corpus, sha256_hex, EvalConfig, EvalWindows};
use crate::model::checkpoint::Container;
use crate::model::ModelState;
use crate::optim::TrainConfig;
use crate::sampler::SamplingConfig;

pub const META_FORMAT: &str = "selfloop-run/1";

/// A complete, self-describing run specification.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub seed: u64,
    pub base_checkpoint: PathBuf,
    /// Expected SHA-256 of the base checkpoint file, checked when set.
    pub base_digest: Option<String>,
    /// `(name, path, expected digest)` per evaluation corpus, in column order.
    pub corpora: Vec<(String, PathBuf, Option<String>)>,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub stop: StopCriteria,
    pub eval: EvalConfig,
    pub options: RunOptions,
}

fn opt_to_string<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

/// Parsed `key=value` lines, keeping file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", i + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(KeyValues(out))
    }

    /// Last value for `key`, so later lines override earlier ones.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("missing key {key:?}")))
    }

    pub fn parse_key<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value {raw:?} for {key:?}")))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.0.push((key.to_string(), value.into()));
    }
}

fn parse_opt<T: std::str::FromStr>(kv: &KeyValues, key: &str, none: &str) -> Result<Option<T>> {
    match kv.require(key)? {
        v if v == none => Ok(None),
        _ => kv.parse_key(key).map(Some),
    }
}

impl RunSpec {
    pub fn to_meta(&self, model: &ModelState) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k}={v}").expect("string write");
        };
        kv("format", META_FORMAT.into());
        kv("code_version", env!("CARGO_PKG_VERSION").into());
        kv("seed", self.seed.to_string());
        kv("base_checkpoint", self.base_checkpoint.display().to_string());
        kv("base_checkpoint_sha256", opt_to_string(&self.base_digest, "unchecked"));
        let c = model.config();
        kv("model.n_layer", c.n_layer.to_string());
        kv("model.n_head", c.n_head.to_string());
        kv("model.n_embd", c.n_embd.to_string());
        kv("model.block_size", c.block_size.to_string());
        kv("model.vocab_size", c.vocab_size.to_string());
        kv("model.params", model.count_params().to_string());
        let names: Vec<&str> = self.corpora.iter().map(|(n, _, _)| n.as_str()).collect();
        kv("corpora", names.join(","));
        for (name, path, digest) in &self.corpora {
            kv(&format!("corpus.{name}.path"), path.display().to_string());
            kv(&format!("corpus.{name}.sha256"), opt_to_string(digest, "unchecked"));
        }
        kv("sampling.temperature", self.sampling.temperature.to_string());
        kv("sampling.top_k", self.sampling.top_k.to_string());
        kv("sampling.max_new_tokens", self.sampling.max_new_tokens.to_string());
        kv("train.learning_rate", self.train.learning_rate.to_string());
        kv("train.beta1", self.train.beta1.to_string());
        kv("train.beta2", self.train.beta2.to_string());
        kv("train.eps", self.train.eps.to_string());
        kv("train.grad_clip", opt_to_string(&self.train.grad_clip, "none"));
        kv("train.weight_decay", self.train.weight_decay.to_string());
        kv("stop.max_iters", self.stop.max_iters.to_string());
        kv("stop.tau", self.stop.tau.to_string());
        kv("stop.patience", self.stop.patience.to_string());
        kv("eval.windows_per_eval", opt_to_string(&self.eval.windows_per_eval, "all"));
        kv("eval.seed", self.eval.seed.to_string());
        kv("eval.windows", "non-overlapping block_size windows".into());
        kv("val_stride", self.options.val_stride.to_string());
        kv("snapshot_every", opt_to_string(&self.options.snapshot_every, "none"));
        s
    }

    pub fn from_meta(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        if kv.require("format")? != META_FORMAT {
            return Err(Error::Format(format!(
                "unsupported run.meta format {:?}",
                kv.get("format")
            )));
        }
        let checked = |key: &str| -> Result<Option<String>> {
            Ok(match kv.require(key)? {
                "unchecked" => None,
                v => Some(v.to_string()),
            })
        };
        let corpora = kv
            .require("corpora")?
            .split(',')
            .filter(|n| !n.is_empty())
            .map(|n| {
                Ok((
                    n.to_string(),
                    PathBuf::from(kv.require(&format!("corpus.{n}.path"))?),
                    checked(&format!("corpus.{n}.sha256"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunSpec {
            seed: kv.parse_key("seed")?,
            base_checkpoint: PathBuf::from(kv.require("base_checkpoint")?),
            base_digest: checked("base_checkpoint_sha256")?,
            corpora,
            sampling: SamplingConfig {
                temperature: kv.parse_key("sampling.temperature")?,
                top_k: kv.parse_key("sampling.top_k")?,
                max_new_tokens: kv.parse_key("sampling.max_new_tokens")?,
                prompt: String::new(),
            },
            train: TrainConfig {
                learning_rate: kv.parse_key("train.learning_rate")?,
                beta1: kv.parse_key("train.beta1")?,
                beta2: kv.parse_key("train.beta2")?,
                eps: kv.parse_key("train.eps")?,
                grad_clip: parse_opt(&kv, "train.grad_clip", "none")?,
                weight_decay: kv.parse_key("train.weight_decay")?,
            },
            stop: StopCriteria {
                max_iters: kv.parse_key("stop.max_iters")?,
                tau: kv.parse_key("stop.tau")?,
                patience: kv.parse_key("stop.patience")?,
            },
            eval: EvalConfig {
                windows_per_eval: parse_opt(&kv, "eval.windows_per_eval", "all")?,
                seed: kv.parse_key("eval.seed")?,
            },
            options: RunOptions {
                val_stride: kv.parse_key("val_stride")?,
                snapshot_every: parse_opt(&kv, "snapshot_every", "none")?,
            },
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_meta(&text)
    }
}

fn check_digest(what: &str, want: &Option<String>, got: &str) -> Result<()> {
    match want {
        Some(w) if w != got => Err(Error::Format(format!(
            "{what} digest mismatch: expected {w}, found {got}"
        ))),
        _ => Ok(()),
    }
}

/// Loads the base model and corpora named by `spec`, writes `run.meta`
/// (with digests filled in) to `out_dir`, and runs to a stop reason.
pub fn execute_run(spec: &RunSpec, out_dir: &Path) -> Result<RunOutcome> {
    if !spec.sampling.prompt.is_empty() {
        return Err(Error::Config("self-training samples from an empty prompt".into()));
    }
    let bytes = fs::read(&spec.base_checkpoint).map_err(|e| Error::io(&spec.base_checkpoint, e))?;
    let base_digest = sha256_hex(&bytes);
    check_digest("base checkpoint", &spec.base_digest, &base_digest)?;
    let model = ModelState::from_container(&Container::from_bytes(&bytes)?)?;
    let block = model.config().block_size;
    let mut evals = Vec::new();
    let mut corpora = Vec::new();
    for (name, path, digest) in &spec.corpora {
        let c = load_corpus(path, name, block)?;
        check_digest(&format!("corpus {name}"), digest, &c.digest)?;
        corpora.push((name.clone(), path.clone(), Some(c.digest.clone())));
        let w = EvalWindows::new(&c, block, &spec.eval)?;
        evals.push((c, w));
    }
    let resolved = RunSpec {
        base_digest: Some(base_digest),
        corpora,
        ..spec.clone()
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let meta_path = out_dir.join("run.meta");
    fs::write(&meta_path, resolved.to_meta(&model)).map_err(|e| Error::io(&meta_path, e))?;
    let mut state = SelfTrainState::new(
        model,
        spec.seed,
        spec.sampling.clone(),
        spec.train.clone(),
        spec.stop.clone(),
    )?;
    let outcome = run_self_training(&mut state, &evals, &spec.options, Some(out_dir))?;
    let status = out_dir.join("status");
    let mut text = format!("stop_reason={}\n", outcome.stop_reason);
    if let Some(f) = &outcome.failure {
        text.push_str(&format!("failure={}\n", f.replace('\n', " ")));
    }
    fs::write(&status, text).map_err(|e| Error::io(&status, e))?;
    Ok(outcome)
}
