//! Held-out validation loss over fixed, non-overlapping windows.

use std::fs;
use std::path::Path;

use rand::seq::index;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::infer;
use crate::model::ModelState;
use crate::par;
use crate::rng::{self, Stream};
use crate::tensor::kernels::Segments;
use crate::tensor::tape::cross_entropy_forward;
use crate::tokenizer::{encode_bytes, TokenSequence};

/// Windows scored per batched forward pass. Fixed so that results never
/// depend on how work is split across threads.
const WINDOWS_PER_BATCH: usize = 16;

/// A tokenized evaluation text.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub tokens: TokenSequence,
    /// Lowercase hex SHA-256 of the file bytes.
    pub digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Reads and byte-tokenizes `path`. The text must hold at least one full
/// window, `block_size + 1` tokens.
pub fn load_corpus(path: &Path, name: &str, block_size: usize) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::Corpus {
        name: name.to_string(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    Corpus::from_bytes(name, &bytes, block_size)
}

impl Corpus {
    pub fn from_bytes(name: &str, bytes: &[u8], block_size: usize) -> Result<Corpus> {
        if std::str::from_utf8(bytes).is_err() {
            return Err(Error::Corpus {
                name: name.to_string(),
                reason: "file is not valid UTF-8".into(),
            });
        }
        if bytes.len() < block_size + 1 {
            return Err(Error::Corpus {
                name: name.to_string(),
                reason: format!(
                    "{} tokens is shorter than one window of {}",
                    bytes.len(),
                    block_size + 1
                ),
            });
        }
        Ok(Corpus {
            name: name.to_string(),
            tokens: encode_bytes(bytes),
            digest: sha256_hex(bytes),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// How many windows to score per evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// `None` scores every window.
    pub windows_per_eval: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            windows_per_eval: None,
            seed: 0,
        }
    }
}

/// The fixed set of windows one run scores on one corpus. Window `k` feeds
/// tokens `[k*B, k*B + B)` and predicts `[k*B + 1, k*B + B + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalWindows {
    pub block_size: usize,
    /// Window indices in ascending order.
    pub indices: Vec<usize>,
}

impl EvalWindows {
    pub fn new(corpus: &Corpus, block_size: usize, cfg: &EvalConfig) -> Result<Self> {
        let total = corpus.len().saturating_sub(1) / block_size;
        if total == 0 {
            return Err(Error::Corpus {
                name: corpus.name.clone(),
                reason: format!("no complete window of {} tokens", block_size + 1),
            });
        }
        let mut indices: Vec<usize> = match cfg.windows_per_eval {
            Some(n) if n < total => {
                if n == 0 {
                    return Err(Error::Config("windows_per_eval must be at least 1".into()));
                }
                let mut r = rng::stream(cfg.seed, Stream::EvalSubsample);
                index::sample(&mut r, total, n).into_vec()
            }
            _ => (0..total).collect(),
        };
        indices.sort_unstable();
        Ok(EvalWindows {
            block_size,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Mean next-token cross-entropy of `model` on the given windows, in nats.
/// Eval mode: no dropout and no randomness. Per-window sums are reduced in
/// window order in f64, so the result is the same with or without threads.
pub fn eval_val_loss(model: &ModelState, corpus: &Corpus, windows: &EvalWindows) -> Result<f64> {
    let b = windows.block_size;
    if b > model.config().block_size {
        return Err(Error::ContextLength {
            len: b,
            block_size: model.config().block_size,
        });
    }
    let ids = corpus.tokens.ids();
    let v = model.config().vocab_size;
    let batches: Vec<&[usize]> = windows.indices.chunks(WINDOWS_PER_BATCH).collect();
    let sums = par::map(&batches, |batch| -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(batch.len() * b);
        for &k in batch.iter() {
            input.extend_from_slice(&ids[k * b..k * b + b]);
        }
        let logits = infer::logits(model, &input, &Segments::uniform(batch.len(), b))?;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(w, &k)| {
                let targets: Vec<usize> = ids[k * b + 1..k * b + b + 1]
                    .iter()
                    .map(|&t| t as usize)
                    .collect();
                let (mean, _) = cross_entropy_forward(&logits[w * b * v..(w + 1) * b * v], v, &targets);
                mean * b as f64
            })
            .collect())
    });
    let mut total = 0.0f64;
    for batch in sums {
        for s in batch? {
            total += s;
        }
    }
    let loss = total / (windows.len() * b) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("validation loss"));
    }
    Ok(loss)
}
