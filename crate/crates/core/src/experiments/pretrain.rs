//! Next-token pretraining on random crops, producing the base model that
//! self-training starts from.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{eval_val_loss, Corpus, EvalWindows};
use crate::model::{Mode, ModelConfig, ModelState};
use crate::optim::{adam_step, clip_grad_norm, AdamState, TrainConfig};
use crate::rng::{self, Stream};
use crate::tensor::kernels::Segments;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub train: TrainConfig,
    /// Validate every this many steps (and after the last).
    pub eval_every: u64,
    /// Stop early once validation loss drops to this value.
    pub target_val_loss: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 16,
            seed: 0,
            train: TrainConfig {
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            eval_every: 250,
            target_val_loss: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: ModelState,
    pub steps: u64,
    /// Validation loss of the returned model, when a validation set was given.
    pub val_loss: Option<f64>,
}

/// Trains a freshly initialized `config` model on `train` with random
/// `block_size + 1` crops. With `steps == 0` the initialized model comes back
/// untouched. `log`, when given, receives `step,train_loss,val_loss` rows.
pub fn pretrain(
    config: &ModelConfig,
    train: &Corpus,
    val: Option<(&Corpus, &EvalWindows)>,
    cfg: &PretrainConfig,
    log: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.train.validate()?;
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("batch_size and eval_every must be positive".into()));
    }
    let mut model = ModelState::init(config, cfg.seed)?;
    let b = config.block_size;
    let ids = train.tokens.ids();
    if ids.len() < b + 1 {
        return Err(Error::Corpus {
            name: train.name.clone(),
            reason: "shorter than one training crop".into(),
        });
    }
    let mut out = match log {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "step,train_loss,val_loss").map_err(|e| Error::io(p, e))?;
            Some((w, p))
        }
        None => None,
    };
    let mut val_loss = None;
    if cfg.steps == 0 {
        if let Some((c, w)) = val {
            val_loss = Some(eval_val_loss(&model, c, w)?);
        }
        return Ok(PretrainOutcome {
            model,
            steps: 0,
            val_loss,
        });
    }
    let mut adam = AdamState::new(model.params());
    let mut batches = rng::stream(cfg.seed, Stream::Batches);
    let mut dropout = rng::stream(cfg.seed, Stream::Dropout);
    let segs = Segments::uniform(cfg.batch_size, b);
    let mut step = 0;
    while step < cfg.steps {
        let mut input = Vec::with_capacity(cfg.batch_size * b);
        let mut targets = Vec::with_capacity(cfg.batch_size * b);
        for _ in 0..cfg.batch_size {
            let s = batches.random_range(0..ids.len() - b);
            input.extend_from_slice(&ids[s..s + b]);
            targets.extend(ids[s + 1..s + b + 1].iter().map(|&t| t as usize));
        }
        let mut tape = Tape::new();
        let logits = model.forward_tape(&mut tape, &input, &segs, Mode::Train(&mut dropout))?;
        let (loss_node, loss) = tape.cross_entropy(logits, &targets)?;
        tape.backward(loss_node)?;
        model.zero_grad();
        tape.accumulate_param_grads(model.params_mut())?;
        drop(tape);
        if let Some(c) = cfg.train.grad_clip {
            clip_grad_norm(model.params_mut(), c)?;
        }
        adam_step(model.params_mut(), &mut adam, &cfg.train)?;
        step += 1;
        let check = step % cfg.eval_every == 0 || step == cfg.steps;
        let mut reached = false;
        let mut row_val = String::new();
        if check {
            if let Some((c, w)) = val {
                let l = eval_val_loss(&model, c, w)?;
                val_loss = Some(l);
                row_val = l.to_string();
                reached = cfg.target_val_loss.is_some_and(|t| l <= t);
                log::info!("pretrain step {step}: train {loss:.4} val {l:.4}");
            }
        }
        if let Some((w, p)) = out.as_mut() {
            writeln!(w, "{step},{loss},{row_val}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(*p, e))?;
        }
        if reached {
            break;
        }
    }
    model.zero_grad();
    for p in model.params_mut() {
        p.drop_grad();
    }
    Ok(PretrainOutcome {
        model,
        steps: step,
        val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::EvalConfig;

    fn corpus(n: usize) -> Corpus {
        let text: Vec<u8> = b"the cat sat on the mat. the dog sat on the log. "
            .iter()
            .cycle()
            .take(n)
            .copied()
            .collect();
        Corpus::from_bytes("c", &text, 32).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            block_size: 32,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn zero_steps_returns_the_initial_model() {
        let c = corpus(2000);
        let cfg = PretrainConfig {
            steps: 0,
            seed: 4,
            ..PretrainConfig::default()
        };
        let out = pretrain(&small(), &c, None, &cfg, None).unwrap();
        assert!(out.model.same_weights(&ModelState::init(&small(), 4).unwrap()));
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn learns_a_repetitive_text_and_stops_at_target() {
        let c = corpus(5000);
        let w = EvalWindows::new(&c, 32, &EvalConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("log.csv");
        let cfg = PretrainConfig {
            steps: 400,
            batch_size: 4,
            eval_every: 20,
            target_val_loss: Some(1.5),
            ..PretrainConfig::default()
        };
        let out = pretrain(&small(), &c, Some((&c, &w)), &cfg, Some(&log)).unwrap();
        let l = out.val_loss.unwrap();
        assert!(l <= 1.5, "{l}");
        assert!(out.steps < 400);
        let rows = std::fs::read_to_string(&log).unwrap().lines().count() as u64;
        assert_eq!(rows, out.steps + 1);
    }
}
