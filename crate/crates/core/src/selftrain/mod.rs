//! The self-training loop: sample a sequence from the current model, take
//! one optimizer step on it, measure, repeat until the samples collapse into
//! repetition or the iteration cap is reached.

pub mod meta;
pub mod metrics;
pub mod records;

use std::fmt;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::eval::{eval_val_loss, Corpus, EvalWindows};
use crate::model::checkpoint::Container;
use crate::model::{Mode, ModelState};
use crate::optim::{adam_step, clip_grad_norm, AdamState, TrainConfig};
use crate::rng::{self, Stream, StreamRng};
use crate::sampler::{generate, SamplingConfig};
use crate::tensor::kernels::Segments;
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::{decode_bytes, TokenSequence, START_TOKEN};

pub use metrics::CollapseMetrics;
pub use records::{IterationRecord, RecordWriter};

#[derive(Clone, Debug, PartialEq)]
pub struct StopCriteria {
    pub max_iters: u64,
    /// Collapse threshold on the distinct 4-gram ratio.
    pub tau: f64,
    /// Consecutive iterations below `tau` needed to call a collapse.
    pub patience: usize,
}

impl Default for StopCriteria {
    fn default() -> Self {
        StopCriteria {
            max_iters: 1000,
            tau: 0.1,
            patience: 3,
        }
    }
}

impl StopCriteria {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tau > 0.0 && self.tau < 1.0) || self.patience == 0 {
            return Err(Error::Config(format!("invalid stop criteria {self:?}")));
        }
        Ok(())
    }
}

/// True when the last `patience` samples all scored below `tau`.
pub fn detect_collapse(history: &[CollapseMetrics], criteria: &StopCriteria) -> bool {
    history.len() >= criteria.patience
        && history[history.len() - criteria.patience..]
            .iter()
            .all(|m| m.distinct_4gram_ratio < criteria.tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Collapsed,
    MaxIters,
    NumericFailure,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Collapsed => "collapsed",
            StopReason::MaxIters => "max_iters",
            StopReason::NumericFailure => "numeric_failure",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "collapsed" => Ok(StopReason::Collapsed),
            "max_iters" => Ok(StopReason::MaxIters),
            "numeric_failure" => Ok(StopReason::NumericFailure),
            other => Err(Error::Format(format!("unknown stop reason {other:?}"))),
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything that evolves during one run.
pub struct SelfTrainState {
    pub model: ModelState,
    pub adam: AdamState,
    /// Completed update steps.
    pub iteration: u64,
    /// Sequences generated so far; equals `iteration` between steps.
    pub generated: u64,
    pub seed: u64,
    pub sample_rng: StreamRng,
    pub dropout_rng: StreamRng,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub stop: StopCriteria,
}

impl SelfTrainState {
    pub fn new(
        model: ModelState,
        seed: u64,
        sampling: SamplingConfig,
        train: TrainConfig,
        stop: StopCriteria,
    ) -> Result<Self> {
        sampling.validate()?;
        train.validate()?;
        stop.validate()?;
        Ok(SelfTrainState {
            adam: AdamState::new(model.params()),
            model,
            iteration: 0,
            generated: 0,
            seed,
            sample_rng: rng::stream(seed, Stream::Sample),
            dropout_rng: rng::stream(seed, Stream::Dropout),
            sampling,
            train,
            stop,
        })
    }

    /// Model weights, Adam moments, counters and RNG positions. Configs are
    /// not included; they live in `run.meta`.
    pub fn to_container(&self) -> Container {
        let mut c = self.model.to_container();
        c.meta[0].1 = "snapshot".into();
        c.meta.extend([
            ("seed".into(), self.seed.to_string()),
            ("iteration".into(), self.iteration.to_string()),
            ("generated".into(), self.generated.to_string()),
            ("adam_t".into(), self.adam.t.to_string()),
            ("sample_rng_pos".into(), rng::position(&self.sample_rng).to_string()),
            ("dropout_rng_pos".into(), rng::position(&self.dropout_rng).to_string()),
        ]);
        for (tag, bufs) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for ((name, p), buf) in self.model.names().iter().zip(self.model.params()).zip(bufs) {
                let t = Tensor::new(p.shape().to_vec(), buf.clone()).expect("moment matches parameter");
                c.tensors.push((format!("adam.{tag}.{name}"), t));
            }
        }
        c
    }

    pub fn from_container(
        c: &Container,
        sampling: SamplingConfig,
        train: TrainConfig,
        stop: StopCriteria,
    ) -> Result<Self> {
        if c.get("kind") != Some("snapshot") {
            return Err(Error::Format("container is not a self-training snapshot".into()));
        }
        let model = ModelState::from_container(c)?;
        let n = model.params().len();
        if c.tensors.len() != 3 * n {
            return Err(Error::Format(format!(
                "snapshot holds {} tensors, expected {}",
                c.tensors.len(),
                3 * n
            )));
        }
        let moments = |tag: &str, range: std::ops::Range<usize>| -> Result<Vec<Vec<f32>>> {
            c.tensors[range]
                .iter()
                .zip(model.names())
                .map(|((name, t), pname)| {
                    if *name != format!("adam.{tag}.{pname}") {
                        return Err(Error::Format(format!("unexpected snapshot tensor {name}")));
                    }
                    Ok(t.data().to_vec())
                })
                .collect()
        };
        let adam = AdamState {
            m: moments("m", n..2 * n)?,
            v: moments("v", 2 * n..3 * n)?,
            t: c.parse("adam_t")?,
        };
        let seed = c.parse("seed")?;
        let mut s = SelfTrainState::new(model, seed, sampling, train, stop)?;
        s.adam = adam;
        s.iteration = c.parse("iteration")?;
        s.generated = c.parse("generated")?;
        s.sample_rng = rng::restore(seed, Stream::Sample, c.parse("sample_rng_pos")?);
        s.dropout_rng = rng::restore(seed, Stream::Dropout, c.parse("dropout_rng_pos")?);
        Ok(s)
    }
}

/// Next-token training pairs for a generated sequence `s`: the inputs are
/// `[START] + s[..n-1]`, the targets are `s`, cut into consecutive windows
/// of at most `block_size` positions.
pub fn training_windows(sample: &[u32], block_size: usize) -> (Vec<u32>, Vec<usize>, Segments) {
    let mut input = Vec::with_capacity(sample.len());
    input.push(START_TOKEN);
    input.extend_from_slice(&sample[..sample.len().saturating_sub(1)]);
    let targets = sample.iter().map(|&t| t as usize).collect();
    let lens = (0..sample.len())
        .step_by(block_size)
        .map(|s| block_size.min(sample.len() - s))
        .collect();
    (input, targets, Segments::new(lens))
}

/// Mean cross-entropy of `sample` under `model` with the windowing used for
/// training, without touching any state.
pub fn score_sample(model: &ModelState, sample: &[u32]) -> Result<f64> {
    let (input, targets, segs) = training_windows(sample, model.config().block_size);
    let mut tape = Tape::new();
    let logits = model.forward_tape(&mut tape, &input, &segs, Mode::Eval)?;
    Ok(tape.cross_entropy(logits, &targets)?.1)
}

/// What one step produced, before validation is attached.
pub struct StepOutput {
    pub sample: TokenSequence,
    pub metrics: CollapseMetrics,
    pub clip_scale: f32,
}

/// One iteration: generate from the current weights with an empty prompt,
/// score the sample in a single batched forward, backpropagate, clip, and
/// apply exactly one Adam update.
pub fn self_train_step(state: &mut SelfTrainState) -> Result<StepOutput> {
    let sample = generate(&state.model, &state.sampling, &mut state.sample_rng)?;
    state.generated += 1;
    let (input, targets, segs) = training_windows(sample.ids(), state.model.config().block_size);
    let mut tape = Tape::new();
    let logits = state.model.forward_tape(
        &mut tape,
        &input,
        &segs,
        Mode::Train(&mut state.dropout_rng),
    )?;
    let (loss_node, loss) = tape.cross_entropy(logits, &targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    tape.backward(loss_node)?;
    state.model.zero_grad();
    tape.accumulate_param_grads(state.model.params_mut())?;
    drop(tape);
    let clip_scale = match state.train.grad_clip {
        Some(c) => clip_grad_norm(state.model.params_mut(), c)?,
        None => {
            crate::optim::global_grad_norm(state.model.params())?;
            1.0
        }
    };
    adam_step(state.model.params_mut(), &mut state.adam, &state.train)?;
    state.model.zero_grad();
    state.iteration += 1;
    debug_assert_eq!(state.adam.t, state.iteration);
    debug_assert_eq!(state.generated, state.iteration);
    let metrics = CollapseMetrics::compute(sample.ids(), loss);
    Ok(StepOutput {
        sample,
        metrics,
        clip_scale,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Validate every `val_stride` iterations (and always on the last).
    pub val_stride: u64,
    /// Write a snapshot every this many iterations when an output directory
    /// is given.
    pub snapshot_every: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            val_stride: 1,
            snapshot_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    /// Error text when the run stopped on a numeric failure.
    pub failure: Option<String>,
}

impl RunOutcome {
    /// Iteration of the last record when the run collapsed.
    pub fn collapse_iteration(&self) -> Option<u64> {
        match self.stop_reason {
            StopReason::Collapsed => self.records.last().map(|r| r.iteration),
            _ => None,
        }
    }
}

/// Loops [`self_train_step`] and validates on every corpus after each
/// update until collapse, the iteration cap, or a numeric failure. When
/// `out_dir` is given, records and samples are written as they are produced.
pub fn run_self_training(
    state: &mut SelfTrainState,
    evals: &[(Corpus, EvalWindows)],
    opts: &RunOptions,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    if opts.val_stride == 0 {
        return Err(Error::Config("val_stride must be at least 1".into()));
    }
    let names: Vec<String> = evals.iter().map(|(c, _)| c.name.clone()).collect();
    let mut writer = out_dir.map(|d| RecordWriter::create(d, &names)).transpose()?;
    let mut records = Vec::new();
    let mut history = Vec::new();
    let numeric = |e: Error, records: Vec<IterationRecord>| match e {
        Error::NonFinite(_) => Ok(RunOutcome {
            records,
            stop_reason: StopReason::NumericFailure,
            failure: Some(e.to_string()),
        }),
        other => Err(other),
    };
    while state.iteration < state.stop.max_iters {
        let started = Instant::now();
        let index = state.iteration;
        let step = match self_train_step(state) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("iteration {index}: {e}");
                return numeric(e, records);
            }
        };
        history.push(step.metrics);
        let collapsed = detect_collapse(&history, &state.stop);
        let last = collapsed || state.iteration >= state.stop.max_iters;
        let mut val_losses = vec![None; evals.len()];
        if index % opts.val_stride == 0 || last {
            for (slot, (corpus, windows)) in val_losses.iter_mut().zip(evals) {
                match eval_val_loss(&state.model, corpus, windows) {
                    Ok(l) => *slot = Some(l),
                    Err(e) => return numeric(e, records),
                }
            }
        }
        let record = IterationRecord {
            iteration: index,
            val_losses,
            metrics: step.metrics,
            clip_scale: step.clip_scale,
            collapsed,
            sample_file: records::sample_file_name(index),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::debug!(
            "iter {index} train {:.4} distinct4 {:.4} val {:?}",
            record.train_loss(),
            record.metrics.distinct_4gram_ratio,
            record.val_losses
        );
        if let Some(w) = writer.as_mut() {
            w.append(&record, &decode_bytes(&step.sample)?)?;
        }
        if let (Some(dir), Some(every)) = (out_dir, opts.snapshot_every) {
            if every > 0 && state.iteration % every == 0 {
                let p = dir.join("snapshots").join(format!("iter_{}.ckpt", state.iteration));
                std::fs::create_dir_all(p.parent().expect("has parent"))
                    .map_err(|e| Error::io(&p, e))?;
                state.to_container().write(&p)?;
            }
        }
        records.push(record);
        if collapsed {
            return Ok(RunOutcome {
                records,
                stop_reason: StopReason::Collapsed,
                failure: None,
            });
        }
    }
    Ok(RunOutcome {
        records,
        stop_reason: StopReason::MaxIters,
        failure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn m(r: f64) -> CollapseMetrics {
        CollapseMetrics {
            distinct_4gram_ratio: r,
            max_token_fraction: 0.0,
            token_entropy: 0.0,
            train_loss: 0.0,
        }
    }

    #[test]
    fn collapse_needs_consecutive_low_ratios() {
        let c = StopCriteria::default();
        assert!(detect_collapse(&[m(0.05), m(0.04), m(0.02)], &c));
        assert!(!detect_collapse(&[m(0.05), m(0.5), m(0.05)], &c));
        assert!(!detect_collapse(&[m(0.05), m(0.05)], &c));
        assert!(detect_collapse(&[m(0.9), m(0.05), m(0.04), m(0.02)], &c));
    }

    #[test]
    fn dash_newline_loop_trips_the_detector() {
        let ids: Vec<u32> = b"-\n".repeat(100).iter().map(|&b| b as u32).collect();
        let c = StopCriteria::default();
        let mut hist = Vec::new();
        for i in 0..3 {
            hist.push(CollapseMetrics::compute(&ids, 0.0));
            assert_eq!(detect_collapse(&hist, &c), i == 2);
        }
    }

    #[test]
    fn windows_cover_every_token() {
        let s: Vec<u32> = (0..200).map(|i| i % 256).collect();
        let (input, targets, segs) = training_windows(&s, 100);
        assert_eq!(segs.lens(), &[100, 100]);
        assert_eq!(input[0], START_TOKEN);
        assert_eq!(&input[1..], &s[..199]);
        assert_eq!(targets.len(), 200);
        let (_, _, segs) = training_windows(&s[..150], 100);
        assert_eq!(segs.lens(), &[100, 50]);
    }

    fn state(lr: f32, seed: u64) -> SelfTrainState {
        let model = ModelState::init(&ModelConfig::tiny(), seed).unwrap();
        SelfTrainState::new(
            model,
            seed,
            SamplingConfig {
                max_new_tokens: 40,
                ..SamplingConfig::default()
            },
            TrainConfig {
                learning_rate: lr,
                ..TrainConfig::default()
            },
            StopCriteria {
                max_iters: 4,
                ..StopCriteria::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_weights_and_advances_adam() {
        let mut s = state(0.0, 1);
        let before = s.model.clone();
        self_train_step(&mut s).unwrap();
        assert!(s.model.same_weights(&before));
        assert_eq!((s.adam.t, s.iteration, s.generated), (1, 1, 1));
    }

    #[test]
    fn train_loss_is_the_pre_update_score() {
        let mut s = state(1e-3, 2);
        let before = s.model.clone();
        let out = self_train_step(&mut s).unwrap();
        let pre = score_sample(&before, out.sample.ids()).unwrap();
        assert_eq!(out.metrics.train_loss.to_bits(), pre.to_bits());
        let post = score_sample(&s.model, out.sample.ids()).unwrap();
        assert!(post < pre);
    }

    #[test]
    fn one_cap_iteration_gives_one_record() {
        let mut s = state(1e-4, 3);
        s.stop.max_iters = 1;
        let out = run_self_training(&mut s, &[], &RunOptions::default(), None).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.stop_reason, StopReason::MaxIters);
    }

    #[test]
    fn snapshot_resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut straight = state(1e-3, 4);
        let full = run_self_training(&mut straight, &[], &RunOptions::default(), None).unwrap();

        let mut first = state(1e-3, 4);
        first.stop.max_iters = 2;
        let opts = RunOptions {
            val_stride: 1,
            snapshot_every: Some(2),
        };
        let head = run_self_training(&mut first, &[], &opts, Some(dir.path())).unwrap();
        let c = Container::read(&dir.path().join("snapshots/iter_2.ckpt")).unwrap();
        let mut resumed = SelfTrainState::from_container(
            &c,
            first.sampling.clone(),
            first.train.clone(),
            StopCriteria {
                max_iters: 4,
                ..StopCriteria::default()
            },
        )
        .unwrap();
        assert!(resumed.adam.bit_identical(&first.adam));
        assert!(resumed.model.same_weights(&first.model));
        let tail = run_self_training(&mut resumed, &[], &RunOptions::default(), None).unwrap();
        let strip = |r: &IterationRecord| IterationRecord { wall_ms: 0, ..r.clone() };
        let joined: Vec<_> = head.records.iter().chain(&tail.records).map(strip).collect();
        let want: Vec<_> = full.records.iter().map(strip).collect();
        assert_eq!(joined, want);
        assert!(resumed.model.same_weights(&straight.model));
        assert!(resumed.adam.bit_identical(&straight.adam));
    }

    #[test]
    fn stop_reason_round_trips() {
        for r in [StopReason::Collapsed, StopReason::MaxIters, StopReason::NumericFailure] {
            assert_eq!(StopReason::parse(r.as_str()).unwrap(), r);
        }
    }
}
