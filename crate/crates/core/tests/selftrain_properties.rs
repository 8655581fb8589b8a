//! End-to-end properties of the self-training loop on the tiny preset.

use selfloop::eval::Corpus;
use selfloop::experiments::{pretrain, PretrainConfig};
use selfloop::model::{ModelConfig, ModelState};
use selfloop::optim::TrainConfig;
use selfloop::sampler::SamplingConfig;
use selfloop::selftrain::{score_sample, self_train_step, SelfTrainState, StopCriteria};
use selfloop::tokenizer::START_TOKEN;

fn state(model: ModelState, seed: u64, lr: f32) -> SelfTrainState {
    SelfTrainState::new(
        model,
        seed,
        SamplingConfig::default(),
        TrainConfig {
            learning_rate: lr,
            ..TrainConfig::default()
        },
        StopCriteria::default(),
    )
    .unwrap()
}

/// A tiny model that has only ever seen the start byte repeated, so it
/// emits a constant stream from the empty prompt.
fn constant_stream_model() -> ModelState {
    let config = ModelConfig::tiny();
    let text = vec![START_TOKEN as u8; 2000];
    let corpus = Corpus::from_bytes("a", &text, config.block_size).unwrap();
    let cfg = PretrainConfig {
        steps: 8,
        batch_size: 2,
        train: TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        },
        ..PretrainConfig::default()
    };
    pretrain(&config, &corpus, None, &cfg, None).unwrap().model
}

#[test]
fn constant_stream_train_loss_goes_to_zero() {
    let base = constant_stream_model();
    let mut below = 0;
    let mut report = Vec::new();
    for seed in 0..5 {
        let mut s = state(base.clone(), seed, 1e-3);
        let first = self_train_step(&mut s).unwrap();
        let mut last = None;
        for _ in 0..20 {
            last = Some(self_train_step(&mut s).unwrap());
        }
        let out = last.unwrap();
        let constant = out.sample.ids().iter().all(|&t| t == START_TOKEN);
        let (l0, l20) = (first.metrics.train_loss, out.metrics.train_loss);
        report.push((l0, l20, constant));
        if l20 < 0.01 && l20 < l0 {
            below += 1;
        }
    }
    assert!(below >= 3, "(first loss, loss after 20 iterations, constant): {report:?}");
}

#[test]
fn small_step_does_not_raise_the_loss_on_its_own_sample() {
    let mut deltas = Vec::new();
    for seed in 0..5 {
        let model = ModelState::init(&ModelConfig::tiny(), seed).unwrap();
        let mut s = state(model, seed, 1e-4);
        let out = self_train_step(&mut s).unwrap();
        let post = score_sample(&s.model, out.sample.ids()).unwrap();
        deltas.push(post - out.metrics.train_loss);
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    assert!(mean <= 0.0, "post - pre per seed: {deltas:?}");
}
