#![allow(dead_code)]

pub mod reference;

use rand::Rng;
use selfloop::model::{Mode, ModelConfig, ModelState};
use selfloop::rng::{stream, Stream};
use selfloop::tensor::kernels::Segments;
use selfloop::tensor::Tape;

/// Two layers, d = 16, T = 8, with biases so every parameter kind is covered.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        n_head: 2,
        n_embd: 16,
        block_size: 8,
        vocab_size: 256,
        dropout: 0.0,
        bias: true,
    }
}

/// Model with weights large enough that finite differences see real signal.
pub fn gradcheck_model(seed: u64) -> ModelState {
    let mut m = ModelState::init(&gradcheck_config(), seed).unwrap();
    let mut rng = stream(seed, Stream::Batches);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.3f32..0.3);
        }
    }
    m
}

/// Largest per-tensor relative error `|auto - fd| / max(|auto|, |fd|)`
/// between autodiff and central differences (step 1e-3), along with the
/// name of the worst tensor. The differences are taken on the f64 reference
/// decoder: in f32 the rounding noise of a 1e-3 step is itself about 1e-3.
pub fn max_param_rel_err(seed: u64) -> (f64, String) {
    let mut m = gradcheck_model(seed);
    let mut rng = stream(seed, Stream::Sample);
    let ids: Vec<u32> = (0..8).map(|_| rng.random_range(0..256)).collect();
    let targets: Vec<usize> = (0..8).map(|_| rng.random_range(0..256)).collect();

    let mut tape = Tape::new();
    let mut dummy = stream(seed, Stream::Dropout);
    let logits = m
        .forward_tape(&mut tape, &ids, &Segments::single(8), Mode::Train(&mut dummy))
        .unwrap();
    let (loss, _) = tape.cross_entropy(logits, &targets).unwrap();
    tape.backward(loss).unwrap();
    tape.accumulate_param_grads(m.params_mut()).unwrap();

    let h = 1e-3f64;
    let cfg = gradcheck_config();
    let base = reference::RefParams::from_model(&m);
    let ref_loss = |p: &reference::RefParams| {
        let l = reference::logits(p, cfg.n_layer, cfg.n_head, cfg.n_embd, &ids);
        reference::mean_cross_entropy(&l, cfg.vocab_size, &targets)
    };
    let mut worst = (0.0f64, String::new());
    for slot in 0..m.params().len() {
        let auto: Vec<f64> = m.params()[slot]
            .grad()
            .unwrap()
            .iter()
            .map(|&g| g as f64)
            .collect();
        let mut probe = base.clone();
        let mut num = Vec::with_capacity(auto.len());
        for i in 0..auto.len() {
            let orig = probe.values[slot][i];
            probe.values[slot][i] = orig + h;
            let up = ref_loss(&probe);
            probe.values[slot][i] = orig - h;
            let down = ref_loss(&probe);
            probe.values[slot][i] = orig;
            num.push((up - down) / (2.0 * h));
        }
        let diff: f64 = auto.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum();
        let na: f64 = auto.iter().map(|a| a * a).sum();
        let nb: f64 = num.iter().map(|b| b * b).sum();
        let rel = diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12);
        if std::env::var("GC_DEBUG").is_ok() {
            eprintln!("{:28} rel {rel:.2e} norm {:.3e}", m.names()[slot], na.sqrt());
        }
        if rel > worst.0 {
            worst = (rel, m.names()[slot].clone());
        }
    }
    worst
}
