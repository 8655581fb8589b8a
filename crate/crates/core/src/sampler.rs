//! Temperature / top-k sampling and autoregressive generation.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::model::infer::{last_logits, Decoder};
use crate::model::ModelState;
use crate::tokenizer::{encode, TokenSequence, START_TOKEN};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f32,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub prompt: String,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.8,
            top_k: 500,
            max_new_tokens: 200,
            prompt: String::new(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.top_k == 0 || self.max_new_tokens == 0 {
            return Err(Error::Config("top_k and max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Indices of the `k` largest logits, ties broken toward the lower index.
pub fn top_k_indices(logits: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    if k < logits.len() {
        idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

/// The distribution [`sample_next`] draws from, as `(token, probability)`
/// pairs in ascending token order.
pub fn next_token_distribution(logits: &[f32], temperature: f32, top_k: usize) -> Vec<(usize, f64)> {
    let kept = top_k_indices(logits, top_k.min(logits.len()));
    let t = temperature as f64;
    let max = kept
        .iter()
        .map(|&i| logits[i] as f64 / t)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = kept
        .iter()
        .map(|&i| (logits[i] as f64 / t - max).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    kept.into_iter()
        .zip(weights)
        .map(|(i, w)| (i, w / total))
        .collect()
}

/// Draws one token: scale by `1/temperature`, keep the `top_k` largest
/// logits (clamped to the vocabulary), renormalize, and invert the CDF with
/// exactly one uniform draw.
pub fn sample_next<R: RngCore + ?Sized>(logits: &[f32], cfg: &SamplingConfig, rng: &mut R) -> usize {
    let dist = next_token_distribution(logits, cfg.temperature, cfg.top_k);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in &dist {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum a hair under one.
    dist.last().map(|&(i, _)| i).unwrap_or(0)
}

/// Samples `max_new_tokens` tokens. The prompt (or the start byte when the
/// prompt is empty) is context only and is not returned. Once the context
/// outgrows the block, the model sees only the most recent `block_size`
/// tokens.
pub fn generate<R: RngCore + ?Sized>(
    model: &ModelState,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<TokenSequence> {
    cfg.validate()?;
    let block = model.config().block_size;
    let mut context: Vec<u32> = if cfg.prompt.is_empty() {
        vec![START_TOKEN]
    } else {
        encode(&cfg.prompt).into_ids()
    };
    if context.len() > block {
        context.drain(..context.len() - block);
    }
    let mut decoder = Decoder::new(model);
    let mut logits = Vec::new();
    for &id in &context {
        logits = decoder.push(id)?;
    }
    let prefix = context.len();
    for step in 0..cfg.max_new_tokens {
        let next = sample_next(&logits, cfg, rng) as u32;
        context.push(next);
        if step + 1 == cfg.max_new_tokens {
            break;
        }
        logits = if context.len() <= block {
            decoder.push(next)?
        } else {
            last_logits(model, &context[context.len() - block..])?
        };
    }
    Ok(TokenSequence::new(context.split_off(prefix)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand::RngCore;

    fn cfg(temperature: f32, top_k: usize) -> SamplingConfig {
        SamplingConfig {
            temperature,
            top_k,
            ..SamplingConfig::default()
        }
    }

    #[test]
    fn top_one_is_argmax() {
        let logits = [0.1, 3.0, -1.0, 2.9];
        let mut rng = stream(1, Stream::Sample);
        for _ in 0..50 {
            assert_eq!(sample_next(&logits, &cfg(0.8, 1), &mut rng), 1);
        }
    }

    #[test]
    fn top_k_beyond_vocab_is_clamped() {
        let logits: Vec<f32> = (0..256).map(|i| ((i * 37) % 11) as f32 * 0.3).collect();
        let mut a = stream(2, Stream::Sample);
        let mut b = stream(2, Stream::Sample);
        for _ in 0..200 {
            assert_eq!(
                sample_next(&logits, &cfg(0.8, 500), &mut a),
                sample_next(&logits, &cfg(0.8, 256), &mut b)
            );
        }
    }

    #[test]
    fn two_class_frequencies_match_truncated_softmax() {
        // Oracle: softmax of [2, 1] / 0.8 by hand.
        let p0 = 1.0 / (1.0 + (-1.0f64 / 0.8).exp());
        let logits = [2.0, 1.0, 0.0, -1.0];
        let mut rng = stream(3, Stream::Sample);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_next(&logits, &cfg(0.8, 2), &mut rng)] += 1;
        }
        assert_eq!(counts[2] + counts[3], 0);
        let f0 = counts[0] as f64 / n as f64;
        let tv = (f0 - p0).abs();
        assert!(tv < 0.02, "tv {tv}");
    }

    struct CountingRng<R>(R, usize);
    impl<R: RngCore> RngCore for CountingRng<R> {
        fn next_u32(&mut self) -> u32 {
            self.1 += 1;
            self.0.next_u32()
        }
        fn next_u64(&mut self) -> u64 {
            self.1 += 1;
            self.0.next_u64()
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            self.1 += 1;
            self.0.fill_bytes(dst)
        }
    }

    #[test]
    fn generation_length_determinism_and_draw_count() {
        let m = ModelState::init(&ModelConfig::tiny(), 0).unwrap();
        let c = SamplingConfig::default();
        let mut r1 = CountingRng(stream(9, Stream::Sample), 0);
        let a = generate(&m, &c, &mut r1).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(r1.1, 200);
        let b = generate(&m, &c, &mut stream(9, Stream::Sample)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_model_emits_only_its_favourite_token() {
        // Every normalized hidden state is sqrt(63) * e0 (plus a constant
        // shift), so this puts a +50 logit margin on byte 45 everywhere.
        let mut m = ModelState::zeroed(&ModelConfig::tiny()).unwrap();
        let d = m.config().n_embd;
        let wpe = m.param_mut("wpe").unwrap();
        for row in wpe.data_mut().chunks_mut(d) {
            row[0] = 1.0;
        }
        let wte = m.param_mut("wte").unwrap();
        wte.data_mut()[45 * d] = 50.0 / 63f32.sqrt();
        let seq = generate(&m, &SamplingConfig::default(), &mut stream(4, Stream::Sample)).unwrap();
        assert_eq!(seq.len(), 200);
        assert!(seq.ids().iter().all(|&t| t == 45), "{:?}", seq.ids());
    }

    proptest! {
        #[test]
        fn never_emits_outside_top_k(
            logits in proptest::collection::vec(-5.0f32..5.0, 2..40),
            k in 1usize..10,
            seed in any::<u64>(),
            temp in 0.2f32..2.0,
        ) {
            let allowed = top_k_indices(&logits, k.min(logits.len()));
            let mut rng = stream(seed, Stream::Sample);
            for _ in 0..20 {
                let t = sample_next(&logits, &cfg(temp, k), &mut rng);
                prop_assert!(allowed.contains(&t));
            }
        }
    }
}
