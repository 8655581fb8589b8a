use std::collections::{HashMap, HashSet};

/// Repetition and diversity statistics of one generated sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseMetrics {
    /// Unique 4-grams divided by the number of 4-gram positions, `N - 3`.
    /// Sequences shorter than four tokens score 1.
    pub distinct_4gram_ratio: f64,
    /// Count of the most frequent token divided by `N`.
    pub max_token_fraction: f64,
    /// Entropy of the unigram distribution, in nats.
    pub token_entropy: f64,
    /// Cross-entropy of the sequence under the pre-update model, nats/token.
    pub train_loss: f64,
}

pub fn distinct_ngram_ratio(ids: &[u32], n: usize) -> f64 {
    if n == 0 || ids.len() < n {
        return 1.0;
    }
    let total = ids.len() - n + 1;
    let unique: HashSet<&[u32]> = ids.windows(n).collect();
    unique.len() as f64 / total as f64
}

fn unigram_counts(ids: &[u32]) -> HashMap<u32, usize> {
    let mut counts = HashMap::new();
    for &id in ids {
        *counts.entry(id).or_insert(0) += 1;
    }
    counts
}

pub fn max_token_fraction(ids: &[u32]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let max = unigram_counts(ids).into_values().max().unwrap_or(0);
    max as f64 / ids.len() as f64
}

pub fn token_entropy(ids: &[u32]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let n = ids.len() as f64;
    let mut counts: Vec<usize> = unigram_counts(ids).into_values().collect();
    counts.sort_unstable();
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}

impl CollapseMetrics {
    pub fn compute(ids: &[u32], train_loss: f64) -> Self {
        CollapseMetrics {
            distinct_4gram_ratio: distinct_ngram_ratio(ids, 4),
            max_token_fraction: max_token_fraction(ids),
            token_entropy: token_entropy(ids),
            train_loss,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_stream_has_one_four_gram() {
        let ids = vec![45u32; 200];
        let m = CollapseMetrics::compute(&ids, 0.0);
        assert!((m.distinct_4gram_ratio - 1.0 / 197.0).abs() < 1e-12);
        assert!((m.distinct_4gram_ratio - 0.0051).abs() < 1e-4);
        assert_eq!(m.max_token_fraction, 1.0);
        assert_eq!(m.token_entropy, 0.0);
    }

    #[test]
    fn dash_newline_loop() {
        let ids: Vec<u32> = b"-\n".repeat(100).iter().map(|&b| b as u32).collect();
        let m = CollapseMetrics::compute(&ids, 0.0);
        assert!((m.distinct_4gram_ratio - 2.0 / 197.0).abs() < 1e-12);
        assert_eq!(m.max_token_fraction, 0.5);
        assert!((m.token_entropy - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_distinct() {
        let ids: Vec<u32> = (0..50).collect();
        assert_eq!(distinct_ngram_ratio(&ids, 4), 1.0);
        assert!((token_entropy(&ids) - 50f64.ln()).abs() < 1e-12);
        assert_eq!(distinct_ngram_ratio(&[1, 2, 3], 4), 1.0);
    }

    proptest! {
        #[test]
        fn metrics_stay_in_range(ids in proptest::collection::vec(0u32..256, 1..300)) {
            let m = CollapseMetrics::compute(&ids, 1.0);
            prop_assert!((0.0..=1.0).contains(&m.distinct_4gram_ratio));
            prop_assert!(m.distinct_4gram_ratio > 0.0);
            prop_assert!((0.0..=1.0).contains(&m.max_token_fraction));
            prop_assert!(m.token_entropy >= 0.0 && m.token_entropy <= 256f64.ln() + 1e-12);
        }
    }
}
