use crate::error::{Error, Result};
use crate::tokenizer::BYTE_VOCAB_SIZE;

/// Architecture hyperparameters of the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
    /// Maximum context length.
    pub block_size: usize,
    pub vocab_size: usize,
    pub dropout: f32,
    pub bias: bool,
}

/// Named presets. `tiny`, `small` and `medium` are byte-level desk-scale
/// models; `paper-default` is the 124M GPT-2 shape with its 50257-entry
/// vocabulary and a 100-token context.
pub const PRESETS: [&str; 4] = ["tiny", "small", "medium", "paper-default"];

impl ModelConfig {
    fn desk(n_layer: usize, n_head: usize, n_embd: usize) -> Self {
        ModelConfig {
            n_layer,
            n_head,
            n_embd,
            block_size: 100,
            vocab_size: BYTE_VOCAB_SIZE,
            dropout: 0.0,
            bias: false,
        }
    }

    pub fn tiny() -> Self {
        Self::desk(2, 2, 64)
    }

    pub fn small() -> Self {
        Self::desk(4, 4, 128)
    }

    pub fn medium() -> Self {
        Self::desk(6, 6, 192)
    }

    pub fn paper_default() -> Self {
        ModelConfig {
            vocab_size: 50257,
            ..Self::desk(12, 12, 768)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "medium" => Ok(Self::medium()),
            "paper-default" => Ok(Self::paper_default()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {PRESETS:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layer == 0 || self.n_head == 0 || self.n_embd == 0 {
            return fail(format!(
                "n_layer, n_head and n_embd must be positive (got {}, {}, {})",
                self.n_layer, self.n_head, self.n_embd
            ));
        }
        if self.n_embd % self.n_head != 0 {
            return fail(format!(
                "n_embd {} is not divisible by n_head {}",
                self.n_embd, self.n_head
            ));
        }
        if self.block_size < 2 {
            return fail(format!("block_size {} must be at least 2", self.block_size));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.n_embd / self.n_head
    }
}
