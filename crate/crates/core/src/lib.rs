//! A desk-scale laboratory for language-model self-training.
//!
//! A small GPT-style decoder is pretrained on a text corpus, then repeatedly
//! fine-tuned on sequences it sampled itself: one generated sequence and one
//! optimizer step per iteration. The crate measures what happens next, which
//! is that held-out loss climbs while the model's loss on its own output falls
//! toward zero and its samples degenerate into loops.

pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod optim;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod selftrain;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
