//! GPT-2-family decoder: parameter schema, initialization and the
//! differentiable forward pass.
//!
//! Parameter names follow the GPT-2 layout. Linear weights are stored
//! `[in x out]` so activations multiply them on the left, and the output head
//! reuses the token embedding (`logits = x * wte^T`).
//!
//! | name                          | shape            |
//! |-------------------------------|------------------|
//! | `wte`                         | `[V, d]`         |
//! | `wpe`                         | `[block, d]`     |
//! | `h.{i}.ln_1.weight` (`.bias`) | `[d]`            |
//! | `h.{i}.attn.c_attn.weight`    | `[d, 3d]`        |
//! | `h.{i}.attn.c_attn.bias`      | `[3d]`           |
//! | `h.{i}.attn.c_proj.weight`    | `[d, d]`         |
//! | `h.{i}.attn.c_proj.bias`      | `[d]`            |
//! | `h.{i}.ln_2.weight` (`.bias`) | `[d]`            |
//! | `h.{i}.mlp.c_fc.weight`       | `[d, 4d]`        |
//! | `h.{i}.mlp.c_fc.bias`         | `[4d]`           |
//! | `h.{i}.mlp.c_proj.weight`     | `[4d, d]`        |
//! | `h.{i}.mlp.c_proj.bias`       | `[d]`            |
//! | `ln_f.weight` (`.bias`)       | `[d]`            |
//!
//! Bias entries exist only when `ModelConfig::bias` is set.

pub mod checkpoint;
mod config;
pub mod infer;

pub use config::{ModelConfig, PRESETS};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Stream, StreamRng};
use crate::tensor::kernels::{AttnShape, Segments};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::tokenizer::{TokenSequence, VocabKind};

const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal(f32),
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockSlots {
    pub ln1_g: usize,
    pub ln1_b: Option<usize>,
    pub attn_w: usize,
    pub attn_b: Option<usize>,
    pub proj_w: usize,
    pub proj_b: Option<usize>,
    pub ln2_g: usize,
    pub ln2_b: Option<usize>,
    pub fc_w: usize,
    pub fc_b: Option<usize>,
    pub mlp_proj_w: usize,
    pub mlp_proj_b: Option<usize>,
}

/// Where each parameter lives in the flat parameter list.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub wte: usize,
    pub wpe: usize,
    pub blocks: Vec<BlockSlots>,
    pub lnf_g: usize,
    pub lnf_b: Option<usize>,
}

struct SchemaBuilder {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl SchemaBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.entries.push((name, shape, init));
        self.entries.len() - 1
    }

    fn add_bias(&mut self, on: bool, name: String, len: usize) -> Option<usize> {
        on.then(|| self.add(name, vec![len], Init::Zeros))
    }
}

fn schema(config: &ModelConfig) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let d = config.n_embd;
    let bias = config.bias;
    let proj_std = INIT_STD / ((2 * config.n_layer) as f32).sqrt();
    let mut s = SchemaBuilder {
        entries: Vec::new(),
    };
    let wte = s.add("wte".into(), vec![config.vocab_size, d], Init::Normal(INIT_STD));
    let wpe = s.add("wpe".into(), vec![config.block_size, d], Init::Normal(INIT_STD));
    let mut blocks = Vec::with_capacity(config.n_layer);
    for i in 0..config.n_layer {
        let p = |suffix: &str| format!("h.{i}.{suffix}");
        let ln1_g = s.add(p("ln_1.weight"), vec![d], Init::Ones);
        let ln1_b = s.add_bias(bias, p("ln_1.bias"), d);
        let attn_w = s.add(p("attn.c_attn.weight"), vec![d, 3 * d], Init::Normal(INIT_STD));
        let attn_b = s.add_bias(bias, p("attn.c_attn.bias"), 3 * d);
        let proj_w = s.add(p("attn.c_proj.weight"), vec![d, d], Init::Normal(proj_std));
        let proj_b = s.add_bias(bias, p("attn.c_proj.bias"), d);
        let ln2_g = s.add(p("ln_2.weight"), vec![d], Init::Ones);
        let ln2_b = s.add_bias(bias, p("ln_2.bias"), d);
        let fc_w = s.add(p("mlp.c_fc.weight"), vec![d, 4 * d], Init::Normal(INIT_STD));
        let fc_b = s.add_bias(bias, p("mlp.c_fc.bias"), 4 * d);
        let mlp_proj_w = s.add(p("mlp.c_proj.weight"), vec![4 * d, d], Init::Normal(proj_std));
        let mlp_proj_b = s.add_bias(bias, p("mlp.c_proj.bias"), d);
        blocks.push(BlockSlots {
            ln1_g,
            ln1_b,
            attn_w,
            attn_b,
            proj_w,
            proj_b,
            ln2_g,
            ln2_b,
            fc_w,
            fc_b,
            mlp_proj_w,
            mlp_proj_b,
        });
    }
    let lnf_g = s.add("ln_f.weight".into(), vec![d], Init::Ones);
    let lnf_b = s.add_bias(bias, "ln_f.bias".into(), d);
    (
        s.entries,
        Layout {
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
        },
    )
}

/// Parameter names and shapes for `config`, in storage order.
pub fn parameter_schema(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    schema(config)
        .0
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect()
}

/// Whether a forward pass may use dropout.
pub enum Mode<'a> {
    Train(&'a mut StreamRng),
    Eval,
}

/// Full parameter set of one decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    vocab_kind: VocabKind,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

impl ModelState {
    /// Normal(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2 * n_layer)`, unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let (entries, layout) = schema(config);
        let mut names = Vec::with_capacity(entries.len());
        let mut params = Vec::with_capacity(entries.len());
        for (name, shape, init) in entries {
            let t = match init {
                Init::Ones => Tensor::full(&shape, 1.0),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0f32, std).expect("positive std");
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
                    Tensor::new(shape, data)?
                }
            };
            names.push(name);
            params.push(t);
        }
        Ok(ModelState {
            config: config.clone(),
            vocab_kind: VocabKind::Byte,
            names,
            params,
            layout,
        })
    }

    /// All weights zero and layer-norm gains one: a uniform predictor.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        let mut m = Self::init(config, 0)?;
        for (name, p) in m.names.iter().zip(m.params.iter_mut()) {
            let fill = if name.ends_with("ln_1.weight")
                || name.ends_with("ln_2.weight")
                || name == "ln_f.weight"
            {
                1.0
            } else {
                0.0
            };
            p.data_mut().fill(fill);
        }
        Ok(m)
    }

    /// Assembles a model from named tensors, which must match the schema of
    /// `config` exactly (same names, same order, same shapes).
    pub fn from_named(
        config: &ModelConfig,
        vocab_kind: VocabKind,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let (entries, layout) = schema(config);
        if entries.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for this config, found {}",
                entries.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((want, shape, _), (name, t)) in entries.into_iter().zip(named) {
            if want != name || shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match schema entry {want} {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(ModelState {
            config: config.clone(),
            vocab_kind,
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_kind(&self) -> VocabKind {
        self.vocab_kind
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Exact number of trainable scalars (the head is tied to `wte`).
    pub fn count_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// True when every parameter has bit-identical data.
    pub fn same_weights(&self, other: &ModelState) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    pub(crate) fn check_input(&self, ids: &[u32], segs: &Segments) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        if segs.total() != ids.len() {
            return Err(Error::Contract(format!(
                "segments cover {} tokens but {} were given",
                segs.total(),
                ids.len()
            )));
        }
        if let Some(&len) = segs.lens().iter().find(|&&l| l > self.config.block_size) {
            return Err(Error::ContextLength {
                len,
                block_size: self.config.block_size,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad as usize,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the `[rows x V]`
    /// logits node. Parameters enter as gradient-tracked leaves in train
    /// mode and as constants in eval mode.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        segs: &Segments,
        mode: Mode<'_>,
    ) -> Result<NodeId> {
        self.check_input(ids, segs)?;
        let train = matches!(mode, Mode::Train(_));
        let p: Vec<NodeId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| if train { tape.param(i, t) } else { tape.constant(t) })
            .collect();
        let mut dropout_rng = match mode {
            Mode::Train(r) => Some(r),
            Mode::Eval => None,
        };
        let drop = if dropout_rng.is_some() {
            self.config.dropout
        } else {
            0.0
        };
        let mut dropout = |tape: &mut Tape, x: NodeId| -> Result<NodeId> {
            match dropout_rng.as_deref_mut() {
                Some(r) => tape.dropout(x, drop, r),
                None => Ok(x),
            }
        };
        let lay = &self.layout;
        let opt = |slot: Option<usize>| slot.map(|s| p[s]);
        let ids_us: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = tape.embedding(p[lay.wte], &ids_us)?;
        let pos = tape.embedding(p[lay.wpe], &segs.positions())?;
        let mut x = tape.add(tok, pos)?;
        x = dropout(tape, x)?;
        let shape = AttnShape {
            n_embd: self.config.n_embd,
            n_head: self.config.n_head,
        };
        let linear = |tape: &mut Tape, x: NodeId, w: usize, b: Option<usize>| -> Result<NodeId> {
            let y = tape.matmul(x, p[w])?;
            match b {
                Some(b) => tape.add_bias(y, p[b]),
                None => Ok(y),
            }
        };
        for b in &lay.blocks {
            let h = tape.layer_norm(x, p[b.ln1_g], opt(b.ln1_b))?;
            let qkv = linear(tape, h, b.attn_w, b.attn_b)?;
            let a = tape.attention(qkv, segs, shape)?;
            let a = linear(tape, a, b.proj_w, b.proj_b)?;
            let a = dropout(tape, a)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, p[b.ln2_g], opt(b.ln2_b))?;
            let h = linear(tape, h, b.fc_w, b.fc_b)?;
            let h = tape.gelu(h)?;
            let h = linear(tape, h, b.mlp_proj_w, b.mlp_proj_b)?;
            let h = dropout(tape, h)?;
            x = tape.add(x, h)?;
        }
        let x = tape.layer_norm(x, p[lay.lnf_g], opt(lay.lnf_b))?;
        tape.matmul_nt(x, p[lay.wte])
    }

    /// Logits `[T x V]` for a single sequence of at most `block_size` tokens.
    pub fn forward(&self, tokens: &TokenSequence, mode: Mode<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let segs = Segments::single(tokens.len());
        if tokens.is_empty() {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        let logits = self.forward_tape(&mut tape, tokens.ids(), &segs, mode)?;
        Ok(tape.tensor(logits))
    }
}
