//! Gradient-free forward passes used by evaluation and generation.
//!
//! These reuse the tape's kernels but keep no intermediates. [`Decoder`]
//! caches keys and values so that the first `block_size` generated tokens
//! cost one row each; once the window slides, every position shifts and
//! [`last_logits`] recomputes the window, skipping work that cannot reach
//! the final position.

use super::{BlockSlots, ModelState};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, AttnShape, Mat, Segments};

fn linear(m: &ModelState, x: &[f32], rows: usize, w: usize, b: Option<usize>) -> Vec<f32> {
    let wt = &m.params()[w];
    let (k, n) = (wt.shape()[0], wt.shape()[1]);
    let mut out = vec![0.0f32; rows * n];
    kernels::gemm(Mat::new(x, rows, k), Mat::new(wt.data(), k, n), &mut out, false);
    if let Some(b) = b {
        let bias = m.params()[b].data();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
    }
    out
}

fn norm(m: &ModelState, x: &[f32], g: usize, b: Option<usize>) -> Vec<f32> {
    let d = m.config().n_embd;
    let mut out = vec![0.0f32; x.len()];
    kernels::layer_norm(
        x,
        d,
        m.params()[g].data(),
        b.map(|b| m.params()[b].data()),
        &mut out,
        None,
    );
    out
}

fn add_into(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn mlp(m: &ModelState, b: &BlockSlots, x: &mut [f32], rows: usize) {
    let h = norm(m, x, b.ln2_g, b.ln2_b);
    let h = linear(m, &h, rows, b.fc_w, b.fc_b);
    let mut g = vec![0.0f32; h.len()];
    kernels::gelu_slice(&h, &mut g);
    let h = linear(m, &g, rows, b.mlp_proj_w, b.mlp_proj_b);
    add_into(x, &h);
}

fn head(m: &ModelState, x: &[f32], rows: usize) -> Vec<f32> {
    let lay = m.layout();
    let x = norm(m, x, lay.lnf_g, lay.lnf_b);
    let c = m.config();
    let mut out = vec![0.0f32; rows * c.vocab_size];
    kernels::gemm(
        Mat::new(&x, rows, c.n_embd),
        Mat::t(m.params()[lay.wte].data(), c.n_embd, c.vocab_size),
        &mut out,
        false,
    );
    out
}

fn embed(m: &ModelState, ids: &[u32], positions: &[usize]) -> Vec<f32> {
    let d = m.config().n_embd;
    let lay = m.layout();
    let wte = m.params()[lay.wte].data();
    let wpe = m.params()[lay.wpe].data();
    let mut x = Vec::with_capacity(ids.len() * d);
    for (&id, &pos) in ids.iter().zip(positions) {
        let t = &wte[id as usize * d..][..d];
        let p = &wpe[pos * d..][..d];
        x.extend(t.iter().zip(p).map(|(a, b)| a + b));
    }
    x
}

/// Attention output of a single query row against `len` cached key/value
/// rows (each `n_embd` wide, all heads side by side). Same arithmetic order
/// as the batched kernel.
fn attend_one(q: &[f32], keys: &[f32], values: &[f32], len: usize, shape: AttnShape, out: &mut [f32]) {
    let d = shape.n_embd;
    let hd = shape.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let mut p = vec![0.0f32; len];
    out.fill(0.0);
    for h in 0..shape.n_head {
        let qh = &q[h * hd..(h + 1) * hd];
        for (j, pj) in p.iter_mut().enumerate() {
            let k = &keys[j * d + h * hd..][..hd];
            *pj = kernels::dot(qh, k) * scale;
        }
        kernels::softmax_in_place(&mut p);
        let o = &mut out[h * hd..(h + 1) * hd];
        for (j, &pj) in p.iter().enumerate() {
            let v = &values[j * d + h * hd..][..hd];
            kernels::axpy(pj, v, o);
        }
    }
}

fn attn_shape(m: &ModelState) -> AttnShape {
    AttnShape {
        n_embd: m.config().n_embd,
        n_head: m.config().n_head,
    }
}

fn check_finite(v: &[f32], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Eval-mode logits `[rows x V]` for independent segments of `ids`.
pub fn logits(m: &ModelState, ids: &[u32], segs: &Segments) -> Result<Vec<f32>> {
    m.check_input(ids, segs)?;
    let rows = ids.len();
    let d = m.config().n_embd;
    let shape = attn_shape(m);
    let mut x = embed(m, ids, &segs.positions());
    for b in &m.layout().blocks {
        let h = norm(m, &x, b.ln1_g, b.ln1_b);
        let qkv = linear(m, &h, rows, b.attn_w, b.attn_b);
        let (a, _) = kernels::attention_forward(&qkv, segs, shape);
        let a = linear(m, &a, rows, b.proj_w, b.proj_b);
        add_into(&mut x, &a);
        mlp(m, b, &mut x, rows);
    }
    debug_assert_eq!(x.len(), rows * d);
    let out = head(m, &x, rows);
    check_finite(&out, "forward")?;
    Ok(out)
}

/// Eval-mode logits for the final position of one window only.
pub fn last_logits(m: &ModelState, ids: &[u32]) -> Result<Vec<f32>> {
    let segs = Segments::single(ids.len());
    m.check_input(ids, &segs)?;
    let rows = ids.len();
    let d = m.config().n_embd;
    let shape = attn_shape(m);
    let mut x = embed(m, ids, &segs.positions());
    let blocks = &m.layout().blocks;
    for (l, b) in blocks.iter().enumerate() {
        let h = norm(m, &x, b.ln1_g, b.ln1_b);
        let qkv = linear(m, &h, rows, b.attn_w, b.attn_b);
        if l + 1 < blocks.len() {
            let (a, _) = kernels::attention_forward(&qkv, &segs, shape);
            let a = linear(m, &a, rows, b.proj_w, b.proj_b);
            add_into(&mut x, &a);
            mlp(m, b, &mut x, rows);
        } else {
            // Only the last row feeds the head from here on.
            let mut keys = Vec::with_capacity(rows * d);
            let mut values = Vec::with_capacity(rows * d);
            for r in qkv.chunks(3 * d) {
                keys.extend_from_slice(&r[d..2 * d]);
                values.extend_from_slice(&r[2 * d..]);
            }
            let q = &qkv[(rows - 1) * 3 * d..][..d];
            let mut a = vec![0.0f32; d];
            attend_one(q, &keys, &values, rows, shape, &mut a);
            let a = linear(m, &a, 1, b.proj_w, b.proj_b);
            let mut last = x[(rows - 1) * d..].to_vec();
            add_into(&mut last, &a);
            mlp(m, b, &mut last, 1);
            x = last;
        }
    }
    let out = head(m, &x, 1);
    check_finite(&out, "forward")?;
    Ok(out)
}

/// Incremental decoder with a key/value cache, valid while the context
/// fits in one block.
pub struct Decoder<'m> {
    model: &'m ModelState,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m ModelState) -> Self {
        let l = model.config().n_layer;
        Decoder {
            model,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and returns the logits for the next position.
    pub fn push(&mut self, id: u32) -> Result<Vec<f32>> {
        let m = self.model;
        let c = m.config();
        if self.len >= c.block_size {
            return Err(Error::ContextLength {
                len: self.len + 1,
                block_size: c.block_size,
            });
        }
        if id as usize >= c.vocab_size {
            return Err(Error::Index {
                what: "vocabulary",
                index: id as usize,
                size: c.vocab_size,
            });
        }
        let d = c.n_embd;
        let shape = attn_shape(m);
        let mut x = embed(m, &[id], &[self.len]);
        for (l, b) in m.layout().blocks.iter().enumerate() {
            let h = norm(m, &x, b.ln1_g, b.ln1_b);
            let qkv = linear(m, &h, 1, b.attn_w, b.attn_b);
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let mut a = vec![0.0f32; d];
            attend_one(&qkv[..d], &self.keys[l], &self.values[l], self.len + 1, shape, &mut a);
            let a = linear(m, &a, 1, b.proj_w, b.proj_b);
            add_into(&mut x, &a);
            mlp(m, b, &mut x, 1);
        }
        self.len += 1;
        let out = head(m, &x, 1);
        check_finite(&out, "forward")?;
        Ok(out)
    }
}
