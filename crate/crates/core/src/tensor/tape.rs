use rand::Rng;

use super::kernels::{self, AttnShape, Mat, Segments};
use super::Tensor;
use crate::error::{Error, Result};

/// Identity of a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    param: Option<usize>,
}

enum Op {
    Matmul {
        a: NodeId,
        b: NodeId,
        b_transposed: bool,
        out: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
        out: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
        out: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: Option<NodeId>,
        mean: Vec<f32>,
        rstd: Vec<f32>,
        out: NodeId,
    },
    Gelu {
        x: NodeId,
        out: NodeId,
    },
    Softmax {
        x: NodeId,
        out: NodeId,
    },
    Attention {
        qkv: NodeId,
        segs: Segments,
        shape: AttnShape,
        probs: Vec<f32>,
        out: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f32>,
        out: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f32>,
        out: NodeId,
    },
    Sum {
        x: NodeId,
        out: NodeId,
    },
}

impl Op {
    fn out(&self) -> NodeId {
        match self {
            Op::Matmul { out, .. }
            | Op::Add { out, .. }
            | Op::AddBias { out, .. }
            | Op::Embedding { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Gelu { out, .. }
            | Op::Softmax { out, .. }
            | Op::Attention { out, .. }
            | Op::Dropout { out, .. }
            | Op::CrossEntropy { out, .. }
            | Op::Sum { out, .. } => *out,
        }
    }
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Leaves copy their data in; parameter leaves remember which slot of the
/// caller's parameter list they came from so that gradients can be added back
/// with [`Tape::accumulate_param_grads`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
}

fn check_finite(values: &[f32], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / cols.max(1), cols)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// A leaf whose gradient is wanted but which is not a model parameter.
    pub fn variable(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// A leaf bound to slot `slot` of the caller's parameter list.
    pub fn param(&mut self, slot: usize, t: &Tensor) -> NodeId {
        let id = self.variable(t);
        self.nodes[id.0].param = Some(slot);
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well formed")
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn record(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f32>,
        inputs: &[NodeId],
        name: &'static str,
        op: impl FnOnce(NodeId) -> Op,
    ) -> Result<NodeId> {
        check_finite(&value, name)?;
        let rg = self.requires(inputs);
        let out = self.push(shape, value, rg);
        self.ops.push(op(out));
        Ok(out)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, b_transposed: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = matrix_dims(&sa);
        let (br, bc) = matrix_dims(&sb);
        let (kb, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if sa.len() != 2 || sb.len() != 2 || k != kb {
            return Err(Error::Dimension {
                op: if b_transposed { "matmul_nt" } else { "matmul" },
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![0.0f32; m * n];
        let bm = if b_transposed {
            Mat::t(self.value(b), k, n)
        } else {
            Mat::new(self.value(b), k, n)
        };
        kernels::gemm(Mat::new(self.value(a), m, k), bm, &mut out, false);
        self.record(vec![m, n], out, &[a, b], "matmul", |out| Op::Matmul {
            a,
            b,
            b_transposed,
            out,
        })
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, &[a, b], "add", |out| Op::Add { a, b, out })
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, cols) = matrix_dims(self.shape(x));
        if self.value(bias).len() != cols {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x, bias], "add_bias", |out| Op::AddBias {
            x,
            bias,
            out,
        })
    }

    /// Gathers rows of `table[V x d]` into a `[ids.len() x d]` result.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = matrix_dims(self.shape(table));
        if ids.is_empty() {
            return Err(Error::Contract("embedding of an empty id list".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let ids = ids.to_vec();
        self.record(vec![ids.len(), d], out, &[table], "embedding", |out| {
            Op::Embedding { table, ids, out }
        })
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = matrix_dims(&shape);
        let bad = self.value(gain).len() != d
            || bias.is_some_and(|b| self.value(b).len() != d);
        if bad {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let mut out = vec![0.0f32; rows * d];
        let mut mean = vec![0.0f32; rows];
        let mut rstd = vec![0.0f32; rows];
        kernels::layer_norm(
            self.value(x),
            d,
            self.value(gain),
            bias.map(|b| self.value(b)),
            &mut out,
            Some((&mut mean, &mut rstd)),
        );
        let mut inputs = vec![x, gain];
        inputs.extend(bias);
        self.record(shape, out, &inputs, "layer_norm", |out| Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
            out,
        })
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = vec![0.0f32; self.value(x).len()];
        kernels::gelu_slice(self.value(x), &mut out);
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x], "gelu", |out| Op::Gelu { x, out })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        check_finite(self.value(x), "softmax input")?;
        let shape = self.shape(x).to_vec();
        let (_, n) = matrix_dims(&shape);
        let mut out = self.value(x).to_vec();
        kernels::softmax_rows(&mut out, n);
        self.record(shape, out, &[x], "softmax", |out| Op::Softmax { x, out })
    }

    /// Fused causal self-attention over packed `[q | k | v]` rows.
    pub fn attention(&mut self, qkv: NodeId, segs: &Segments, shape: AttnShape) -> Result<NodeId> {
        let (rows, cols) = matrix_dims(self.shape(qkv));
        if cols != 3 * shape.n_embd || rows != segs.total() || shape.n_embd % shape.n_head != 0 {
            return Err(Error::Dimension {
                op: "attention",
                lhs: self.shape(qkv).to_vec(),
                rhs: vec![segs.total(), 3 * shape.n_embd],
            });
        }
        let (out, probs) = kernels::attention_forward(self.value(qkv), segs, shape);
        let segs = segs.clone();
        self.record(vec![rows, shape.n_embd], out, &[qkv], "attention", |out| {
            Op::Attention {
                qkv,
                segs,
                shape,
                probs,
                out,
            }
        })
    }

    /// Inverted dropout. With `p == 0` the input node is returned untouched
    /// and no randomness is consumed.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f32, rng: &mut R) -> Result<NodeId> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f32> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x], "dropout", |out| Op::Dropout { x, mask, out })
    }

    /// Mean next-token cross-entropy in nats. Returns the scalar node and the
    /// loss accumulated in double precision.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<(NodeId, f64)> {
        let (rows, v) = matrix_dims(self.shape(logits));
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                size: v,
            });
        }
        check_finite(self.value(logits), "cross_entropy input")?;
        let (loss, probs) = cross_entropy_forward(self.value(logits), v, targets);
        let targets = targets.to_vec();
        let out = self.record(vec![1], vec![loss as f32], &[logits], "cross_entropy", |out| {
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                out,
            }
        })?;
        Ok((out, loss))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        self.record(vec![1], vec![s as f32], &[x], "sum", |out| Op::Sum { x, out })
    }

    /// Reverse sweep from the scalar `root`. Gradients from a previous call
    /// on this tape are discarded; use [`Tape::accumulate_param_grads`] to
    /// fold them into parameters.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            let Some(g) = self.grads[op.out().0].take() else {
                continue;
            };
            self.backward_op(op, &g);
            self.grads[op.out().0] = Some(g);
        }
        self.ops = ops;
        for (id, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if !self.nodes[id].requires_grad {
                    continue;
                }
                check_finite(g, "backward")?;
            }
        }
        Ok(())
    }

    /// Gradient of the last backward root w.r.t. `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds leaf gradients into `params[slot].grad`; unreached parameters get
    /// a zero buffer allocated but are otherwise left alone.
    pub fn accumulate_param_grads(&self, params: &mut [Tensor]) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(slot) = node.param else { continue };
            let p = params.get_mut(slot).ok_or(Error::Index {
                what: "parameter list",
                index: slot,
                size: 0,
            })?;
            if p.numel() != node.value.len() {
                return Err(Error::Dimension {
                    op: "accumulate_param_grads",
                    lhs: p.shape().to_vec(),
                    rhs: node.shape.clone(),
                });
            }
            let dst = p.grad_mut();
            if let Some(Some(g)) = self.grads.get(i) {
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    /// Gradient buffer for `id`, created zeroed when the node wants one.
    fn grad_slot(&mut self, id: NodeId) -> Option<&mut Vec<f32>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        // Sized from the shape: callers may have moved the value out.
        let n = self.nodes[id.0].shape.iter().product();
        Some(self.grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_op(&mut self, op: &Op, g: &[f32]) {
        match op {
            Op::Matmul {
                a,
                b,
                b_transposed,
                ..
            } => {
                let (m, k) = matrix_dims(self.shape(*a));
                let n = g.len() / m;
                if self.nodes[a.0].requires_grad {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let bt = if *b_transposed {
                        Mat::new(&bv, n, k)
                    } else {
                        Mat::t(&bv, n, k)
                    };
                    let da = self.grad_slot(*a).expect("requires grad");
                    kernels::gemm(Mat::new(g, m, n), bt, da, true);
                    self.nodes[b.0].value = bv;
                }
                if self.nodes[b.0].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let db = self.grad_slot(*b).expect("requires grad");
                    if *b_transposed {
                        kernels::gemm(Mat::t(g, n, m), Mat::new(&av, m, k), db, true);
                    } else {
                        kernels::gemm(Mat::t(&av, k, m), Mat::new(g, m, n), db, true);
                    }
                    self.nodes[a.0].value = av;
                }
            }
            Op::Add { a, b, .. } => {
                for id in [*a, *b] {
                    if let Some(d) = self.grad_slot(id) {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddBias { x, bias, .. } => {
                if let Some(d) = self.grad_slot(*x) {
                    for (a, b) in d.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                if let Some(d) = self.grad_slot(*bias) {
                    let cols = d.len();
                    for row in g.chunks(cols) {
                        for (a, b) in d.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Embedding { table, ids, .. } => {
                if let Some(d) = self.grad_slot(*table) {
                    let dim = g.len() / ids.len();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id * dim..(id + 1) * dim];
                        for (a, b) in dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
                ..
            } => {
                let d = self.value(*gain).len();
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                let gv = self.value(*gain).to_vec();
                let mut dx = self.grad_slot(*x).map(std::mem::take);
                let mut dgain = self.grad_slot(*gain).map(std::mem::take);
                let mut dbias = bias.and_then(|b| self.grad_slot(b).map(std::mem::take));
                kernels::layer_norm_backward(
                    &xv,
                    d,
                    &gv,
                    mean,
                    rstd,
                    g,
                    dx.as_deref_mut(),
                    dgain.as_deref_mut(),
                    dbias.as_deref_mut(),
                );
                self.nodes[x.0].value = xv;
                if let Some(v) = dx {
                    self.grads[x.0] = Some(v);
                }
                if let Some(v) = dgain {
                    self.grads[gain.0] = Some(v);
                }
                if let (Some(b), Some(v)) = (bias, dbias) {
                    self.grads[b.0] = Some(v);
                }
            }
            Op::Gelu { x, .. } => {
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                if let Some(d) = self.grad_slot(*x) {
                    for ((a, &xi), gi) in d.iter_mut().zip(&xv).zip(g) {
                        *a += gi * kernels::gelu_grad(xi);
                    }
                }
                self.nodes[x.0].value = xv;
            }
            Op::Softmax { x, out } => {
                let y = std::mem::take(&mut self.nodes[out.0].value);
                let (_, n) = matrix_dims(self.shape(*x));
                if let Some(d) = self.grad_slot(*x) {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
                self.nodes[out.0].value = y;
            }
            Op::Attention {
                qkv,
                segs,
                shape,
                probs,
                ..
            } => {
                let qv = std::mem::take(&mut self.nodes[qkv.0].value);
                if let Some(d) = self.grad_slot(*qkv) {
                    kernels::attention_backward(&qv, probs, g, segs, *shape, d);
                }
                self.nodes[qkv.0].value = qv;
            }
            Op::Dropout { x, mask, .. } => {
                if let Some(d) = self.grad_slot(*x) {
                    for ((a, m), gi) in d.iter_mut().zip(mask).zip(g) {
                        *a += gi * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                ..
            } => {
                if let Some(d) = self.grad_slot(*logits) {
                    let rows = targets.len();
                    let v = d.len() / rows;
                    let scale = g[0] / rows as f32;
                    for (r, &t) in targets.iter().enumerate() {
                        let pr = &probs[r * v..(r + 1) * v];
                        let dr = &mut d[r * v..(r + 1) * v];
                        for i in 0..v {
                            dr[i] += pr[i] * scale;
                        }
                        dr[t] -= scale;
                    }
                }
            }
            Op::Sum { x, .. } => {
                if let Some(d) = self.grad_slot(*x) {
                    for a in d.iter_mut() {
                        *a += g[0];
                    }
                }
            }
        }
    }
}

/// Mean cross-entropy (f64) and the row softmax of `logits`.
pub(crate) fn cross_entropy_forward(logits: &[f32], v: usize, targets: &[usize]) -> (f64, Vec<f32>) {
    let mut probs = logits.to_vec();
    let mut total = 0.0f64;
    for (row, &t) in probs.chunks_mut(v).zip(targets) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&z| ((z - max) as f64).exp()).sum::<f64>().ln() + max as f64;
        total += lse - row[t] as f64;
        kernels::softmax_in_place(row);
    }
    (total / targets.len() as f64, probs)
}
