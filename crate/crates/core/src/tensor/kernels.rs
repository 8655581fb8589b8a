//! Slice-level numeric kernels shared by the autodiff tape and the
//! inference path.
//!
//! Every kernel has a fixed reduction order that depends only on the shapes
//! involved, so identical inputs always give bit-identical outputs whether or
//! not the `parallel` feature is active.

use crate::par;

pub const LN_EPS: f32 = 1e-5;

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// A matrix operand: row-major storage, optionally read transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f32],
    /// Logical rows/cols, i.e. after the optional transpose.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Logical view of `data` (stored `cols x rows`) as its transpose.
    pub fn t(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

#[derive(Clone, Copy)]
struct SendPtr(*const f32);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

impl SendPtr {
    fn get(self) -> *const f32 {
        self.0
    }
}

/// `out = a * b` (or `out += a * b` when `accumulate`), `out` row-major `m x n`.
pub fn gemm(a: Mat, b: Mat, out: &mut [f32], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    if m == 1 {
        return gemv_row(a, b, out, accumulate);
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    let a_ptr = SendPtr(a.data.as_ptr());
    let b_ptr = SendPtr(b.data.as_ptr());
    let rows_per_task = if par::is_parallel() && m * n * k >= 1 << 20 {
        m.div_ceil(8).max(16)
    } else {
        m
    };
    par::for_each_chunk_mut(out, rows_per_task * n, |task, c| {
        let r0 = task * rows_per_task;
        let rows = c.len() / n;
        // SAFETY: operands are live slices whose extents were checked above;
        // each task writes only its own disjoint block of rows of `out`.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a_ptr.get().offset(r0 as isize * rsa),
                rsa,
                csa,
                b_ptr.get(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

// Single-row product; the packed gemm path is slow for one row.
fn gemv_row(a: Mat, b: Mat, out: &mut [f32], accumulate: bool) {
    let (k, n) = (a.cols, b.cols);
    // One logical row reads the same memory in either layout.
    let x = &a.data[..k];
    if !accumulate {
        out.fill(0.0);
    }
    if b.transposed {
        // b stored n x k: each output is a contiguous dot product.
        for (j, o) in out.iter_mut().enumerate() {
            let row = &b.data[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for (xv, bv) in x.iter().zip(row) {
                s += xv * bv;
            }
            *o += s;
        }
    } else {
        for (p, &xv) in x.iter().enumerate() {
            let row = &b.data[p * n..(p + 1) * n];
            for (o, bv) in out.iter_mut().zip(row) {
                *o += xv * bv;
            }
        }
    }
}

/// Dot product with eight running partial sums, combined in a fixed order,
/// so that the compiler can vectorize it without changing results between
/// call sites.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let (ac, ar) = a.split_at(a.len() - a.len() % 8);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Numerically stable softmax over each `n`-wide row, in place.
pub fn softmax_rows(x: &mut [f32], n: usize) {
    for row in x.chunks_mut(n) {
        softmax_in_place(row);
    }
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Per-row layer normalization. Optionally stores row means and reciprocal
/// standard deviations for the backward pass.
pub fn layer_norm(
    x: &[f32],
    d: usize,
    gain: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
    mut stats: Option<(&mut [f32], &mut [f32])>,
) {
    for (r, (xr, yr)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let mut mean = 0.0f32;
        for v in xr {
            mean += v;
        }
        mean /= d as f32;
        let mut var = 0.0f32;
        for v in xr {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f32;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..d {
            yr[i] = (xr[i] - mean) * rstd * gain[i];
        }
        if let Some(b) = bias {
            for i in 0..d {
                yr[i] += b[i];
            }
        }
        if let Some((m, s)) = stats.as_mut() {
            m[r] = mean;
            s[r] = rstd;
        }
    }
}

/// Accumulates layer-norm input, gain and bias gradients.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    x: &[f32],
    d: usize,
    gain: &[f32],
    mean: &[f32],
    rstd: &[f32],
    dy: &[f32],
    dx: Option<&mut [f32]>,
    dgain: Option<&mut [f32]>,
    dbias: Option<&mut [f32]>,
) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0f32; d];
    let mut dxhat = vec![0.0f32; d];
    let mut dx = dx;
    let mut dgain = dgain;
    let mut dbias = dbias;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for i in 0..d {
            xhat[i] = (xr[i] - mean[r]) * rstd[r];
            dxhat[i] = dyr[i] * gain[i];
            sum_dxhat += dxhat[i];
            sum_dxhat_xhat += dxhat[i] * xhat[i];
        }
        if let Some(g) = dgain.as_mut() {
            for i in 0..d {
                g[i] += dyr[i] * xhat[i];
            }
        }
        if let Some(b) = dbias.as_mut() {
            for i in 0..d {
                b[i] += dyr[i];
            }
        }
        if let Some(dx) = dx.as_mut() {
            let inv_d = 1.0 / d as f32;
            let dxr = &mut dx[r * d..(r + 1) * d];
            for i in 0..d {
                dxr[i] += rstd[r]
                    * (dxhat[i] - sum_dxhat * inv_d - xhat[i] * sum_dxhat_xhat * inv_d);
            }
        }
    }
}

/// `tanh` through a single `exp`; libm's `tanhf` dominated profiles.
#[inline]
fn fast_tanh(u: f32) -> f32 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + fast_tanh(u))
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_slice(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = gelu(v);
    }
}

/// Contiguous runs of rows that attend only within themselves; positions
/// restart at zero in every segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    lens: Vec<usize>,
}

impl Segments {
    pub fn new(lens: Vec<usize>) -> Self {
        debug_assert!(lens.iter().all(|&l| l > 0));
        Segments { lens }
    }

    pub fn single(len: usize) -> Self {
        Segments { lens: vec![len] }
    }

    pub fn uniform(count: usize, len: usize) -> Self {
        Segments {
            lens: vec![len; count],
        }
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    /// `(start_row, len)` for each segment.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.lens
            .iter()
            .map(|&l| {
                let s = (start, l);
                start += l;
                s
            })
            .collect()
    }

    /// Position of every row inside its segment.
    pub fn positions(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&l| 0..l).collect()
    }
}

/// Geometry of a fused causal self-attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub n_embd: usize,
    pub n_head: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.n_embd / self.n_head
    }
}

struct HeadOut {
    out: Vec<f32>,
    probs: Vec<f32>,
}

/// Causal multi-head attention over packed `[q | k | v]` rows.
///
/// Returns the `[rows x n_embd]` output and the attention probabilities,
/// stored per (segment, head) task as a dense `len x len` block.
pub fn attention_forward(qkv: &[f32], segs: &Segments, shape: AttnShape) -> (Vec<f32>, Vec<f32>) {
    let d = shape.n_embd;
    let hd = shape.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let tasks: Vec<(usize, usize, usize)> = segs
        .spans()
        .into_iter()
        .flat_map(|(s, l)| (0..shape.n_head).map(move |h| (s, l, h)))
        .collect();
    let results = par::map(&tasks, |&(start, len, h)| {
        let mut out = vec![0.0f32; len * hd];
        let mut probs = vec![0.0f32; len * len];
        for i in 0..len {
            let q = &qkv[(start + i) * 3 * d + h * hd..][..hd];
            let p = &mut probs[i * len..i * len + i + 1];
            for (j, pj) in p.iter_mut().enumerate() {
                let k = &qkv[(start + j) * 3 * d + d + h * hd..][..hd];
                *pj = dot(q, k) * scale;
            }
            softmax_in_place(p);
            let o = &mut out[i * hd..(i + 1) * hd];
            for (j, &pj) in p.iter().enumerate() {
                let v = &qkv[(start + j) * 3 * d + 2 * d + h * hd..][..hd];
                axpy(pj, v, o);
            }
        }
        HeadOut { out, probs }
    });
    let rows = segs.total();
    let mut out = vec![0.0f32; rows * d];
    let mut probs = Vec::with_capacity(results.iter().map(|r| r.probs.len()).sum());
    for (&(start, len, h), r) in tasks.iter().zip(&results) {
        for i in 0..len {
            out[(start + i) * d + h * hd..][..hd].copy_from_slice(&r.out[i * hd..(i + 1) * hd]);
        }
    }
    for r in results {
        probs.extend_from_slice(&r.probs);
    }
    (out, probs)
}

/// Accumulates into `dqkv` the gradient of [`attention_forward`].
pub fn attention_backward(
    qkv: &[f32],
    probs: &[f32],
    dout: &[f32],
    segs: &Segments,
    shape: AttnShape,
    dqkv: &mut [f32],
) {
    let d = shape.n_embd;
    let hd = shape.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let mut tasks = Vec::new();
    let mut offset = 0;
    for (s, l) in segs.spans() {
        for h in 0..shape.n_head {
            tasks.push((s, l, h, offset));
            offset += l * l;
        }
    }
    let grads = par::map(&tasks, |&(start, len, h, off)| {
        let p = &probs[off..off + len * len];
        let mut dq = vec![0.0f32; len * hd];
        let mut dk = vec![0.0f32; len * hd];
        let mut dv = vec![0.0f32; len * hd];
        let mut dp = vec![0.0f32; len];
        for i in 0..len {
            let go = &dout[(start + i) * d + h * hd..][..hd];
            let pi = &p[i * len..i * len + i + 1];
            let mut pdot = 0.0f32;
            for j in 0..=i {
                let v = &qkv[(start + j) * 3 * d + 2 * d + h * hd..][..hd];
                let s = dot(go, v);
                dp[j] = s;
                pdot += pi[j] * s;
                axpy(pi[j], go, &mut dv[j * hd..(j + 1) * hd]);
            }
            let q = &qkv[(start + i) * 3 * d + h * hd..][..hd];
            for j in 0..=i {
                let ds = pi[j] * (dp[j] - pdot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let k = &qkv[(start + j) * 3 * d + d + h * hd..][..hd];
                axpy(ds, k, &mut dq[i * hd..(i + 1) * hd]);
                axpy(ds, q, &mut dk[j * hd..(j + 1) * hd]);
            }
        }
        (dq, dk, dv)
    });
    for (&(start, len, h, _), (dq, dk, dv)) in tasks.iter().zip(&grads) {
        for i in 0..len {
            let row = &mut dqkv[(start + i) * 3 * d..(start + i + 1) * 3 * d];
            for t in 0..hd {
                row[h * hd + t] += dq[i * hd + t];
                row[d + h * hd + t] += dk[i * hd + t];
                row[2 * d + h * hd + t] += dv[i * hd + t];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    fn transpose(x: &[f32], r: usize, c: usize) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    fn fill(n: usize, seed: u32) -> Vec<f32> {
        (0..n)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) % 1000) as f32 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn gemm_matches_naive_in_every_layout() {
        for &(m, k, n) in &[(1, 5, 7), (3, 4, 2), (17, 9, 13), (130, 70, 90)] {
            let a = fill(m * k, 1);
            let b = fill(k * n, 2);
            let want = naive(&a, &b, m, k, n);
            let at = transpose(&a, m, k);
            let bt = transpose(&b, k, n);
            for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
                let am = if ta { Mat::t(&at, m, k) } else { Mat::new(&a, m, k) };
                let bm = if tb { Mat::t(&bt, k, n) } else { Mat::new(&b, k, n) };
                let mut c = vec![0.0; m * n];
                gemm(am, bm, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-4, "{m}x{k}x{n} {ta} {tb}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = fill(6, 3);
        let b = fill(6, 4);
        let mut c = vec![0.0; 4];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 2), &mut c, false);
        let once = c.clone();
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 2), &mut c, true);
        for (x, y) in c.iter().zip(&once) {
            assert!((x - 2.0 * y).abs() < 1e-6);
        }
    }

    #[test]
    fn gemm_is_partition_invariant() {
        let (m, k, n) = (300, 64, 192);
        let a = fill(m * k, 5);
        let b = fill(k * n, 6);
        let mut seq = vec![0.0; m * n];
        let mut parl = vec![0.0; m * n];
        par::set_parallel(false);
        gemm(Mat::new(&a, m, k), Mat::new(&b, k, n), &mut seq, false);
        par::set_parallel(true);
        gemm(Mat::new(&a, m, k), Mat::new(&b, k, n), &mut parl, false);
        assert_eq!(seq, parl);
    }

    #[test]
    fn segments_positions_restart() {
        let s = Segments::new(vec![2, 3]);
        assert_eq!(s.positions(), vec![0, 1, 0, 1, 2]);
        assert_eq!(s.spans(), vec![(0, 2), (2, 3)]);
    }

    #[test]
    fn attention_first_row_copies_value() {
        // With a single visible key the output is exactly that row's value.
        let shape = AttnShape { n_embd: 4, n_head: 2 };
        let qkv = fill(3 * 12, 9);
        let (out, probs) = attention_forward(&qkv, &Segments::single(3), shape);
        assert_eq!(&out[0..4], &qkv[8..12]);
        assert_eq!(probs[0], 1.0);
    }
}
