//! Straight-line double-precision decoder written from the textbook
//! definitions, independent of the crate's tape and kernels.

use selfloop::model::ModelState;

#[derive(Clone)]
pub struct RefParams {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl RefParams {
    pub fn from_model(m: &ModelState) -> Self {
        RefParams {
            names: m.names().to_vec(),
            values: m
                .params()
                .iter()
                .map(|p| p.data().iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i].as_slice())
    }

    fn req(&self, name: &str) -> &[f64] {
        self.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let d = g.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + 1e-5).sqrt();
        for i in 0..d {
            out.push((row[i] - mean) * r * g[i] + b.map_or(0.0, |b| b[i]));
        }
    }
    out
}

/// x[t x n] * w[n x m] (+ bias)
fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, m: usize) -> Vec<f64> {
    let t = x.len() / n;
    let mut out = vec![0.0; t * m];
    for r in 0..t {
        for j in 0..m {
            let mut s = b.map_or(0.0, |b| b[j]);
            for k in 0..n {
                s += x[r * n + k] * w[k * m + j];
            }
            out[r * m + j] = s;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Logits `[T x V]` for one sequence.
pub fn logits(p: &RefParams, n_layer: usize, n_head: usize, d: usize, ids: &[u32]) -> Vec<f64> {
    let t = ids.len();
    let wte = p.req("wte");
    let wpe = p.req("wpe");
    let v = wte.len() / d;
    let mut x = vec![0.0; t * d];
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..d {
            x[i * d + j] = wte[id as usize * d + j] + wpe[i * d + j];
        }
    }
    let hd = d / n_head;
    for l in 0..n_layer {
        let k = |s: &str| format!("h.{l}.{s}");
        let h = layer_norm(&x, p.req(&k("ln_1.weight")), p.get(&k("ln_1.bias")));
        let qkv = linear(&h, p.req(&k("attn.c_attn.weight")), p.get(&k("attn.c_attn.bias")), d, 3 * d);
        let mut att = vec![0.0; t * d];
        for head in 0..n_head {
            for i in 0..t {
                let q = &qkv[i * 3 * d + head * hd..][..hd];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kk = &qkv[j * 3 * d + d + head * hd..][..hd];
                        q.iter().zip(kk).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, w) in e.iter().enumerate() {
                    let vv = &qkv[j * 3 * d + 2 * d + head * hd..][..hd];
                    for c in 0..hd {
                        att[i * d + head * hd + c] += w / z * vv[c];
                    }
                }
            }
        }
        let a = linear(&att, p.req(&k("attn.c_proj.weight")), p.get(&k("attn.c_proj.bias")), d, d);
        for (xi, ai) in x.iter_mut().zip(&a) {
            *xi += ai;
        }
        let h = layer_norm(&x, p.req(&k("ln_2.weight")), p.get(&k("ln_2.bias")));
        let h = linear(&h, p.req(&k("mlp.c_fc.weight")), p.get(&k("mlp.c_fc.bias")), d, 4 * d);
        let h: Vec<f64> = h.into_iter().map(gelu).collect();
        let h = linear(&h, p.req(&k("mlp.c_proj.weight")), p.get(&k("mlp.c_proj.bias")), 4 * d, d);
        for (xi, hi) in x.iter_mut().zip(&h) {
            *xi += hi;
        }
    }
    let x = layer_norm(&x, p.req("ln_f.weight"), p.get("ln_f.bias"));
    let mut out = vec![0.0; t * v];
    for i in 0..t {
        for tok in 0..v {
            out[i * v + tok] = (0..d).map(|c| x[i * d + c] * wte[tok * d + c]).sum();
        }
    }
    out
}

pub fn mean_cross_entropy(logits: &[f64], v: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.chunks(v).zip(targets) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        total += z.ln() + mx - row[t];
    }
    total / targets.len() as f64
}
