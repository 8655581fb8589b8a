//! Adam with global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Maximum global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f32>,
    /// Decoupled weight decay, applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: Some(1.0),
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment buffers, one per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn bit_identical(&self, other: &AdamState) -> bool {
        let same = |a: &Vec<Vec<f32>>, b: &Vec<Vec<f32>>| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        self.t == other.t && same(&self.m, &other.m) && same(&self.v, &other.v)
    }
}

/// Global L2 norm of all gradients, accumulated in f64. Missing gradient
/// buffers count as zero.
pub fn global_grad_norm(params: &[Tensor]) -> Result<f64> {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for &x in g {
                if !x.is_finite() {
                    return Err(Error::NonFinite("gradient"));
                }
                sq += x as f64 * x as f64;
            }
        }
    }
    Ok(sq.sqrt())
}

/// Scales every gradient by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the factor applied (1.0 when untouched).
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f32) -> Result<f32> {
    let norm = global_grad_norm(params)?;
    if norm <= max_norm as f64 {
        return Ok(1.0);
    }
    let scale = (max_norm as f64 / norm) as f32;
    for p in params.iter_mut() {
        if p.grad().is_some() {
            for g in p.grad_mut() {
                *g *= scale;
            }
        }
    }
    Ok(scale)
}

/// One bias-corrected Adam update. Gradients are read, not cleared.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len()
        || params
            .iter()
            .zip(&state.m)
            .any(|(p, m)| p.numel() != m.len())
    {
        return Err(Error::Contract(
            "optimizer state does not match the parameter set".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = (1.0 - (cfg.beta1 as f64).powi(t)) as f32;
    let bc2 = (1.0 - (cfg.beta2 as f64).powi(t)) as f32;
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let (data, grad) = p.data_and_grad_mut();
        for i in 0..data.len() {
            let g = grad.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut x = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            if cfg.weight_decay > 0.0 {
                x -= lr * cfg.weight_decay * data[i];
            }
            data[i] = x;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(data: Vec<f32>, grad: Vec<f32>) -> Tensor {
        let mut t = Tensor::new(vec![data.len()], data).unwrap();
        t.grad_mut().copy_from_slice(&grad);
        t
    }

    #[test]
    fn small_norm_untouched() {
        let mut ps = [with_grad(vec![0.0, 0.0], vec![0.3, 0.4])];
        assert_eq!(clip_grad_norm(&mut ps, 1.0).unwrap(), 1.0);
        assert_eq!(ps[0].grad().unwrap(), &[0.3, 0.4]);
    }

    #[test]
    fn three_four_five() {
        let mut ps = [with_grad(vec![0.0, 0.0], vec![3.0, 4.0])];
        let s = clip_grad_norm(&mut ps, 1.0).unwrap();
        assert!((s - 0.2).abs() < 1e-7);
        let g = ps[0].grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn clipped_norm_is_min_of_norm_and_cap() {
        let mut x = 0x2545_f491u32;
        let mut next = || {
            x ^= x << 13;
            x ^= x >> 17;
            x ^= x << 5;
            (x % 2000) as f32 / 100.0 - 10.0
        };
        for cap in [0.5f32, 5.0, 1e4] {
            let mut ps: Vec<Tensor> = (0..3)
                .map(|_| {
                    let g: Vec<f32> = (0..17).map(|_| next()).collect();
                    with_grad(vec![0.0; 17], g)
                })
                .collect();
            let before: f64 = ps
                .iter()
                .flat_map(|p| p.grad().unwrap().iter())
                .map(|&g| g as f64 * g as f64)
                .sum::<f64>()
                .sqrt();
            clip_grad_norm(&mut ps, cap).unwrap();
            let after: f64 = ps
                .iter()
                .flat_map(|p| p.grad().unwrap().iter())
                .map(|&g| g as f64 * g as f64)
                .sum::<f64>()
                .sqrt();
            let want = before.min(cap as f64);
            assert!((after - want).abs() <= 1e-6 * want.max(1.0), "{after} vs {want}");
        }
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut ps = [with_grad(vec![0.0], vec![f32::NAN])];
        assert!(matches!(clip_grad_norm(&mut ps, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = [with_grad(vec![1.5, -2.0], vec![0.0, 0.0])];
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(ps[0].data(), &[1.5, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = [with_grad(vec![1.0], vec![1.0])];
        let mut st = AdamState::new(&ps);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        adam_step(&mut ps, &mut st, &cfg).unwrap();
        // m_hat = v_hat = 1, so the step is 0.1 / (1 + 1e-8).
        assert!((ps[0].data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn mismatched_state_is_a_contract_error() {
        let mut ps = [with_grad(vec![1.0], vec![1.0])];
        let mut st = AdamState::new(&[Tensor::zeros(&[2])]);
        assert!(matches!(
            adam_step(&mut ps, &mut st, &TrainConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn descends_a_quadratic_bowl() {
        // f(p) = 0.5 * |p - c|^2
        let c = [0.3f32, -1.2, 2.0];
        let mut ps = [Tensor::new(vec![3], vec![0.0; 3]).unwrap()];
        let mut st = AdamState::new(&ps);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let f = |p: &[f32]| p.iter().zip(&c).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f32>();
        let before = f(ps[0].data());
        let g: Vec<f32> = ps[0].data().iter().zip(&c).map(|(a, b)| a - b).collect();
        ps[0].grad_mut().copy_from_slice(&g);
        adam_step(&mut ps, &mut st, &cfg).unwrap();
        assert!(f(ps[0].data()) < before);
    }

    /// Textbook Adam on one scalar, in f32 with the same operation order.
    fn scalar_adam(p0: f32, grads: &[f32], cfg: &TrainConfig) -> f32 {
        let (mut p, mut m, mut v) = (p0, 0.0f32, 0.0f32);
        for (k, &g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - (cfg.beta1 as f64).powi(t)) as f32;
            let v_hat = v / (1.0 - (cfg.beta2 as f64).powi(t)) as f32;
            p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p
    }

    #[test]
    fn two_unit_gradient_steps_match_the_scalar_recurrence() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut ps = [with_grad(vec![0.5], vec![1.0])];
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, &cfg).unwrap();
        adam_step(&mut ps, &mut st, &cfg).unwrap();
        let want = scalar_adam(0.5, &[1.0, 1.0], &cfg);
        assert!((ps[0].data()[0] - want).abs() < 1e-7);
        // With a constant gradient both bias-corrected moments equal 1, so
        // every step moves by lr / (1 + eps).
        assert!((ps[0].data()[0] - 0.48).abs() < 1e-6);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut ps = [with_grad(vec![2.0], vec![0.0])];
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, &cfg).unwrap();
        assert!((ps[0].data()[0] - 1.9).abs() < 1e-6);
    }
}
