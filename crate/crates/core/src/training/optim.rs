use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// One bias-corrected AdamW update of a single tensor, with weight decay
/// applied decoupled from the gradient. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
        return Err(Error::shape(
            "adamw",
            format!("{} params vs {} grads", theta.len(), grad.len()),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "adamw gradient" });
    }
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let (lr_t, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    let decay = T::from_f64(lr * weight_decay);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= decay * theta[i];
        theta[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over a module's trainable parameters. Moments are stored per
/// parameter in visit order. Parameters without a gradient in a step are
/// left untouched, including their weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn apply<M: Module<T> + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        self.step += 1;
        let (t, cfg) = (self.step, self.cfg);
        let moments = &mut self.moments;
        let mut idx = 0;
        let mut res = Ok(());
        model.visit_mut(&mut |p| {
            let i = idx;
            idx += 1;
            if res.is_err() || !p.is_trainable() {
                return;
            }
            let Some(grad) = p.value.grad().map(<[T]>::to_vec) else {
                return;
            };
            if moments.len() <= i {
                moments.resize_with(i + 1, || None);
            }
            let n = grad.len();
            let (m, v) = moments[i].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            res = adamw_update(p.value.data_mut(), &grad, m, v, t, lr, wd, &cfg);
        });
        res
    }
}

/// Euclidean norm of every trainable gradient, accumulated in `f64`.
pub fn grad_norm<T: Scalar, M: Module<T> + ?Sized>(model: &M) -> f64 {
    let mut sq = 0.0;
    model.visit(&mut |p| {
        if let Some(g) = p.value.grad() {
            sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    });
    sq.sqrt()
}

pub fn scale_grads<T: Scalar, M: Module<T> + ?Sized>(model: &mut M, s: f64) {
    let s = T::from_f64(s);
    model.visit_mut(&mut |p| {
        if let Some(g) = p.value.grad_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    });
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar, M: Module<T> + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm > max_norm {
        scale_grads(model, max_norm / norm);
    }
    norm
}

/// Linear warmup over `⌈warmup_ratio·total⌉` steps to `peak`, then cosine
/// decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut th = [theta];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut th, &[g], &mut m, &mut v, 1, lr, wd, &AdamWConfig::default()).unwrap();
        th[0]
    }

    #[test]
    fn adamw_hand_checks() {
        assert!((one_step(1.0, 1.0, 0.1, 0.0) - 0.9).abs() < 1e-7);
        assert_eq!(one_step(1.0, 0.0, 0.1, 0.1), 0.99);
        assert_eq!(one_step(1.0, 0.0, 0.1, 0.0), 1.0);
        let mut th = [1.0];
        assert!(adamw_update(
            &mut th,
            &[f64::NAN],
            &mut [0.0],
            &mut [0.0],
            1,
            0.1,
            0.0,
            &AdamWConfig::default()
        )
        .is_err());
    }

    #[test]
    fn schedule_shape() {
        let (total, peak) = (1000, 3e-4);
        let warmup = 30;
        assert_eq!(lr_at(0, total, peak, 0.03), 0.0);
        assert_eq!(lr_at(warmup, total, peak, 0.03), peak);
        assert!(lr_at(total, total, peak, 0.03).abs() < 1e-12);
        let mid = warmup + (total - warmup) / 2;
        assert!((lr_at(mid, total, peak, 0.03) - peak / 2.0).abs() < 1e-9);
        // ⌈0.03·64⌉ = 2
        assert_eq!(lr_at(2, 64, 1.0, 0.03), 1.0);
        assert_eq!(lr_at(1, 64, 1.0, 0.03), 0.5);
    }
}
