//! AdamW with decoupled weight decay, global-norm gradient clipping and a
//! warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Moment buffers, one pair per parameter, plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new<S: Real>(config: AdamWConfig, store: &ParamStore<S>) -> Self {
        let first = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// Applies one update at learning rate `lr` to every parameter that has
    /// a gradient buffer. Frozen parameters are untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "{} moment buffers for {} parameters",
                    self.first.len(),
                    store.len()
                ),
            ));
        }
        self.step += 1;
        let cfg = AdamWConfig { lr, ..self.config };
        for (id, p) in store.iter_mut() {
            let t = &mut p.tensor;
            if !t.requires_grad {
                continue;
            }
            let Some(grad) = t.grad.take() else { continue };
            let i = id.index();
            adamw_update(
                t.data_mut(),
                &grad,
                &mut self.first[i],
                &mut self.second[i],
                self.step,
                &cfg,
            )?;
            t.grad = Some(grad);
        }
        Ok(())
    }
}

/// One AdamW update of a flat parameter buffer at 1-based step `step`.
pub fn adamw_update(
    params: &mut [f32],
    grads: &[f32],
    first: &mut [f32],
    second: &mut [f32],
    step: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || first.len() != params.len() || second.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "params {} grads {} moments {}/{}",
                params.len(),
                grads.len(),
                first.len(),
                second.len()
            ),
        ));
    }
    if step == 0 {
        return Err(Error::InvalidArgument(
            "adamw step counter starts at 1".into(),
        ));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..params.len() {
        let g = grads[i] as f64;
        let m = b1 * first[i] as f64 + (1.0 - b1) * g;
        let v = b2 * second[i] as f64 + (1.0 - b2) * g * g;
        first[i] = m as f32;
        second[i] = v as f32;
        let mhat = m / bc1;
        let vhat = v / bc2;
        let p = params[i] as f64 * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        params[i] = p as f32;
    }
    Ok(())
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the factor applied (1.0 when already within bounds).
pub fn clip_grad_norm<S: Real>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = store.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        store.scale_grads(scale);
        scale
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        // The 75k-iteration variant is `total_steps = 75_000`.
        Self {
            base_lr: 2e-4,
            warmup_steps: 2000,
            total_steps: 24_000,
        }
    }
}

/// Linear ramp from 0 to `base_lr` over warmup, then half-cosine decay to 0
/// at `total_steps`, and 0 afterwards.
pub fn cosine_lr(step: u64, sched: &LrSchedule) -> f64 {
    if step < sched.warmup_steps {
        return sched.base_lr * step as f64 / sched.warmup_steps as f64;
    }
    if step >= sched.total_steps {
        return 0.0;
    }
    let span = (sched.total_steps - sched.warmup_steps) as f64;
    let progress = (step - sched.warmup_steps) as f64 / span;
    (sched.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = vec![0.5f32, -1.0, 2.0];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for step in 1..=5 {
            adamw_update(&mut p, &[0.0; 3], &mut m, &mut v, step, &cfg).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![1.0f32, 1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_update(&mut p, &[0.3, -2.0], &mut m, &mut v, 1, &cfg).unwrap();
        // mhat = g, vhat = g^2 => delta = -lr * g/(|g| + eps)
        assert!((p[0] - (1.0 - 1e-2)).abs() < 1e-6);
        assert!((p[1] - (1.0 + 1e-2)).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = vec![0.0f32; 2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        assert!(adamw_update(
            &mut p,
            &[0.0; 3],
            &mut m,
            &mut v,
            1,
            &AdamWConfig::default()
        )
        .is_err());
    }

    fn store_with_grad(g: Vec<f32>) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::zeros([g.len()]));
        s.tensor_mut(id).grad = Some(g);
        s
    }

    #[test]
    fn clip_scales_down_only_above_max() {
        let mut s = store_with_grad(vec![0.0, 6.0]);
        assert!((clip_grad_norm(&mut s, 3.0) - 0.5).abs() < 1e-12);
        assert!((s.grad_norm() - 3.0).abs() < 1e-6);
        let mut s = store_with_grad(vec![1.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut s, 3.0), 1.0);
        assert_eq!(
            s.tensor(s.find("w").unwrap()).grad.as_deref(),
            Some(&[1.0f32, 0.0][..])
        );
    }

    #[test]
    fn schedule_landmarks() {
        let s = LrSchedule::default();
        assert_eq!(cosine_lr(0, &s), 0.0);
        assert!((cosine_lr(s.warmup_steps, &s) - 2e-4).abs() < 1e-18);
        let mid = s.warmup_steps + (s.total_steps - s.warmup_steps) / 2;
        assert!((cosine_lr(mid, &s) - 1e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(s.total_steps, &s), 0.0);
        assert_eq!(cosine_lr(s.total_steps + 10, &s), 0.0);
        assert!((cosine_lr(1000, &s) - 1e-4).abs() < 1e-15);
    }
}
