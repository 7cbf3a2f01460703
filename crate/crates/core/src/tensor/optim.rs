//! AdamW with decoupled weight decay and the linear learning-rate decay.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
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
            weight_decay: 1e-5,
        }
    }
}

/// Optimizer state: one pair of moment buffers per parameter slot.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. Buffers are allocated on the
    /// first call and must keep their lengths afterwards.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err(
                "adamw",
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(shape_err("adamw", "parameter count changed"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[i].len() {
                return Err(shape_err(
                    "adamw",
                    format!("slot {i}: param {}, grad {}, state {}", p.len(), g.len(), self.first[i].len()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bias1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bias2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        let lr_t = T::of(lr);
        let decay = T::one() - T::of(lr * c.weight_decay);
        let eps = T::of(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] = p[j] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear decay from `lr0` at epoch 0 to `lr_min` at the last epoch.
pub fn lr_schedule(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    if total_epochs <= 1 {
        return lr0;
    }
    let frac = epoch.min(total_epochs - 1) as f64 / (total_epochs - 1) as f64;
    lr0 * (1.0 - frac) + lr_min * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        let mut p = vec![2.0];
        opt.step(1e-3, &mut [&mut p], &[&[0.0]]).unwrap();
        assert_eq!(p[0], 2.0 * (1.0 - 1e-3 * 1e-5));
        assert!((p[0] - (2.0 - 1e-3 * 1e-5 * 2.0)).abs() < 1e-18);
    }

    #[test]
    fn first_step_closed_form() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = vec![0.0];
        opt.step(1e-3, &mut [&mut p], &[&[1.0]]).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
        assert!((p[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn two_steps_match_scalar_trace() {
        // Hand simulation, g = 1 both steps, wd = 1e-5, lr = 1e-3, p0 = 1.
        let (lr, wd, b1, b2, eps) = (1e-3f64, 1e-5, 0.9f64, 0.999f64, 1e-8);
        let mut want = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            want = want * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        }
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        let mut p = vec![1.0];
        opt.step(lr, &mut [&mut p], &[&[1.0]]).unwrap();
        opt.step(lr, &mut [&mut p], &[&[1.0]]).unwrap();
        assert_eq!(p[0], want);
        // Both bias-corrected moments equal 1, so each step moves ~lr.
        assert!((p[0] - (1.0 - 2e-3)).abs() < 1e-7);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        let mut p = vec![0.0; 2];
        opt.step(1e-3, &mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        let mut q = vec![0.0; 3];
        assert!(opt.step(1e-3, &mut [&mut q], &[&[0.0; 3]]).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 60, 1e-3, 1e-8), 1e-3);
        assert!((lr_schedule(59, 60, 1e-3, 1e-8) - 1e-8).abs() < 1e-20);
        let mid = lr_schedule(1, 3, 1e-3, 1e-8);
        assert!((mid - (1e-3 + 1e-8) / 2.0).abs() < 1e-18);
    }
}
