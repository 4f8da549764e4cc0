//! Gradient-descent optimizers: SGD with momentum and weight decay, and
//! Adam. State slots are exposed so checkpoints can round-trip them.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Param;

/// Optimizer hyperparameters; which variant is chosen is part of the
/// training configuration and is persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimConfig {
    Sgd {
        lr: f32,
        momentum: f32,
        weight_decay: f32,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

impl OptimConfig {
    pub fn sgd(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        OptimConfig::Sgd {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn adam(lr: f32, weight_decay: f32) -> Self {
        OptimConfig::Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn learning_rate(&self) -> f32 {
        match self {
            OptimConfig::Sgd { lr, .. } | OptimConfig::Adam { lr, .. } => *lr,
        }
    }

    fn slots_per_param(&self) -> usize {
        match self {
            OptimConfig::Sgd { .. } => 1,
            OptimConfig::Adam { .. } => 2,
        }
    }
}

/// Optimizer state for one parameter collection. Slot layout: SGD keeps
/// one velocity buffer per parameter; Adam keeps first- and second-moment
/// buffers interleaved `[m0, v0, m1, v1, …]`.
pub struct Optimizer {
    cfg: OptimConfig,
    t: u64,
    slots: Vec<ArrayD<f32>>,
}

impl Optimizer {
    /// Builds zeroed state shaped after the given parameters.
    pub fn new(cfg: OptimConfig, params: &[&Param]) -> Self {
        let per = cfg.slots_per_param();
        let mut slots = Vec::with_capacity(params.len() * per);
        for p in params {
            for _ in 0..per {
                slots.push(ArrayD::zeros(p.value.raw_dim()));
            }
        }
        Optimizer { cfg, t: 0, slots }
    }

    pub fn config(&self) -> OptimConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients. Parameters must
    /// be passed in the same order every call (the order used at
    /// construction).
    pub fn step(&mut self, params: &mut [&mut Param]) {
        assert_eq!(
            params.len() * self.cfg.slots_per_param(),
            self.slots.len(),
            "optimizer state does not match parameter collection"
        );
        self.t += 1;
        match self.cfg {
            OptimConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                for (p, buf) in params.iter_mut().zip(self.slots.iter_mut()) {
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(buf)
                        .for_each(|w, &g, v| {
                            let g = g + weight_decay * *w;
                            *v = momentum * *v + g;
                            *w -= lr * *v;
                        });
                }
            }
            OptimConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, p) in params.iter_mut().enumerate() {
                    let (ms, vs) = self.slots[2 * i..2 * i + 2].split_at_mut(1);
                    let m = &mut ms[0];
                    let v = &mut vs[0];
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(m)
                        .and(v)
                        .for_each(|w, &g, m, v| {
                            let g = g + weight_decay * *w;
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let mhat = *m / bc1;
                            let vhat = *v / bc2;
                            *w -= lr * mhat / (vhat.sqrt() + eps);
                        });
                }
            }
        }
    }

    /// State slots for persistence, in update order.
    pub fn slots(&self) -> &[ArrayD<f32>] {
        &self.slots
    }

    /// Restores persisted state; shapes must match the current layout.
    pub fn restore(&mut self, t: u64, slots: Vec<ArrayD<f32>>) -> crate::Result<()> {
        if slots.len() != self.slots.len() {
            return Err(crate::Error::Structural(format!(
                "optimizer state has {} slots, expected {}",
                slots.len(),
                self.slots.len()
            )));
        }
        for (have, want) in slots.iter().zip(self.slots.iter()) {
            if have.shape() != want.shape() {
                return Err(crate::Error::ShapeMismatch {
                    context: "optimizer state slot".into(),
                    expected: want.shape().to_vec(),
                    actual: have.shape().to_vec(),
                });
            }
        }
        self.t = t;
        self.slots = slots;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn scalar_param(v: f32) -> Param {
        Param::new(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut p = scalar_param(1.0);
        p.grad.fill(0.5);
        let mut opt = Optimizer::new(OptimConfig::sgd(0.1, 0.0, 0.0), &[&p]);
        opt.step(&mut [&mut p]);
        let got = p.value[[0]];
        assert!((got - 0.95).abs() < 1e-7, "1.0 - 0.1·0.5 = 0.95, got {got}");
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut p = scalar_param(0.0);
        let mut opt = Optimizer::new(OptimConfig::sgd(1.0, 0.9, 0.0), &[&p]);
        p.grad.fill(1.0);
        opt.step(&mut [&mut p]);
        assert!(
            (p.value[[0]] + 1.0).abs() < 1e-7,
            "first step moves by lr·g"
        );
        p.grad.fill(1.0);
        opt.step(&mut [&mut p]);
        // velocity = 0.9·1 + 1 = 1.9 → total displacement 2.9
        assert!(
            (p.value[[0]] + 2.9).abs() < 1e-6,
            "momentum must accelerate, got {}",
            p.value[[0]]
        );
    }

    #[test]
    fn sgd_weight_decay_pulls_toward_zero() {
        let mut p = scalar_param(2.0);
        let mut opt = Optimizer::new(OptimConfig::sgd(0.1, 0.0, 0.5), &[&p]);
        // zero gradient: only decay acts: w -= lr·wd·w = 2 - 0.1·1.0
        opt.step(&mut [&mut p]);
        assert!(
            (p.value[[0]] - 1.9).abs() < 1e-6,
            "decay alone must shrink the weight"
        );
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.0);
        let mut opt = Optimizer::new(
            OptimConfig::Adam {
                lr: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 0.0,
                weight_decay: 0.0,
            },
            &[&p],
        );
        p.grad.fill(3.0);
        opt.step(&mut [&mut p]);
        // With bias correction, the first Adam step is -lr·g/|g| = -lr.
        assert!((p.value[[0]] + 0.01).abs() < 1e-6, "got {}", p.value[[0]]);
    }

    #[test]
    fn restore_rejects_wrong_slot_count() {
        let p = scalar_param(0.0);
        let mut opt = Optimizer::new(OptimConfig::sgd(0.1, 0.9, 0.0), &[&p]);
        let err = opt.restore(3, vec![]);
        assert!(
            err.is_err(),
            "restoring empty state into one-slot optimizer must fail"
        );
    }
}
