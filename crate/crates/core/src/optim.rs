// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam with optional decoupled weight decay and per-element update masks.
//!
//! Masked-out elements are never read or written, and their moment
//! estimates stay untouched, so frozen parameters remain bit-identical.

use crate::autograd::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient (0 for plain Adam).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state for a list of parameter slots.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, slot_sizes: &[usize]) -> Self {
        Self {
            config,
            m: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Starts a new step; call once before the `update`s of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to `params` in slot `slot` at learning rate `lr`.
    pub fn update<F: Real>(&mut self, slot: usize, params: &mut [F], grads: &[F], mask: Option<&[bool]>, lr: f64) {
        assert!(self.t > 0, "begin_step must precede update");
        assert_eq!(params.len(), grads.len());
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..params.len() {
            if let Some(mask) = mask {
                if !mask[i] {
                    continue;
                }
            }
            let g = grads[i].as_f64();
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut p = params[i].as_f64();
            p -= lr * c.weight_decay * p;
            p -= lr * m_hat / (v_hat.sqrt() + c.eps);
            params[i] = F::from_f64(p);
        }
    }
}
