//! Adam with bias correction, applied to named parameters, plus the step
//! learning-rate decay used by the training loop.

use std::collections::HashMap;

use crate::error::Result;
use crate::layers::ParamGroup;
use crate::tape::Tape;

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: HashMap<String, Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update using gradients accumulated on `tape`. Parameters the
    /// tape never saw (or whose gradient is absent) are left untouched.
    /// Iteration follows `visit_mut` order, so updates are deterministic.
    pub fn step(&mut self, params: &mut dyn ParamGroup, tape: &Tape) -> Result<()> {
        let mut grads: HashMap<&str, Vec<f64>> = HashMap::new();
        for (name, var) in tape.bindings() {
            grads.insert(name.as_str(), tape.grad(*var).data().to_vec());
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let state = &mut self.state;
        let mut result = Ok(());
        params.visit_mut(&mut |name, tensor, trainable| {
            if !trainable || result.is_err() {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            if g.len() != tensor.numel() {
                result = Err(crate::error::CosamError::shape(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    tensor.numel()
                )));
                return;
            }
            let slot = state.entry(name.to_string()).or_insert_with(|| Slot {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        result
    }
}

/// Step decay: multiply the base rate by 0.1 after every `decay_every` steps.
pub fn step_lr(base: f64, step: usize, decay_every: usize) -> f64 {
    if decay_every == 0 {
        return base;
    }
    base * 0.1f64.powi((step / decay_every) as i32)
}
