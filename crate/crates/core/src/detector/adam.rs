//! Adam optimizer over named parameter tensors with bias-corrected moment
//! estimates. Moment buffers are keyed by parameter name and allocated
//! lazily on the first step.

use super::params::ParamStore;
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)` per entry.
    /// `grads` must hold a tensor for every parameter name.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            debug_assert_eq!(g.data.len(), p.data.len());
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
