use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::TrainableMut;

/// Adam optimizer with per-parameter first/second moment state.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over all parameters; consumes and zeroes the gradients.
    pub fn step(&mut self, lr: f64, params: &mut [TrainableMut]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params.iter_mut() {
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            for (((val, g), mi), vi) in p
                .value
                .iter_mut()
                .zip(p.grad.iter_mut())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * *g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * *g * *g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *val -= lr * mhat / (vhat.sqrt() + self.eps);
                *g = 0.0;
            }
        }
    }

    /// Serialize moment buffers and step counter for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (k, a) in &self.m {
            out.push((format!("m.{k}"), a.clone()));
        }
        for (k, a) in &self.v {
            out.push((format!("v.{k}"), a.clone()));
        }
        out
    }

    pub fn load_state(&mut self, t: u64, tensors: Vec<(String, ArrayD<f64>)>) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (name, a) in tensors {
            if let Some(rest) = name.strip_prefix("m.") {
                self.m.insert(rest.to_string(), a);
            } else if let Some(rest) = name.strip_prefix("v.") {
                self.v.insert(rest.to_string(), a);
            }
        }
    }
}
