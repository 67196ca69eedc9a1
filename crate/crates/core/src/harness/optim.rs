use std::collections::{BTreeMap, HashMap};

use crate::model::ParamStore;
use crate::tensor::Tensor;

/// Step-decayed learning rate of 1-based `epoch`: halved every `period`
/// epochs.
pub fn learning_rate(base: f64, period: usize, epoch: usize) -> f64 {
    assert!(epoch >= 1 && period >= 1);
    base * 0.5f64.powi(((epoch - 1) / period) as i32)
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

const M_PREFIX: &str = "adam/m/";
const V_PREFIX: &str = "adam/v/";
const STEP_KEY: &str = "adam_step";

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi + self.weight_decay * *pi;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }

    /// Moment tensors and step count for a checkpoint.
    pub fn state(&self) -> (BTreeMap<String, Tensor>, HashMap<String, String>) {
        let mut tensors = BTreeMap::new();
        for (k, t) in &self.m {
            tensors.insert(format!("{M_PREFIX}{k}"), t.clone());
        }
        for (k, t) in &self.v {
            tensors.insert(format!("{V_PREFIX}{k}"), t.clone());
        }
        let meta = HashMap::from([(STEP_KEY.to_string(), self.step.to_string())]);
        (tensors, meta)
    }

    pub fn from_state(weight_decay: f64, tensors: &BTreeMap<String, Tensor>, meta: &HashMap<String, String>) -> Option<Self> {
        let mut adam = Self::new(weight_decay);
        adam.step = meta.get(STEP_KEY)?.parse().ok()?;
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix(M_PREFIX) {
                adam.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(V_PREFIX) {
                adam.v.insert(name.to_string(), t.clone());
            }
        }
        Some(adam)
    }
}
