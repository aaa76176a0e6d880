use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub amsgrad: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            amsgrad: false,
            clip_norm: None,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
}

/// Adam with the optional AMSGrad running maximum of the second moment.
pub struct Adam {
    config: AdamConfig,
    step: u64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = grads.squared_norm().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = grads.param(name) else { continue };
            let n = g.len();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                v_max: vec![0.0; n],
            });
            let w = p.value.data_mut();
            for i in 0..n {
                let gi = g.data()[i] * scale;
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let v = if c.amsgrad {
                    st.v_max[i] = st.v_max[i].max(st.v[i]);
                    st.v_max[i]
                } else {
                    st.v[i]
                };
                w[i] -= c.learning_rate * (st.m[i] / bc1) / ((v / bc2).sqrt() + c.eps);
            }
        }
    }
}
