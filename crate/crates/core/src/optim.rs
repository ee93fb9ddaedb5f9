//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::net::{NetGrads, Network, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to block parameters only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &NetGrads) {
        self.step += 1;
        let c = self.config.clone();
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        net.visit_params(grads, |group, params, grad| {
            if m_all.len() <= idx {
                m_all.push(vec![0.0; params.len()]);
                v_all.push(vec![0.0; params.len()]);
            }
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            idx += 1;
            if group == ParamGroup::Frozen {
                return;
            }
            let decay = if group == ParamGroup::Weights {
                1.0 - c.lr * c.weight_decay
            } else {
                1.0
            };
            for k in 0..params.len() {
                let g = grad[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                params[k] = params[k] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        });
    }
}
