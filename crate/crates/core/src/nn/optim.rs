//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{Mat, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 clip on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new<P: Parameters>(config: AdamWConfig, params: &P) -> Self {
        let shapes: Vec<Mat> = params.named_tensors().iter().map(|(_, t)| Mat::zeros(t.raw_dim())).collect();
        Self {
            config,
            step: 0,
            v: shapes.clone(),
            m: shapes,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grad` has the same structure as `params`.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grad: &P) {
        self.step += 1;
        let c = self.config;
        let grads: Vec<&Mat> = grad.named_tensors().into_iter().map(|(_, t)| t).collect();
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
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
        if c.lr == 0.0 {
            return;
        }
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            });
        }
    }
}
