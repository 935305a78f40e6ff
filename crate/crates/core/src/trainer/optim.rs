use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::encoders::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay < 1.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Adam with weight decay decoupled from the gradient step:
/// `p <- p - (lr * m_hat / (sqrt(v_hat) + eps) + wd * p)`.
/// The decay does not scale with `lr`, so it still acts when `lr = 0`.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| ArrayD::zeros(p.raw_dim()))
                .collect()
        };
        Ok(Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `grads` is aligned with `params.values()`, `None` meaning zero.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<ArrayD<f32>>]) {
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient count does not match parameters"
        );
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (c.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        let keep = (1.0 - c.weight_decay) as f32;
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match &grads[i] {
                Some(g) => Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                }),
                None => {
                    m.mapv_inplace(|m| b1 * m);
                    v.mapv_inplace(|v| b2 * v);
                }
            }
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p = *p * keep - step_size * m / (v.sqrt() / bc2_sqrt + eps);
            });
        }
    }
}
