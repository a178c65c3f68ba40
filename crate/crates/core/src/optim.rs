//! Adam with an exponentially decaying learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub decay_steps: u64,
    pub decay_rate: f64,
    /// Decay in whole multiples of `decay_steps` instead of continuously.
    pub staircase: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 0.001,
            decay_steps: 10_000,
            decay_rate: 0.96,
            staircase: false,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.decay_steps > 0
            && self.decay_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// `base_lr * decay_rate^(t / decay_steps)`.
    pub fn lr(&self, t: u64) -> f64 {
        let e = if self.staircase {
            (t / self.decay_steps) as f64
        } else {
            t as f64 / self.decay_steps as f64
        };
        self.base_lr * self.decay_rate.powf(e)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    /// Completed steps.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr(self.t)
    }

    /// One update of every parameter at `lr(t)`, then `t += 1`. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &[&Param]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        let c = &self.config;
        let lr = c.lr(self.t);
        let k = (self.t + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(k);
        let bc2 = 1.0 - c.beta2.powi(k);
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(Error::shape(format!(
                    "parameter {i} has {} values, moments hold {}",
                    p.numel(),
                    self.m[i].len()
                )));
            }
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let mut data = p.get().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + c.epsilon);
            }
            p.set_data(data)?;
        }
        self.t += 1;
        Ok(())
    }
}
