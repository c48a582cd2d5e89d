//! Adam over tape leaves with per-leaf learning-rate multipliers.

use serde::{Deserialize, Serialize};

use crate::diffengine::{NodeId, Tape};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    groups: Vec<(NodeId, f64)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    /// `groups` pairs every optimised leaf with its learning-rate multiplier.
    pub fn new(config: AdamConfig, tape: &Tape, groups: Vec<(NodeId, f64)>) -> Self {
        let m = groups.iter().map(|(id, _)| vec![0.0; tape.value(*id).len()]).collect();
        let v = groups.iter().map(|(id, _)| vec![0.0; tape.value(*id).len()]).collect();
        Self {
            config,
            groups,
            m,
            v,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update from the gradients of the last `backward`.
    pub fn step(&mut self, tape: &mut Tape) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (k, &(id, mult)) in self.groups.iter().enumerate() {
            let lr = c.lr * mult;
            let (x, g) = tape.leaf_value_and_grad(id)?;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..x.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                x[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
