//! AdamW with decoupled weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::model::{Parameters, BLOCK_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub initial: f64,
    pub every: usize,
    pub factor: f64,
}

impl StepSchedule {
    /// Learning rate for a 0-based epoch.
    pub fn rate(&self, epoch: usize) -> f64 {
        if self.every == 0 {
            return self.initial;
        }
        self.initial * self.factor.powi((epoch / self.every) as i32)
    }
}

/// First and second moments for one flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl BlockMoments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
        self.t = 0;
    }

    pub fn update(&mut self, c: &AdamWConfig, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
        }
    }
}

/// One [`BlockMoments`] per parameter block; each block keeps its own step
/// count so a block can be reset without disturbing the others.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<BlockMoments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &Parameters) -> Self {
        let state = params.blocks().iter().map(|(_, b)| BlockMoments::new(b.len())).collect();
        Self { config, state }
    }

    pub fn step(&mut self, params: &mut Parameters, grad: &Parameters, lr: f64) {
        let grads = grad.blocks();
        for ((_, p), ((_, g), s)) in params
            .blocks_mut()
            .into_iter()
            .zip(grads.iter().zip(self.state.iter_mut()))
        {
            s.update(&self.config, p, g, lr);
        }
    }

    /// Zero the moments of the named block.
    pub fn reset_block(&mut self, name: &str) {
        if let Some(idx) = BLOCK_NAMES.iter().position(|n| *n == name) {
            self.state[idx].reset();
        }
    }

    pub fn block_step_count(&self, name: &str) -> Option<u64> {
        BLOCK_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|idx| self.state[idx].steps())
    }
}
