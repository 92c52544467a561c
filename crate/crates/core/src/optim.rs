//! Optimizers and learning-rate schedules.
//!
//! Network weights use SGD with momentum and coupled weight decay, or Adam
//! with decoupled weight decay. Latent mask weights use plain Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

fn check_finite(grads: &[f64], who: &'static str) -> Result<()> {
    if grads.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(who))
    }
}

/// SGD with momentum; weight decay is added to the gradient.
#[derive(Debug, Clone)]
pub struct SgdState {
    buffers: Vec<Vec<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
}

impl SgdState {
    pub fn new(momentum: f64, weight_decay: f64, lr: f64) -> Self {
        Self {
            buffers: Vec::new(),
            momentum,
            weight_decay,
            lr,
        }
    }

    /// `buf ← momentum·buf + (grad + wd·param); param ← param − lr·buf`, per tensor,
    /// using each matrix's own gradient buffer.
    pub fn step(&mut self, params: &mut [DenseMatrix]) -> Result<()> {
        for p in params.iter() {
            check_finite(p.grad(), "sgd_step")?;
        }
        if self.buffers.len() != params.len() {
            self.buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, buf) in params.iter_mut().zip(&mut self.buffers) {
            let (vals, grads) = p.split_mut();
            if buf.len() != vals.len() {
                return Err(Error::Config("momentum buffer shape changed".into()));
            }
            for ((w, &g), b) in vals.iter_mut().zip(grads.iter()).zip(buf.iter_mut()) {
                *b = self.momentum * *b + (g + self.weight_decay * *w);
                *w -= self.lr * *b;
            }
        }
        Ok(())
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update; increments `t` once.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::Input(format!("negative learning rate {lr}")));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "adam state holds {} entries, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        check_finite(grads, "adam_step")?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay, one moment pair per tensor.
#[derive(Debug, Clone)]
pub struct AdamWState {
    states: Vec<AdamState>,
    pub weight_decay: f64,
    pub lr: f64,
}

impl AdamWState {
    pub fn new(weight_decay: f64, lr: f64) -> Self {
        Self {
            states: Vec::new(),
            weight_decay,
            lr,
        }
    }

    pub fn step(&mut self, params: &mut [DenseMatrix]) -> Result<()> {
        for p in params.iter() {
            check_finite(p.grad(), "adamw_step")?;
        }
        if self.states.len() != params.len() {
            self.states = params.iter().map(|p| AdamState::new(p.len())).collect();
        }
        let decay = 1.0 - self.lr * self.weight_decay;
        for (p, st) in params.iter_mut().zip(&mut self.states) {
            let (vals, grads) = p.split_mut();
            vals.iter_mut().for_each(|w| *w *= decay);
            st.step(vals, grads, self.lr)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    AdamW,
}

fn default_momentum() -> f64 {
    0.9
}

/// Weight optimizer chosen by the training configuration.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(SgdState),
    AdamW(AdamWState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd { momentum } => Optimizer::Sgd(SgdState::new(momentum, weight_decay, lr)),
            OptimizerKind::AdamW => Optimizer::AdamW(AdamWState::new(weight_decay, lr)),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(s) => s.lr = lr,
            Optimizer::AdamW(s) => s.lr = lr,
        }
    }

    pub fn step(&mut self, params: &mut [DenseMatrix]) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => s.step(params),
            Optimizer::AdamW(s) => s.step(params),
        }
    }
}

/// Cosine annealing from `start_lr` at step 0 to `end_lr` at `total_steps − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub start_lr: f64,
    pub end_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(start_lr: f64, end_lr: f64, total_steps: usize) -> Self {
        Self {
            start_lr,
            end_lr,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::Input(format!(
                "schedule step {step} outside 0..{}",
                self.total_steps
            )));
        }
        if self.total_steps == 1 {
            return Ok(self.start_lr);
        }
        let frac = step as f64 / (self.total_steps - 1) as f64;
        Ok(self.end_lr + (self.start_lr - self.end_lr) / 2.0 * ((std::f64::consts::PI * frac).cos() + 1.0))
    }
}
