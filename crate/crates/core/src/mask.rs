//! Latent mask weights, their sign quantizer and the mask update rule.
//!
//! A mask of `k` entries keeps real latent weights `b_r`; the binary mask is
//! `b_i = 1 iff b_r_i ≥ 0`. Gradients with respect to `b` pass straight
//! through to `b_r` unchanged. The penalty `½λ‖b‖²` contributes `λ·b` to the
//! gradient, and the latent weights are updated with Adam and clipped to
//! `[−α₁, α₁]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamState;

/// Mask hyperparameters. Defaults match the sparsification setting; feature
/// selection lowers `alpha0` to 0.02.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskHyper {
    /// Initial value of every latent weight.
    pub alpha0: f64,
    /// Clip bound for latent weights.
    pub alpha1: f64,
    /// Mask learning rate at the first trainable epoch.
    pub eta0: f64,
    /// Mask learning rate at the last epoch.
    pub eta1: f64,
    /// Fraction of epochs during which the mask stays frozen.
    pub warmup_fraction: f64,
    /// Smoothing factor of the moving-average mask.
    pub gamma: f64,
}

impl Default for MaskHyper {
    fn default() -> Self {
        Self {
            alpha0: 0.3,
            alpha1: 1.0,
            eta0: 1e-3,
            eta1: 1e-5,
            warmup_fraction: 0.1,
            gamma: 0.9,
        }
    }
}

impl MaskHyper {
    pub fn feature_selection() -> Self {
        Self {
            alpha0: 0.02,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 0.0) || self.alpha0.abs() > self.alpha1 {
            return Err(Error::Config(format!(
                "need |alpha0| <= alpha1 and alpha1 > 0 (alpha0 = {}, alpha1 = {})",
                self.alpha0, self.alpha1
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.eta0 < 0.0 || self.eta1 < 0.0 {
            return Err(Error::Config("mask learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// `q(b_r)`: 1 where the latent weight is non-negative.
pub fn quantize(latent: &[f64]) -> Vec<bool> {
    latent.iter().map(|&v| v >= 0.0).collect()
}

/// Identity straight-through estimator: `∂L/∂b_r = ∂L/∂q(b_r)`.
pub fn ste_backward(grad_wrt_mask: &[f64]) -> Vec<f64> {
    grad_wrt_mask.to_vec()
}

/// Gradient of `½λ‖b‖²`, i.e. `λ·b`.
pub fn penalty_grad(bits: &[bool], lambda: f64) -> Result<Vec<f64>> {
    if lambda < 0.0 {
        return Err(Error::Input(format!("negative penalty coefficient {lambda}")));
    }
    Ok(bits.iter().map(|&b| if b { lambda } else { 0.0 }).collect())
}

/// `½λ‖b‖²`, which for a binary mask is `½λ · #ones`.
pub fn penalty_value(bits: &[bool], lambda: f64) -> f64 {
    0.5 * lambda * bits.iter().filter(|&&b| b).count() as f64
}

/// True when at most 20% of the smoothed mask lies in `[0.15, 0.85]`.
pub fn mask_converged(smoothed: &[f64]) -> Result<bool> {
    if smoothed.is_empty() {
        return Err(Error::Input("convergence check on an empty mask".into()));
    }
    let undecided = smoothed.iter().filter(|&&v| (0.15..=0.85).contains(&v)).count();
    Ok(undecided as f64 <= 0.2 * smoothed.len() as f64)
}

/// Number of frozen warmup epochs, `round(E_b·E)` with halves rounded away from zero.
pub fn warmup_epochs(epochs: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * epochs as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaskRecord", into = "MaskRecord")]
pub struct MaskState {
    latent: Vec<f64>,
    bits: Vec<bool>,
    smoothed: Vec<f64>,
    adam: AdamState,
    hyper: MaskHyper,
    lambda: f64,
    frozen: bool,
}

impl MaskState {
    /// `k` entries initialized to `alpha0`, frozen, with a zero smoothed mask.
    pub fn new(k: usize, hyper: MaskHyper, lambda: f64) -> Result<Self> {
        hyper.validate()?;
        if lambda < 0.0 {
            return Err(Error::Input(format!("negative penalty coefficient {lambda}")));
        }
        if k == 0 {
            return Err(Error::Config("mask must have at least one entry".into()));
        }
        let latent = vec![hyper.alpha0; k];
        Ok(Self {
            bits: quantize(&latent),
            latent,
            smoothed: vec![0.0; k],
            adam: AdamState::new(k),
            hyper,
            lambda,
            frozen: true,
        })
    }

    pub fn len(&self) -> usize {
        self.latent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent.is_empty()
    }

    pub fn latent(&self) -> &[f64] {
        &self.latent
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn smoothed(&self) -> &[f64] {
        &self.smoothed
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn hyper(&self) -> &MaskHyper {
        &self.hyper
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Fraction of mask bits equal to zero.
    pub fn sparsity(&self) -> f64 {
        self.bits.iter().filter(|&&b| !b).count() as f64 / self.bits.len() as f64
    }

    pub fn penalty(&self) -> f64 {
        penalty_value(&self.bits, self.lambda)
    }

    /// Overwrites the latent weights (clipped) and re-derives the mask.
    pub fn set_latent(&mut self, latent: &[f64]) -> Result<()> {
        if latent.len() != self.latent.len() {
            return Err(Error::Config("latent length mismatch".into()));
        }
        let a1 = self.hyper.alpha1;
        self.latent.iter_mut().zip(latent).for_each(|(d, &s)| *d = s.clamp(-a1, a1));
        self.bits = quantize(&self.latent);
        Ok(())
    }

    /// One mask step: task gradient plus `λ·b`, Adam, clip, re-quantize.
    pub fn mask_update(&mut self, task_grad: &[f64], lr: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::State("mask update while frozen".into()));
        }
        if task_grad.len() != self.latent.len() {
            return Err(Error::Config(format!(
                "mask gradient has {} entries, mask has {}",
                task_grad.len(),
                self.latent.len()
            )));
        }
        let mut g = penalty_grad(&self.bits, self.lambda)?;
        g.iter_mut().zip(task_grad).for_each(|(p, &t)| *p += t);
        let g = ste_backward(&g);
        self.adam.step(&mut self.latent, &g, lr)?;
        let a1 = self.hyper.alpha1;
        self.latent.iter_mut().for_each(|v| *v = v.clamp(-a1, a1));
        self.bits = quantize(&self.latent);
        Ok(())
    }

    /// `ṽ ← γ·ṽ + (1 − γ)·b`.
    pub fn smooth_update(&mut self) {
        let gamma = self.hyper.gamma;
        for (v, &b) in self.smoothed.iter_mut().zip(&self.bits) {
            *v = gamma * *v + (1.0 - gamma) * if b { 1.0 } else { 0.0 };
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// On-disk layout of a [`MaskState`] checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskRecord {
    b_r: Vec<f64>,
    b: Vec<u8>,
    v_smooth: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: u64,
    lambda: f64,
    frozen: bool,
    hyper: MaskHyper,
}

impl From<MaskState> for MaskRecord {
    fn from(s: MaskState) -> Self {
        Self {
            b: s.bits.iter().map(|&b| u8::from(b)).collect(),
            b_r: s.latent,
            v_smooth: s.smoothed,
            adam_m: s.adam.m,
            adam_v: s.adam.v,
            adam_t: s.adam.t,
            lambda: s.lambda,
            frozen: s.frozen,
            hyper: s.hyper,
        }
    }
}

impl TryFrom<MaskRecord> for MaskState {
    type Error = String;

    fn try_from(r: MaskRecord) -> std::result::Result<Self, String> {
        let k = r.b_r.len();
        if [r.b.len(), r.v_smooth.len(), r.adam_m.len(), r.adam_v.len()]
            .iter()
            .any(|&l| l != k)
        {
            return Err("mask record fields have inconsistent lengths".into());
        }
        let bits = quantize(&r.b_r);
        if bits.iter().zip(&r.b).any(|(&q, &b)| u8::from(q) != b) {
            return Err("b does not match quantize(b_r)".into());
        }
        if r.b_r.iter().any(|v| v.abs() > r.hyper.alpha1) {
            return Err("b_r exceeds the clip bound".into());
        }
        if r.v_smooth.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("v_smooth outside [0, 1]".into());
        }
        let mut adam = AdamState::new(k);
        adam.m = r.adam_m;
        adam.v = r.adam_v;
        adam.t = r.adam_t;
        Ok(Self {
            latent: r.b_r,
            bits,
            smoothed: r.v_smooth,
            adam,
            hyper: r.hyper,
            lambda: r.lambda,
            frozen: r.frozen,
        })
    }
}
