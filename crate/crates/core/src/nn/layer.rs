//! Layer descriptions and the MLP builder used throughout the experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// One layer of a feed-forward stack.
///
/// `Linear` stores its weight as an `(in_dim, out_dim)` matrix so that a batch
/// `X` maps to `X·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    Tanh {
        dim: usize,
    },
    Relu {
        dim: usize,
    },
    /// Running statistics follow `running = momentum·running + (1 − momentum)·batch`.
    BatchNorm1d {
        dim: usize,
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
        #[serde(default = "default_bn_eps")]
        eps: f64,
    },
    Dropout {
        dim: usize,
        p: f64,
    },
}

fn default_bn_momentum() -> f64 {
    DEFAULT_BN_MOMENTUM
}

fn default_bn_eps() -> f64 {
    DEFAULT_BN_EPS
}

impl LayerSpec {
    pub fn batch_norm(dim: usize) -> Self {
        LayerSpec::BatchNorm1d {
            dim,
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Linear { in_dim, .. } => in_dim,
            LayerSpec::Tanh { dim }
            | LayerSpec::Relu { dim }
            | LayerSpec::BatchNorm1d { dim, .. }
            | LayerSpec::Dropout { dim, .. } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Linear { out_dim, .. } => out_dim,
            _ => self.in_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim() == 0 || self.out_dim() == 0 {
            return Err(Error::Config(format!("{self:?}: dimensions must be positive")));
        }
        match *self {
            LayerSpec::Dropout { p, .. } if !(0.0..1.0).contains(&p) => Err(Error::Config(
                format!("dropout probability {p} outside [0, 1)"),
            )),
            LayerSpec::BatchNorm1d { momentum, eps, .. }
                if !(0.0..=1.0).contains(&momentum) || eps <= 0.0 =>
            {
                Err(Error::Config(format!(
                    "batch norm momentum {momentum} / eps {eps} out of range"
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected classifier description: hidden widths plus per-block options.
///
/// Each hidden block is `Linear → activation [→ BatchNorm1d] [→ Dropout]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub dropout: Option<f64>,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl MlpSpec {
    /// The 64/20 tanh classifier used for the tabular tasks.
    pub fn tabular(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 20],
            output_dim,
            activation: Activation::Tanh,
            batch_norm: false,
            dropout: None,
        }
    }

    pub fn with_input_dim(&self, input_dim: usize) -> Self {
        Self {
            input_dim,
            ..self.clone()
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            out.push(LayerSpec::Linear {
                in_dim: prev,
                out_dim: h,
            });
            out.push(match self.activation {
                Activation::Tanh => LayerSpec::Tanh { dim: h },
                Activation::Relu => LayerSpec::Relu { dim: h },
            });
            if self.batch_norm {
                out.push(LayerSpec::batch_norm(h));
            }
            if let Some(p) = self.dropout {
                out.push(LayerSpec::Dropout { dim: h, p });
            }
            prev = h;
        }
        out.push(LayerSpec::Linear {
            in_dim: prev,
            out_dim: self.output_dim,
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabular_layout() {
        let layers = MlpSpec::tabular(10, 2).layers();
        assert_eq!(
            layers,
            vec![
                LayerSpec::Linear { in_dim: 10, out_dim: 64 },
                LayerSpec::Tanh { dim: 64 },
                LayerSpec::Linear { in_dim: 64, out_dim: 20 },
                LayerSpec::Tanh { dim: 20 },
                LayerSpec::Linear { in_dim: 20, out_dim: 2 },
            ]
        );
    }

    #[test]
    fn relu_then_batch_norm_ordering() {
        let spec = MlpSpec {
            input_dim: 4,
            hidden: vec![8],
            output_dim: 3,
            activation: Activation::Relu,
            batch_norm: true,
            dropout: Some(0.2),
        };
        let kinds: Vec<_> = spec.layers().iter().map(|l| format!("{l:?}")).collect();
        assert!(kinds[1].starts_with("Relu"));
        assert!(kinds[2].starts_with("BatchNorm1d"));
        assert!(kinds[3].starts_with("Dropout"));
    }

    #[test]
    fn dropout_probability_must_be_below_one() {
        assert!(LayerSpec::Dropout { dim: 3, p: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { dim: 3, p: 0.0 }.validate().is_ok());
    }
}
