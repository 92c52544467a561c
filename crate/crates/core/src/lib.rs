//! Sparse neural networks with deterministic binary masks.
//!
//! A binary mask is trained jointly with the network through a straight-through
//! estimator on latent real-valued weights, with an L0 penalty pushing bits to
//! zero. The same machinery selects input features and regularizes tabular
//! models.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fselect;
pub mod mask;
pub mod masking;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod train;

pub use data::{Dataset, SplitSpec};
pub use error::{Error, Result};
pub use experiment::{run_experiment, run_gradcheck, ExperimentConfig, GradcheckConfig, Summary, Task};
pub use mask::{MaskHyper, MaskState};
pub use masking::{Binding, MaskSpec};
pub use matrix::DenseMatrix;
pub use nn::{Activation, LayerSpec, LossKind, MlpSpec, Mode, Network};
pub use metrics::{auc, ci95, TrialAggregate};
pub use optim::{CosineSchedule, Optimizer, OptimizerKind};
pub use train::{build_network, train, EpochMetrics, EvalSets, MaskTarget, Regularizer, TrainConfig, TrainedModel, Trainer};
