//! Shared fixtures for the benchmarks.

use binmask::data::synth_planted_features;
use binmask::train::Trainer;
use binmask::{build_network, Activation, DenseMatrix, MaskHyper, MlpSpec, Regularizer, TrainConfig};

/// A 2×64 tanh MLP on 20 planted features with one 256-row minibatch, ready
/// for [`Trainer::step`]. With `lambda`, every weight carries a trainable mask bit.
pub fn step_workload(lambda: Option<f64>) -> (Trainer, DenseMatrix, Vec<usize>) {
    let data = synth_planted_features(256, 20, 5, 0.0, 7).expect("valid generator settings");
    let mlp = MlpSpec {
        input_dim: 20,
        hidden: vec![64, 64],
        output_dim: 2,
        activation: Activation::Tanh,
        batch_norm: false,
        dropout: None,
    };
    let cfg = TrainConfig {
        regularizer: lambda.map_or(Regularizer::None, |lambda| Regularizer::BinMask { lambda }),
        mask: MaskHyper {
            warmup_fraction: 0.0,
            ..MaskHyper::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(build_network(&mlp, &cfg).expect("valid network"), &cfg).expect("valid config");
    trainer.begin_epoch(0).expect("first epoch");
    (trainer, data.features, data.labels)
}
