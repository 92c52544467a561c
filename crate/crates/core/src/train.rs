//! Joint training of network weights and binary masks, plus the baseline
//! regularizers (L1, L2, dropout) and early stopping.
//!
//! Each iteration quantizes the latent mask, updates the smoothed mask,
//! multiplies the bound inputs and weights by their bits, runs forward and
//! backward on the masked network, steps the weights with the gradient gated
//! by the mask, and then (outside warmup) steps the latent mask weights.

use std::borrow::Cow;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::{warmup_epochs, MaskHyper, MaskState};
use crate::masking::{
    mask_grad, mask_inputs, mask_weight_grads_in_place, mask_weights_in_place, masked_network, Binding, MaskSpec,
};
use crate::matrix::DenseMatrix;
use crate::metrics::auc;
use crate::nn::{loss, loss_and_grad, positive_scores, predict_classes, LayerSpec, LossKind, MlpSpec, Mode, Network, ParamKind};
use crate::optim::{CosineSchedule, Optimizer, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    BinMask {
        lambda: f64,
    },
    L1 {
        lambda: f64,
    },
    /// Replaces the configured weight decay with `lambda`.
    L2 {
        lambda: f64,
    },
    /// Dropout after every hidden block; see [`TrainConfig::layers`].
    Dropout {
        p: f64,
    },
}

/// What a BinMask regularizer masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    /// Every input feature.
    Inputs,
    /// Every scalar of every linear weight matrix.
    #[default]
    Weights,
    Custom(Vec<Binding>),
}

impl MaskTarget {
    pub fn resolve(&self, net: &Network) -> Result<MaskSpec> {
        match self {
            MaskTarget::Inputs => MaskSpec::inputs(net),
            MaskTarget::Weights => MaskSpec::all_weights(net),
            MaskTarget::Custom(b) => MaskSpec::new(b.clone(), net),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Weight learning rate, annealed per epoch with a cosine from `lr_start` to `lr_end`.
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub regularizer: Regularizer,
    pub mask: MaskHyper,
    pub mask_target: MaskTarget,
    /// Keep the epoch with the highest validation AUC.
    pub early_stopping: bool,
    /// Extra epochs of weight training with the mask fixed.
    pub finetune_epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            lr_start: 0.1,
            lr_end: 1e-5,
            weight_decay: 5e-4,
            regularizer: Regularizer::None,
            mask: MaskHyper::default(),
            mask_target: MaskTarget::Weights,
            early_stopping: false,
            finetune_epochs: 0,
            loss: LossKind::SoftmaxCrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the regularization comparison: AdamW, cosine 0.002 → 5e-5,
    /// decoupled decay 0.01, 16 epochs, early stopping.
    pub fn adamw_tabular() -> Self {
        Self {
            epochs: 16,
            optimizer: OptimizerKind::AdamW,
            lr_start: 0.002,
            lr_end: 5e-5,
            weight_decay: 0.01,
            early_stopping: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        match self.regularizer {
            Regularizer::BinMask { lambda } | Regularizer::L1 { lambda } | Regularizer::L2 { lambda } if lambda < 0.0 => {
                return Err(Error::Config(format!("regularization strength {lambda} is negative")));
            }
            Regularizer::Dropout { p } if !(0.0..1.0).contains(&p) => {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
            }
            _ => {}
        }
        self.mask.validate()
    }

    /// Layer list for `mlp`, with dropout added when that is the regularizer.
    pub fn layers(&self, mlp: &MlpSpec) -> Vec<LayerSpec> {
        let mut m = mlp.clone();
        if let Regularizer::Dropout { p } = self.regularizer {
            m.dropout = Some(p);
        }
        m.layers()
    }

    fn effective_weight_decay(&self) -> f64 {
        match self.regularizer {
            Regularizer::L2 { lambda } => lambda,
            _ => self.weight_decay,
        }
    }
}

/// A fresh network for `mlp` under `cfg`, initialized from `cfg.seed` on a
/// generator stream separate from the one used for minibatch order and dropout.
pub fn build_network(mlp: &MlpSpec, cfg: &TrainConfig) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    Network::new(cfg.layers(mlp), &mut rng)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean task loss over the epoch's minibatches (penalty excluded).
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub val_auc: Option<f64>,
    /// Fraction of zero mask bits at the end of the epoch.
    pub sparsity: Option<f64>,
    /// Mask learning rate used this epoch; absent while the mask is frozen.
    pub mask_lr: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,test_loss,test_acc,val_auc,sparsity,mask_lr";

/// Writes the metrics as CSV; absent values are empty fields.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[EpochMetrics]) -> std::io::Result<()> {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }
    writeln!(w, "{METRICS_HEADER}")?;
    for m in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            m.epoch,
            m.train_loss,
            opt(m.test_loss),
            opt(m.test_acc),
            opt(m.val_auc),
            opt(m.sparsity),
            opt(m.mask_lr)
        )?;
    }
    Ok(())
}

/// Held-out sets evaluated after every epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalSets<'a> {
    pub test: Option<&'a Dataset>,
    pub validation: Option<&'a Dataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Only for two-class data containing both classes.
    pub auc: Option<f64>,
}

/// A trained network together with its mask, if any.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: Network,
    pub mask: Option<(MaskSpec, MaskState)>,
    pub loss: LossKind,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch restored by early stopping.
    pub best_epoch: Option<usize>,
}

fn evaluate_logits(logits: &DenseMatrix, labels: &[usize], kind: LossKind) -> Result<Evaluation> {
    let l = loss(logits, labels, kind)?;
    let pred = predict_classes(logits, kind);
    let correct = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    let binary = kind == LossKind::SigmoidBce || logits.cols() == 2;
    let a = if binary {
        auc(&positive_scores(logits, kind)?, labels).ok()
    } else {
        None
    };
    Ok(Evaluation {
        loss: l,
        accuracy: correct as f64 / labels.len() as f64,
        auc: a,
    })
}

fn masked_predict(net: &Network, mask: Option<(&MaskSpec, &MaskState)>, x: &DenseMatrix) -> Result<DenseMatrix> {
    match mask {
        None => net.predict(x),
        Some((spec, state)) => {
            let eff = masked_network(spec, state.bits(), net)?;
            if spec.has_inputs() {
                eff.predict(&mask_inputs(spec, state.bits(), x)?)
            } else {
                eff.predict(x)
            }
        }
    }
}

impl TrainedModel {
    /// The network with mask bits multiplied into its bound weights.
    pub fn effective_network(&self) -> Result<Network> {
        match &self.mask {
            Some((spec, state)) => masked_network(spec, state.bits(), &self.net),
            None => Ok(self.net.clone()),
        }
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        masked_predict(&self.net, self.mask.as_ref().map(|(s, m)| (s, m)), x)
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<Evaluation> {
        evaluate_logits(&self.predict(&ds.features)?, &ds.labels, self.loss)
    }

    pub fn mask_state(&self) -> Option<&MaskState> {
        self.mask.as_ref().map(|(_, m)| m)
    }
}

/// Stateful training loop. [`train`] drives it epoch by epoch; the step API is
/// public for finer-grained experiments.
#[derive(Debug)]
pub struct Trainer {
    net: Network,
    cfg: TrainConfig,
    opt: Optimizer,
    mask: Option<(MaskSpec, MaskState)>,
    rng: ChaCha8Rng,
    warmup: usize,
    mask_lr: Option<f64>,
    epoch: usize,
    iteration: usize,
}

impl Trainer {
    pub fn new(net: Network, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mask = match cfg.regularizer {
            Regularizer::BinMask { lambda } => {
                let spec = cfg.mask_target.resolve(&net)?;
                let state = MaskState::new(spec.k(), cfg.mask, lambda)?;
                Some((spec, state))
            }
            _ => None,
        };
        Self::build(net, cfg, mask)
    }

    /// Uses an explicit mask instead of the one implied by the configuration.
    pub fn with_mask(net: Network, cfg: &TrainConfig, spec: MaskSpec, state: MaskState) -> Result<Self> {
        cfg.validate()?;
        let spec = spec.resolve(&net)?;
        if state.len() != spec.k() {
            return Err(Error::Config(format!(
                "mask state has {} entries, specification needs {}",
                state.len(),
                spec.k()
            )));
        }
        Self::build(net, cfg, Some((spec, state)))
    }

    fn build(mut net: Network, cfg: &TrainConfig, mask: Option<(MaskSpec, MaskState)>) -> Result<Self> {
        let needs_input_grad = mask.as_ref().is_some_and(|(s, _)| s.has_inputs());
        net.set_need_input_grad(needs_input_grad);
        Ok(Self {
            net,
            opt: Optimizer::new(cfg.optimizer, cfg.effective_weight_decay(), cfg.lr_start),
            warmup: warmup_epochs(cfg.epochs, cfg.mask.warmup_fraction),
            cfg: cfg.clone(),
            mask,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            mask_lr: None,
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn mask(&self) -> Option<&MaskState> {
        self.mask.as_ref().map(|(_, m)| m)
    }

    pub fn mask_mut(&mut self) -> Option<&mut MaskState> {
        self.mask.as_mut().map(|(_, m)| m)
    }

    pub fn mask_spec(&self) -> Option<&MaskSpec> {
        self.mask.as_ref().map(|(s, _)| s)
    }

    /// Frozen warmup epochs, `round(warmup_fraction · epochs)`.
    pub fn warmup_epochs(&self) -> usize {
        self.warmup
    }

    pub fn mask_lr(&self) -> Option<f64> {
        self.mask_lr
    }

    pub fn set_weight_lr(&mut self, lr: f64) {
        self.opt.set_lr(lr);
    }

    /// Sets the weight learning rate for `epoch` and freezes or releases the mask.
    /// Epochs past the configured count are finetuning epochs with a fixed mask.
    pub fn begin_epoch(&mut self, epoch: usize) -> Result<()> {
        let e = self.cfg.epochs;
        let lr = if epoch < e {
            CosineSchedule::new(self.cfg.lr_start, self.cfg.lr_end, e).lr(epoch)?
        } else {
            CosineSchedule::new(self.cfg.lr_start, self.cfg.lr_end, self.cfg.finetune_epochs.max(1))
                .lr((epoch - e).min(self.cfg.finetune_epochs.saturating_sub(1)))?
        };
        self.opt.set_lr(lr);
        self.mask_lr = None;
        if let Some((_, state)) = &mut self.mask {
            let trainable = epoch >= self.warmup && epoch < e;
            state.set_frozen(!trainable);
            if trainable {
                let h = state.hyper();
                self.mask_lr = Some(CosineSchedule::new(h.eta0, h.eta1, e - self.warmup).lr(epoch - self.warmup)?);
            }
        }
        self.epoch = epoch;
        self.iteration = 0;
        Ok(())
    }

    /// One iteration on a minibatch; returns the task loss.
    pub fn step(&mut self, x: &DenseMatrix, y: &[usize]) -> Result<f64> {
        let Trainer {
            net,
            cfg,
            opt,
            mask,
            rng,
            mask_lr,
            epoch,
            iteration,
            ..
        } = self;
        let diverged = |loss: f64| Error::Diverged {
            epoch: *epoch,
            iteration: *iteration,
            loss,
        };
        let mut pass = |net: &mut Network, x: &DenseMatrix| -> Result<f64> {
            let logits = match net.forward(x, Mode::Train, rng) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let (l, d) = loss_and_grad(&logits, y, cfg.loss)?;
            if !l.is_finite() {
                return Err(diverged(l));
            }
            net.backward(&d)?;
            Ok(l)
        };

        let mut mask_update = None;
        let loss_value = match mask {
            None => pass(net, x)?,
            Some((spec, state)) => {
                state.smooth_update();
                let xm = if spec.has_inputs() {
                    Cow::Owned(mask_inputs(spec, state.bits(), x)?)
                } else {
                    Cow::Borrowed(x)
                };
                let stash = mask_weights_in_place(spec, state.bits(), net)?;
                let l = pass(net, &xm);
                stash.restore(net);
                let l = l?;
                if !state.is_frozen() {
                    let lr = mask_lr.ok_or_else(|| Error::State("mask released without a learning rate".into()))?;
                    let g = mask_grad(spec, x, net.params(), net.input_grad(), net.params())?;
                    mask_update = Some((g, lr));
                }
                mask_weight_grads_in_place(spec, state.bits(), net)?;
                l
            }
        };

        if let Regularizer::L1 { lambda } = cfg.regularizer {
            add_l1_subgradient(net, lambda);
        }
        opt.step(net.params_mut())?;
        if let (Some((g, lr)), Some((_, state))) = (mask_update, mask) {
            state.mask_update(&g, lr)?;
        }
        *iteration += 1;
        Ok(loss_value)
    }

    /// One pass over `data` in a fresh random order, `max(1, ⌊N/batch⌋)`
    /// minibatches. Returns the mean minibatch loss.
    pub fn run_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<f64> {
        self.begin_epoch(epoch)?;
        let n = data.n_rows();
        let b = self.cfg.batch_size.min(n);
        let iters = (n / b).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for t in 0..iters {
            let idx = &order[t * b..(t + 1) * b];
            let x = data.features.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            total += self.step(&x, &y)?;
        }
        Ok(total / iters as f64)
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<Evaluation> {
        let logits = masked_predict(&self.net, self.mask.as_ref().map(|(s, m)| (s, m)), &ds.features)?;
        evaluate_logits(&logits, &ds.labels, self.cfg.loss)
    }

    pub fn into_model(self) -> TrainedModel {
        TrainedModel {
            net: self.net,
            mask: self.mask,
            loss: self.cfg.loss,
            metrics: Vec::new(),
            best_epoch: None,
        }
    }
}

/// `∂ λ‖W‖₁ = λ·sign(W)` on linear weights, zero at exactly zero.
fn add_l1_subgradient(net: &mut Network, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for id in net.weight_ids() {
        let (vals, grads) = net.param_mut(id).split_mut();
        for (g, &w) in grads.iter_mut().zip(vals.iter()) {
            if w > 0.0 {
                *g += lambda;
            } else if w < 0.0 {
                *g -= lambda;
            }
        }
    }
}

/// Trains `net` on `train`, logging one [`EpochMetrics`] per epoch.
pub fn train(net: Network, train: &Dataset, eval: EvalSets<'_>, cfg: &TrainConfig) -> Result<TrainedModel> {
    if train.n_features() != net.input_dim() {
        return Err(Error::Config(format!(
            "network expects {} inputs, dataset has {} features",
            net.input_dim(),
            train.n_features()
        )));
    }
    if cfg.early_stopping && eval.validation.is_none() {
        return Err(Error::Config("early stopping needs a validation set".into()));
    }
    let mut tr = Trainer::new(net, cfg)?;
    let mut metrics = Vec::with_capacity(cfg.epochs + cfg.finetune_epochs);
    let mut best: Option<(f64, usize, Network, Option<MaskState>)> = None;
    for epoch in 0..cfg.epochs + cfg.finetune_epochs {
        let train_loss = tr.run_epoch(train, epoch)?;
        let test = eval.test.map(|t| tr.evaluate(t)).transpose()?;
        let val_auc = match eval.validation {
            Some(v) => tr.evaluate(v)?.auc,
            None => None,
        };
        if cfg.early_stopping {
            let a = val_auc.ok_or_else(|| {
                Error::Input("early stopping needs a two-class validation set with both classes".into())
            })?;
            if best.as_ref().is_none_or(|b| a > b.0) {
                best = Some((a, epoch, tr.net.clone(), tr.mask().cloned()));
            }
        }
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            test_loss: test.map(|t| t.loss),
            test_acc: test.map(|t| t.accuracy),
            val_auc,
            sparsity: tr.mask().map(MaskState::sparsity),
            mask_lr: tr.mask_lr(),
        });
    }
    let mut model = tr.into_model();
    if let Some((_, epoch, net, mask)) = best {
        model.net = net;
        if let (Some((_, state)), Some(m)) = (&mut model.mask, mask) {
            *state = m;
        }
        model.best_epoch = Some(epoch);
    }
    model.metrics = metrics;
    Ok(model)
}

/// Trains with an L1 penalty `λ‖W‖₁` on the linear weights.
pub fn train_with_l1(net: Network, data: &Dataset, lambda: f64, cfg: &TrainConfig) -> Result<TrainedModel> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("L1 strength {lambda} is negative")));
    }
    let cfg = TrainConfig {
        regularizer: Regularizer::L1 { lambda },
        early_stopping: false,
        ..cfg.clone()
    };
    train(net, data, EvalSets::default(), &cfg)
}

/// Index of the checkpoint with the highest AUC; ties go to the earliest.
pub fn early_stop_select<'a, T>(checkpoints: &'a [T], aucs: &[f64]) -> Result<(usize, &'a T)> {
    if checkpoints.is_empty() || checkpoints.len() != aucs.len() {
        return Err(Error::Input(format!(
            "{} checkpoints for {} AUC values",
            checkpoints.len(),
            aucs.len()
        )));
    }
    let mut best = 0;
    for (i, &a) in aucs.iter().enumerate() {
        if a > aucs[best] {
            best = i;
        }
    }
    Ok((best, &checkpoints[best]))
}

/// Weight diagnostics over all linear weights, flattened.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightNorms {
    /// Fraction of weights with `|w| ≥ 10⁻⁴`.
    pub mean_l0: f64,
    /// `(1/n Σ|w|)`.
    pub mean_l1: f64,
    /// `(1/n Σ w²)^{1/2}`.
    pub mean_l2: f64,
}

pub fn weight_norm_values(weights: &[f64]) -> WeightNorms {
    if weights.is_empty() {
        return WeightNorms {
            mean_l0: 0.0,
            mean_l1: 0.0,
            mean_l2: 0.0,
        };
    }
    let n = weights.len() as f64;
    WeightNorms {
        mean_l0: weights.iter().filter(|w| w.abs() >= 1e-4).count() as f64 / n,
        mean_l1: weights.iter().map(|w| w.abs()).sum::<f64>() / n,
        mean_l2: (weights.iter().map(|w| w * w).sum::<f64>() / n).sqrt(),
    }
}

/// [`weight_norm_values`] over the linear weights of `net`, as seen by the
/// forward pass (mask applied).
pub fn weight_norm_report(model: &TrainedModel) -> Result<WeightNorms> {
    let net = model.effective_network()?;
    let flat: Vec<f64> = (0..net.params().len())
        .filter(|&id| net.param_info(id).1 == ParamKind::Weight)
        .flat_map(|id| net.param(id).values().iter().copied())
        .collect();
    Ok(weight_norm_values(&flat))
}
