//! Feed-forward network engine with hand-written backpropagation.
//!
//! A [`Network`] is an ordered list of [`LayerSpec`]s plus a flat parameter
//! list. Parameters are addressed by index ([`ParamId`]) so that masks and
//! optimizers can refer to them without borrowing the layers.
//!
//! `forward` in [`Mode::Train`] caches every activation; `backward` consumes
//! that cache and overwrites each parameter's `grad` buffer with the gradient
//! of the batch-mean loss. The gradient with respect to the network input is
//! also kept (unless disabled) because input masks need it.

pub mod gradcheck;
pub mod layer;
pub mod loss;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{gemm, DenseMatrix};

pub use layer::{Activation, LayerSpec, MlpSpec};
pub use loss::{loss, loss_and_grad, positive_scores, predict_classes, LossKind};

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    None,
    Linear { weight: ParamId, bias: ParamId },
    BatchNorm { gamma: ParamId, beta: ParamId, stats: usize },
}

#[derive(Debug, Clone)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct Cache {
    /// `acts[0]` is the input batch, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<f64>>,
    /// Dropout scale masks or batch-norm normalized inputs, per layer.
    aux: Vec<Vec<f64>>,
    /// Batch-norm inverse standard deviations, per layer.
    inv_std: Vec<Vec<f64>>,
    rows: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LayerSpec>,
    slots: Vec<Slot>,
    params: Vec<DenseMatrix>,
    param_info: Vec<(usize, ParamKind)>,
    running: Vec<RunningStats>,
    need_input_grad: bool,
    input_grad: Option<Vec<f64>>,
    cache: Cache,
}

impl Network {
    /// Builds and initializes a network.
    ///
    /// Linear layers feeding a ReLU get Kaiming-uniform weights, all others
    /// Xavier-uniform; biases start at zero, batch-norm at identity.
    pub fn new<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for l in &layers {
            l.validate()?;
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Config(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }

        let mut params = Vec::new();
        let mut param_info = Vec::new();
        let mut running = Vec::new();
        let mut slots = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            let slot = match *spec {
                LayerSpec::Linear { in_dim, out_dim } => {
                    let relu_next = matches!(layers.get(i + 1), Some(LayerSpec::Relu { .. }));
                    let limit = if relu_next {
                        (6.0 / in_dim as f64).sqrt()
                    } else {
                        (6.0 / (in_dim + out_dim) as f64).sqrt()
                    };
                    let w: Vec<f64> = (0..in_dim * out_dim)
                        .map(|_| rng.random_range(-limit..limit))
                        .collect();
                    params.push(DenseMatrix::from_vec(in_dim, out_dim, w)?);
                    param_info.push((i, ParamKind::Weight));
                    params.push(DenseMatrix::zeros(1, out_dim));
                    param_info.push((i, ParamKind::Bias));
                    Slot::Linear {
                        weight: params.len() - 2,
                        bias: params.len() - 1,
                    }
                }
                LayerSpec::BatchNorm1d { dim, .. } => {
                    params.push(DenseMatrix::from_vec(1, dim, vec![1.0; dim])?);
                    param_info.push((i, ParamKind::Gamma));
                    params.push(DenseMatrix::zeros(1, dim));
                    param_info.push((i, ParamKind::Beta));
                    running.push(RunningStats {
                        mean: vec![0.0; dim],
                        var: vec![1.0; dim],
                    });
                    Slot::BatchNorm {
                        gamma: params.len() - 2,
                        beta: params.len() - 1,
                        stats: running.len() - 1,
                    }
                }
                _ => Slot::None,
            };
            slots.push(slot);
        }

        let n = layers.len();
        Ok(Self {
            layers,
            slots,
            params,
            param_info,
            running,
            need_input_grad: true,
            input_grad: None,
            cache: Cache {
                acts: vec![Vec::new(); n + 1],
                aux: vec![Vec::new(); n],
                inv_std: vec![Vec::new(); n],
                rows: None,
            },
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn params(&self) -> &[DenseMatrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &DenseMatrix {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.params[id]
    }

    /// Owning layer index and role of a parameter.
    pub fn param_info(&self, id: ParamId) -> (usize, ParamKind) {
        self.param_info[id]
    }

    /// Ids of all linear weight matrices (biases and batch-norm affine excluded).
    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.param_info
            .iter()
            .enumerate()
            .filter(|(_, (_, k))| *k == ParamKind::Weight)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(DenseMatrix::len).sum()
    }

    /// Whether `backward` should also produce the gradient with respect to the input.
    pub fn set_need_input_grad(&mut self, on: bool) {
        self.need_input_grad = on;
    }

    /// Gradient of the loss with respect to the last training batch.
    pub fn input_grad(&self) -> Option<&[f64]> {
        self.input_grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(DenseMatrix::zero_grad);
    }

    /// Running batch-norm statistics as `(mean, var)` per batch-norm layer.
    pub fn running_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.running.iter().map(|s| (&s.mean[..], &s.var[..])).collect()
    }

    fn check_batch(&self, batch: &DenseMatrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Config(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Runs the network. `Train` samples dropout from `rng`, normalizes with
    /// batch statistics and caches activations; `Eval` is a pure function of
    /// the parameters and running statistics.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        batch: &DenseMatrix,
        mode: Mode,
        rng: &mut R,
    ) -> Result<DenseMatrix> {
        match mode {
            Mode::Eval => self.predict(batch),
            Mode::Train => self.forward_train(batch, rng),
        }
    }

    fn forward_train<R: Rng + ?Sized>(&mut self, batch: &DenseMatrix, rng: &mut R) -> Result<DenseMatrix> {
        self.check_batch(batch)?;
        let n = batch.rows();
        self.cache.rows = None;
        self.input_grad = None;
        {
            let a0 = &mut self.cache.acts[0];
            a0.clear();
            a0.extend_from_slice(batch.values());
        }
        for i in 0..self.layers.len() {
            let (head, tail) = self.cache.acts.split_at_mut(i + 1);
            let x = &head[i];
            let y = &mut tail[0];
            let out_dim = self.layers[i].out_dim();
            y.clear();
            y.resize(n * out_dim, 0.0);
            match (self.layers[i].clone(), self.slots[i]) {
                (LayerSpec::Linear { in_dim, out_dim }, Slot::Linear { weight, bias }) => {
                    linear_forward(n, in_dim, out_dim, x, &self.params[weight], &self.params[bias], y);
                }
                (LayerSpec::Tanh { .. }, _) => {
                    y.iter_mut().zip(x).for_each(|(o, &v)| *o = v.tanh());
                }
                (LayerSpec::Relu { .. }, _) => {
                    y.iter_mut().zip(x).for_each(|(o, &v)| *o = v.max(0.0));
                }
                (LayerSpec::Dropout { p, .. }, _) => {
                    let mask = &mut self.cache.aux[i];
                    mask.clear();
                    if p == 0.0 {
                        mask.resize(x.len(), 1.0);
                    } else {
                        let scale = 1.0 / (1.0 - p);
                        mask.extend((0..x.len()).map(|_| {
                            if rng.random::<f64>() < p {
                                0.0
                            } else {
                                scale
                            }
                        }));
                    }
                    y.iter_mut()
                        .zip(x.iter().zip(mask.iter()))
                        .for_each(|(o, (&v, &m))| *o = v * m);
                }
                (LayerSpec::BatchNorm1d { dim, momentum, eps }, Slot::BatchNorm { gamma, beta, stats }) => {
                    let xhat = &mut self.cache.aux[i];
                    let inv_std = &mut self.cache.inv_std[i];
                    xhat.clear();
                    xhat.resize(n * dim, 0.0);
                    inv_std.clear();
                    inv_std.resize(dim, 0.0);
                    let g = self.params[gamma].values();
                    let b = self.params[beta].values();
                    let run = &mut self.running[stats];
                    for j in 0..dim {
                        let mean = (0..n).map(|r| x[r * dim + j]).sum::<f64>() / n as f64;
                        let var = (0..n).map(|r| (x[r * dim + j] - mean).powi(2)).sum::<f64>() / n as f64;
                        let is = 1.0 / (var + eps).sqrt();
                        inv_std[j] = is;
                        for r in 0..n {
                            let h = (x[r * dim + j] - mean) * is;
                            xhat[r * dim + j] = h;
                            y[r * dim + j] = g[j] * h + b[j];
                        }
                        let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                        run.mean[j] = momentum * run.mean[j] + (1.0 - momentum) * mean;
                        run.var[j] = momentum * run.var[j] + (1.0 - momentum) * unbiased;
                    }
                }
                (spec, _) => unreachable!("slot mismatch for {spec:?}"),
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: i,
                    what: "activation".into(),
                });
            }
        }
        self.cache.rows = Some(n);
        let last = &self.cache.acts[self.layers.len()];
        DenseMatrix::from_vec(n, self.output_dim(), last.clone())
    }

    /// Eval-mode forward pass; does not touch the training cache.
    pub fn predict(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_batch(batch)?;
        let n = batch.rows();
        let mut x = batch.values().to_vec();
        let mut y = Vec::new();
        for (i, spec) in self.layers.iter().enumerate() {
            y.clear();
            match (spec, self.slots[i]) {
                (&LayerSpec::Linear { in_dim, out_dim }, Slot::Linear { weight, bias }) => {
                    y.resize(n * out_dim, 0.0);
                    linear_forward(n, in_dim, out_dim, &x, &self.params[weight], &self.params[bias], &mut y);
                }
                (LayerSpec::Tanh { .. }, _) => y.extend(x.iter().map(|v| v.tanh())),
                (LayerSpec::Relu { .. }, _) => y.extend(x.iter().map(|v| v.max(0.0))),
                (LayerSpec::Dropout { .. }, _) => y.extend_from_slice(&x),
                (&LayerSpec::BatchNorm1d { dim, eps, .. }, Slot::BatchNorm { gamma, beta, stats }) => {
                    let g = self.params[gamma].values();
                    let b = self.params[beta].values();
                    let run = &self.running[stats];
                    y.extend(x.iter().enumerate().map(|(idx, &v)| {
                        let j = idx % dim;
                        g[j] * (v - run.mean[j]) / (run.var[j] + eps).sqrt() + b[j]
                    }));
                }
                (spec, _) => unreachable!("slot mismatch for {spec:?}"),
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: i,
                    what: "activation".into(),
                });
            }
            std::mem::swap(&mut x, &mut y);
        }
        DenseMatrix::from_vec(n, self.output_dim(), x)
    }

    /// Backpropagates `dlogits` through the cached training pass.
    pub fn backward(&mut self, dlogits: &DenseMatrix) -> Result<()> {
        let n = self
            .cache
            .rows
            .take()
            .ok_or_else(|| Error::State("backward called without a cached training forward pass".into()))?;
        if dlogits.rows() != n || dlogits.cols() != self.output_dim() {
            return Err(Error::Config(format!(
                "upstream gradient is {}x{}, expected {n}x{}",
                dlogits.rows(),
                dlogits.cols(),
                self.output_dim()
            )));
        }
        if !dlogits.is_finite() {
            return Err(Error::NonFiniteGradient("backward"));
        }
        let mut d = dlogits.values().to_vec();
        let mut dx = Vec::new();
        for i in (0..self.layers.len()).rev() {
            let x = &self.cache.acts[i];
            let need_dx = i > 0 || self.need_input_grad;
            dx.clear();
            dx.resize(n * self.layers[i].in_dim(), 0.0);
            match (self.layers[i].clone(), self.slots[i]) {
                (LayerSpec::Linear { in_dim, out_dim }, Slot::Linear { weight, bias }) => {
                    {
                        let wg = self.params[weight].grad_mut();
                        gemm(in_dim, n, out_dim, x, true, &d, false, wg, false);
                    }
                    {
                        let bg = self.params[bias].grad_mut();
                        bg.iter_mut().for_each(|g| *g = 0.0);
                        for r in 0..n {
                            for (g, &v) in bg.iter_mut().zip(&d[r * out_dim..(r + 1) * out_dim]) {
                                *g += v;
                            }
                        }
                    }
                    if need_dx {
                        gemm(n, out_dim, in_dim, &d, false, self.params[weight].values(), true, &mut dx, false);
                    }
                }
                (LayerSpec::Tanh { .. }, _) => {
                    let y = &self.cache.acts[i + 1];
                    for ((o, &g), &yv) in dx.iter_mut().zip(&d).zip(y) {
                        *o = g * (1.0 - yv * yv);
                    }
                }
                (LayerSpec::Relu { .. }, _) => {
                    for ((o, &g), &xv) in dx.iter_mut().zip(&d).zip(x) {
                        *o = if xv > 0.0 { g } else { 0.0 };
                    }
                }
                (LayerSpec::Dropout { .. }, _) => {
                    for ((o, &g), &m) in dx.iter_mut().zip(&d).zip(&self.cache.aux[i]) {
                        *o = g * m;
                    }
                }
                (LayerSpec::BatchNorm1d { dim, .. }, Slot::BatchNorm { gamma, beta, .. }) => {
                    let xhat = &self.cache.aux[i];
                    let inv_std = &self.cache.inv_std[i];
                    let gvals = self.params[gamma].values().to_vec();
                    let nf = n as f64;
                    let mut dgamma = vec![0.0; dim];
                    let mut dbeta = vec![0.0; dim];
                    for j in 0..dim {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for r in 0..n {
                            let idx = r * dim + j;
                            dgamma[j] += d[idx] * xhat[idx];
                            dbeta[j] += d[idx];
                            let dh = d[idx] * gvals[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[idx];
                        }
                        for r in 0..n {
                            let idx = r * dim + j;
                            let dh = d[idx] * gvals[j];
                            dx[idx] = inv_std[j] / nf * (nf * dh - sum_dh - xhat[idx] * sum_dh_h);
                        }
                    }
                    self.params[gamma].grad_mut().copy_from_slice(&dgamma);
                    self.params[beta].grad_mut().copy_from_slice(&dbeta);
                }
                (spec, _) => unreachable!("slot mismatch for {spec:?}"),
            }
            std::mem::swap(&mut d, &mut dx);
        }
        self.input_grad = self.need_input_grad.then_some(d);
        Ok(())
    }
}

fn linear_forward(
    n: usize,
    in_dim: usize,
    out_dim: usize,
    x: &[f64],
    w: &DenseMatrix,
    b: &DenseMatrix,
    y: &mut [f64],
) {
    gemm(n, in_dim, out_dim, x, false, w.values(), false, y, false);
    let bias = b.values();
    for row in y.chunks_exact_mut(out_dim) {
        row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn linear(in_dim: usize, out_dim: usize, w: Vec<f64>) -> Network {
        let mut net = Network::new(vec![LayerSpec::Linear { in_dim, out_dim }], &mut rng()).unwrap();
        net.param_mut(0).values_mut().copy_from_slice(&w);
        net
    }

    #[test]
    fn identity_linear() {
        let mut net = linear(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let x = DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = net.forward(&x, Mode::Train, &mut rng()).unwrap();
        assert_eq!(y.values(), &[3.0, 4.0]);
    }

    #[test]
    fn tanh_of_zero() {
        let mut net = Network::new(vec![LayerSpec::Tanh { dim: 1 }], &mut rng()).unwrap();
        let x = DenseMatrix::from_rows(&[vec![0.0]]).unwrap();
        assert_eq!(net.forward(&x, Mode::Train, &mut rng()).unwrap().values(), &[0.0]);
    }

    #[test]
    fn linear_sum() {
        let net = linear(2, 1, vec![1.0, 1.0]);
        let x = DenseMatrix::from_rows(&[vec![0.5, 0.25]]).unwrap();
        assert_eq!(net.predict(&x).unwrap().values(), &[0.75]);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let net = linear(2, 1, vec![1.0, 1.0]);
        let x = DenseMatrix::from_rows(&[vec![0.5]]).unwrap();
        assert!(matches!(net.predict(&x), Err(Error::Config(_))));
        assert!(Network::new(
            vec![LayerSpec::Linear { in_dim: 2, out_dim: 3 }, LayerSpec::Tanh { dim: 4 }],
            &mut rng()
        )
        .is_err());
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut net = Network::new(
            vec![LayerSpec::Tanh { dim: 1 }, LayerSpec::Linear { in_dim: 1, out_dim: 1 }],
            &mut rng(),
        )
        .unwrap();
        net.param_mut(0).values_mut()[0] = f64::INFINITY;
        let x = DenseMatrix::from_rows(&[vec![0.5]]).unwrap();
        match net.forward(&x, Mode::Train, &mut rng()) {
            Err(Error::NonFinite { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn chain_rule_by_hand() {
        let mut net = linear(1, 1, vec![2.0]);
        let x = DenseMatrix::from_rows(&[vec![3.0]]).unwrap();
        net.forward(&x, Mode::Train, &mut rng()).unwrap();
        net.backward(&DenseMatrix::from_rows(&[vec![1.0]]).unwrap()).unwrap();
        assert_eq!(net.param(0).grad(), &[3.0]);
        assert_eq!(net.param(1).grad(), &[1.0]);
        assert_eq!(net.input_grad().unwrap(), &[2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let spec = MlpSpec {
            input_dim: 3,
            hidden: vec![4, 4],
            output_dim: 2,
            activation: Activation::Relu,
            batch_norm: true,
            dropout: Some(0.3),
        };
        let mut net = Network::new(spec.layers(), &mut rng()).unwrap();
        let x = DenseMatrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]]).unwrap();
        net.forward(&x, Mode::Train, &mut rng()).unwrap();
        net.backward(&DenseMatrix::zeros(2, 2)).unwrap();
        for p in net.params() {
            assert!(p.grad().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = linear(1, 1, vec![2.0]);
        assert!(matches!(
            net.backward(&DenseMatrix::zeros(1, 1)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn eval_is_bit_identical_across_calls() {
        let spec = MlpSpec {
            input_dim: 5,
            hidden: vec![8],
            output_dim: 3,
            activation: Activation::Relu,
            batch_norm: true,
            dropout: Some(0.5),
        };
        let mut net = Network::new(spec.layers(), &mut rng()).unwrap();
        let mut r = rng();
        let x = DenseMatrix::from_vec(4, 5, (0..20).map(|i| (i as f64).sin()).collect()).unwrap();
        net.forward(&x, Mode::Train, &mut r).unwrap();
        let a = net.forward(&x, Mode::Eval, &mut r).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn dropout_rate_and_scaling() {
        let p = 0.3;
        let n = 10_000;
        let mut net = Network::new(vec![LayerSpec::Dropout { dim: n, p }], &mut rng()).unwrap();
        let x = DenseMatrix::from_vec(1, n, vec![1.0; n]).unwrap();
        let y = net.forward(&x, Mode::Train, &mut rng()).unwrap();
        let zeros = y.values().iter().filter(|&&v| v == 0.0).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((zeros - n as f64 * p).abs() < 3.0 * sigma, "zeroed {zeros}");
        let scale = 1.0 / (1.0 - p);
        assert!(y.values().iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-15));
    }

    #[test]
    fn batch_norm_normalizes_per_feature() {
        let mut net = Network::new(vec![LayerSpec::batch_norm(3)], &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..3 * 64).map(|_| r.random_range(-5.0..9.0)).collect();
        let x = DenseMatrix::from_vec(64, 3, vals).unwrap();
        let y = net.forward(&x, Mode::Train, &mut r).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..64).map(|i| y.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6);
            // eps = 1e-5 keeps the variance just below one
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }
}
