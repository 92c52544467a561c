//! Binding of mask entries to network inputs and weight tensors.
//!
//! Mask entries are laid out binding by binding: an input range contributes
//! one entry per feature column, a weight tensor one entry per scalar in
//! row-major order. Entries not covered by any binding are implicitly one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{Network, ParamId, ParamKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    /// Feature columns `start..end` of the network input.
    InputFeatures { start: usize, end: usize },
    /// Every scalar of a linear weight matrix.
    WeightTensor { param: ParamId },
}

/// Which entries a mask covers, resolved against a concrete network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Binding>", into = "Vec<Binding>")]
pub struct MaskSpec {
    bindings: Vec<Binding>,
    /// Entry offset of each binding.
    offsets: Vec<usize>,
    /// Size of each binding.
    sizes: Vec<usize>,
    /// Total masked entries.
    k: usize,
}

impl TryFrom<Vec<Binding>> for MaskSpec {
    type Error = String;

    fn try_from(bindings: Vec<Binding>) -> std::result::Result<Self, String> {
        Ok(Self {
            bindings,
            offsets: Vec::new(),
            sizes: Vec::new(),
            k: 0,
        })
    }
}

impl From<MaskSpec> for Vec<Binding> {
    fn from(s: MaskSpec) -> Self {
        s.bindings
    }
}

impl MaskSpec {
    /// Validates `bindings` against `net` (existing, disjoint, weights only).
    pub fn new(bindings: Vec<Binding>, net: &Network) -> Result<Self> {
        let mut input_cover = vec![false; net.input_dim()];
        let mut seen_params = Vec::new();
        let mut offsets = Vec::with_capacity(bindings.len());
        let mut sizes = Vec::with_capacity(bindings.len());
        let mut k = 0;
        for b in &bindings {
            let size = match *b {
                Binding::InputFeatures { start, end } => {
                    if start >= end || end > net.input_dim() {
                        return Err(Error::Config(format!(
                            "input binding {start}..{end} invalid for {} inputs",
                            net.input_dim()
                        )));
                    }
                    for c in &mut input_cover[start..end] {
                        if *c {
                            return Err(Error::Config(format!("input binding {start}..{end} overlaps another")));
                        }
                        *c = true;
                    }
                    end - start
                }
                Binding::WeightTensor { param } => {
                    if param >= net.params().len() {
                        return Err(Error::Config(format!("no parameter with id {param}")));
                    }
                    if net.param_info(param).1 != ParamKind::Weight {
                        return Err(Error::Config(format!(
                            "parameter {param} is not a linear weight; only weights can be masked"
                        )));
                    }
                    if seen_params.contains(&param) {
                        return Err(Error::Config(format!("parameter {param} bound twice")));
                    }
                    seen_params.push(param);
                    net.param(param).len()
                }
            };
            offsets.push(k);
            sizes.push(size);
            k += size;
        }
        if k == 0 {
            return Err(Error::Config("mask specification covers no entries".into()));
        }
        Ok(Self {
            bindings,
            offsets,
            sizes,
            k,
        })
    }

    /// Re-validates a deserialized spec against `net`.
    pub fn resolve(self, net: &Network) -> Result<Self> {
        Self::new(self.bindings, net)
    }

    /// One entry per input feature.
    pub fn inputs(net: &Network) -> Result<Self> {
        Self::new(
            vec![Binding::InputFeatures {
                start: 0,
                end: net.input_dim(),
            }],
            net,
        )
    }

    /// One entry per scalar of every linear weight matrix.
    pub fn all_weights(net: &Network) -> Result<Self> {
        Self::new(
            net.weight_ids()
                .into_iter()
                .map(|param| Binding::WeightTensor { param })
                .collect(),
            net,
        )
    }

    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    /// Number of masked entries.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of maskable entries: inputs plus every parameter scalar.
    pub fn n(net: &Network) -> usize {
        net.input_dim() + net.num_params()
    }

    pub fn has_inputs(&self) -> bool {
        self.bindings.iter().any(|b| matches!(b, Binding::InputFeatures { .. }))
    }

    fn check_bits(&self, bits: &[bool]) -> Result<()> {
        if self.offsets.len() != self.bindings.len() {
            return Err(Error::State("mask specification used before being resolved against a network".into()));
        }
        if bits.len() != self.k {
            return Err(Error::Config(format!("mask has {} bits, specification needs {}", bits.len(), self.k)));
        }
        Ok(())
    }

    fn entries(&self) -> impl Iterator<Item = (&Binding, std::ops::Range<usize>)> {
        self.bindings
            .iter()
            .zip(self.offsets.iter().zip(&self.sizes))
            .map(|(b, (&o, &s))| (b, o..o + s))
    }

    fn weight_entries(&self) -> impl Iterator<Item = (ParamId, std::ops::Range<usize>)> + '_ {
        self.entries().filter_map(|(b, r)| match *b {
            Binding::WeightTensor { param } => Some((param, r)),
            _ => None,
        })
    }
}

#[inline]
fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Masked copy of an input batch; unbound columns pass through.
pub fn mask_inputs(spec: &MaskSpec, bits: &[bool], inputs: &DenseMatrix) -> Result<DenseMatrix> {
    spec.check_bits(bits)?;
    let mut out = inputs.clone();
    let cols = inputs.cols();
    for (b, range) in spec.entries() {
        if let Binding::InputFeatures { start, end } = *b {
            if end > cols {
                return Err(Error::Config(format!("input binding {start}..{end} exceeds {cols} columns")));
            }
            let mbits = &bits[range];
            for row in out.values_mut().chunks_exact_mut(cols) {
                for (v, &m) in row[start..end].iter_mut().zip(mbits) {
                    if !m {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Masked copies of inputs and parameters. The originals are untouched.
pub fn apply_mask(
    spec: &MaskSpec,
    bits: &[bool],
    inputs: &DenseMatrix,
    params: &[DenseMatrix],
) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
    let x = mask_inputs(spec, bits, inputs)?;
    let mut ps = params.to_vec();
    for (param, range) in spec.weight_entries() {
        let p = ps
            .get_mut(param)
            .ok_or_else(|| Error::Config(format!("no parameter with id {param}")))?;
        if p.len() != range.len() {
            return Err(Error::Config(format!("parameter {param} shape changed since binding")));
        }
        p.values_mut().iter_mut().zip(&bits[range]).for_each(|(w, &m)| *w *= bit(m));
    }
    Ok((x, ps))
}

/// Gradient of the loss with respect to each mask bit.
///
/// `params` hold the unmasked weights and `dparams` carry (in their `grad`
/// buffers) the gradient with respect to the masked weights; both may be the
/// same slice. For a weight entry this is `W_i · ∂L/∂W'_i`; for an input
/// feature it is `Σ_rows x · ∂L/∂x'` over the batch.
pub fn mask_grad(
    spec: &MaskSpec,
    inputs: &DenseMatrix,
    params: &[DenseMatrix],
    dinputs: Option<&[f64]>,
    dparams: &[DenseMatrix],
) -> Result<Vec<f64>> {
    if spec.offsets.len() != spec.bindings.len() {
        return Err(Error::State("mask specification used before being resolved against a network".into()));
    }
    let mut g = vec![0.0; spec.k];
    let cols = inputs.cols();
    for (b, range) in spec.entries() {
        match *b {
            Binding::InputFeatures { start, .. } => {
                let dx = dinputs.ok_or_else(|| Error::State("input gradient missing for input mask".into()))?;
                if dx.len() != inputs.len() {
                    return Err(Error::State("input gradient does not match the batch".into()));
                }
                let out = &mut g[range];
                for (row, drow) in inputs.values().chunks_exact(cols).zip(dx.chunks_exact(cols)) {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += row[start + j] * drow[start + j];
                    }
                }
            }
            Binding::WeightTensor { param } => {
                let (w, dw) = match (params.get(param), dparams.get(param)) {
                    (Some(w), Some(dw)) => (w.values(), dw.grad()),
                    _ => return Err(Error::State(format!("gradient buffers for parameter {param} missing"))),
                };
                if dw.len() != range.len() || w.len() != range.len() {
                    return Err(Error::State(format!("gradient buffer for parameter {param} has wrong size")));
                }
                for ((o, &wv), &gv) in g[range].iter_mut().zip(w).zip(dw) {
                    *o = wv * gv;
                }
            }
        }
    }
    Ok(g)
}

/// `dW_i = b_i · dW'_i`.
pub fn weight_grad_through_mask(bits: &[bool], dmasked: &[f64]) -> Vec<f64> {
    dmasked.iter().zip(bits).map(|(&g, &b)| g * bit(b)).collect()
}

/// Latent weights of the bound tensors, saved while the network holds masked copies.
#[derive(Debug)]
#[must_use = "the network keeps masked weights until the stash is restored"]
pub struct WeightStash {
    saved: Vec<(ParamId, Vec<f64>)>,
}

impl WeightStash {
    /// Puts the latent weights back. Gradient buffers are left as they are.
    pub fn restore(self, net: &mut Network) {
        for (param, vals) in self.saved {
            net.param_mut(param).values_mut().copy_from_slice(&vals);
        }
    }
}

/// Multiplies the bound weight tensors of `net` by their bits, returning the originals.
pub fn mask_weights_in_place(spec: &MaskSpec, bits: &[bool], net: &mut Network) -> Result<WeightStash> {
    spec.check_bits(bits)?;
    let mut saved = Vec::new();
    for (param, range) in spec.weight_entries() {
        let p = net.param_mut(param);
        saved.push((param, p.values().to_vec()));
        p.values_mut().iter_mut().zip(&bits[range]).for_each(|(w, &m)| *w *= bit(m));
    }
    Ok(WeightStash { saved })
}

/// In-place [`weight_grad_through_mask`] on every bound tensor's gradient.
pub fn mask_weight_grads_in_place(spec: &MaskSpec, bits: &[bool], net: &mut Network) -> Result<()> {
    spec.check_bits(bits)?;
    for (param, range) in spec.weight_entries() {
        net.param_mut(param)
            .grad_mut()
            .iter_mut()
            .zip(&bits[range])
            .for_each(|(g, &m)| *g *= bit(m));
    }
    Ok(())
}

/// A copy of `net` whose bound weights are multiplied by their bits.
pub fn masked_network(spec: &MaskSpec, bits: &[bool], net: &Network) -> Result<Network> {
    let mut out = net.clone();
    let stash = mask_weights_in_place(spec, bits, &mut out)?;
    drop(stash);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{loss, loss_and_grad, LayerSpec, LossKind, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn linear(in_dim: usize, out_dim: usize, w: &[f64]) -> Network {
        let mut net = Network::new(vec![LayerSpec::Linear { in_dim, out_dim }], &mut rng()).unwrap();
        net.param_mut(0).values_mut().copy_from_slice(w);
        net
    }

    #[test]
    fn input_mask_zeroes_columns() {
        let net = linear(2, 1, &[1.0, 1.0]);
        let spec = MaskSpec::inputs(&net).unwrap();
        let x = DenseMatrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let (xm, _) = apply_mask(&spec, &[true, false], &x, net.params()).unwrap();
        assert_eq!(xm.values(), &[2.0, 0.0]);
    }

    #[test]
    fn all_ones_is_identity() {
        let net = linear(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        let spec = MaskSpec::new(
            vec![Binding::InputFeatures { start: 0, end: 2 }, Binding::WeightTensor { param: 0 }],
            &net,
        )
        .unwrap();
        assert_eq!(spec.k(), 6);
        let x = DenseMatrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let (xm, ps) = apply_mask(&spec, &[true; 6], &x, net.params()).unwrap();
        assert_eq!(xm.values(), x.values());
        assert_eq!(ps[0].values(), net.param(0).values());
    }

    #[test]
    fn weight_mask_elementwise() {
        let net = linear(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        let spec = MaskSpec::all_weights(&net).unwrap();
        let x = DenseMatrix::zeros(1, 2);
        let (_, ps) = apply_mask(&spec, &[true, false, false, true], &x, net.params()).unwrap();
        assert_eq!(ps[0].values(), &[1.0, 0.0, 0.0, 4.0]);
        assert_eq!(net.param(0).values(), &[1.0, -2.0, 3.0, 4.0]);
    }

    #[test]
    fn invalid_bindings() {
        let net = linear(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        assert!(MaskSpec::new(vec![Binding::WeightTensor { param: 1 }], &net).is_err(), "bias");
        assert!(MaskSpec::new(vec![Binding::WeightTensor { param: 7 }], &net).is_err());
        assert!(MaskSpec::new(vec![Binding::InputFeatures { start: 1, end: 3 }], &net).is_err());
        assert!(MaskSpec::new(
            vec![
                Binding::InputFeatures { start: 0, end: 2 },
                Binding::InputFeatures { start: 1, end: 2 }
            ],
            &net
        )
        .is_err());
        let spec = MaskSpec::all_weights(&net).unwrap();
        assert!(apply_mask(&spec, &[true; 3], &DenseMatrix::zeros(1, 2), net.params()).is_err());
        assert_eq!(MaskSpec::n(&net), 2 + 4 + 2);
    }

    #[test]
    fn scalar_chain_rule() {
        // y = (w·b)·x with w = 2, x = 3, dy = 1 → ∂y/∂b = w·x = 6
        let mut net = linear(1, 1, &[2.0]);
        let spec = MaskSpec::all_weights(&net).unwrap();
        let x = DenseMatrix::from_rows(&[vec![3.0]]).unwrap();
        let stash = mask_weights_in_place(&spec, &[true], &mut net).unwrap();
        net.forward(&x, Mode::Train, &mut rng()).unwrap();
        net.backward(&DenseMatrix::from_rows(&[vec![1.0]]).unwrap()).unwrap();
        stash.restore(&mut net);
        let g = mask_grad(&spec, &x, net.params(), net.input_grad(), net.params()).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn weight_grad_through_mask_gates() {
        assert_eq!(weight_grad_through_mask(&[false, true], &[5.0, -1.0]), vec![0.0, -1.0]);
        assert_eq!(weight_grad_through_mask(&[true, true], &[5.0, -1.0]), vec![5.0, -1.0]);
    }

    /// Loss as a function of a real-valued relaxation of the mask: inputs and
    /// weights are multiplied by `m` directly.
    fn relaxed_loss(net: &Network, spec: &MaskSpec, m: &[f64], x: &DenseMatrix, y: &[usize]) -> f64 {
        let mut net = net.clone();
        let mut x = x.clone();
        let cols = x.cols();
        for (b, range) in spec.entries() {
            match *b {
                Binding::InputFeatures { start, .. } => {
                    for row in x.values_mut().chunks_exact_mut(cols) {
                        for (j, &mv) in m[range.clone()].iter().enumerate() {
                            row[start + j] *= mv;
                        }
                    }
                }
                Binding::WeightTensor { param } => {
                    for (w, &mv) in net.param_mut(param).values_mut().iter_mut().zip(&m[range]) {
                        *w *= mv;
                    }
                }
            }
        }
        loss(&net.predict(&x).unwrap(), y, LossKind::SoftmaxCrossEntropy).unwrap()
    }

    // Includes masked-out entries: their gradient is W_i·dW'_i, nonzero in general.
    #[test]
    fn mask_grad_matches_relaxed_finite_differences() {
        let mut r = rng();
        let layers = vec![
            LayerSpec::Linear { in_dim: 3, out_dim: 4 },
            LayerSpec::Tanh { dim: 4 },
            LayerSpec::Linear { in_dim: 4, out_dim: 2 },
        ];
        let mut net = Network::new(layers, &mut r).unwrap();
        let mut bindings = vec![Binding::InputFeatures { start: 0, end: 3 }];
        bindings.extend(net.weight_ids().into_iter().map(|param| Binding::WeightTensor { param }));
        let spec = MaskSpec::new(bindings, &net).unwrap();
        let bits: Vec<bool> = (0..spec.k()).map(|i| i % 3 != 1).collect();
        let x = DenseMatrix::from_vec(5, 3, (0..15).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let y = vec![0, 1, 1, 0, 1];

        let xm = mask_inputs(&spec, &bits, &x).unwrap();
        let stash = mask_weights_in_place(&spec, &bits, &mut net).unwrap();
        let logits = net.forward(&xm, Mode::Train, &mut r).unwrap();
        let (_, d) = loss_and_grad(&logits, &y, LossKind::SoftmaxCrossEntropy).unwrap();
        net.backward(&d).unwrap();
        stash.restore(&mut net);
        let g = mask_grad(&spec, &x, net.params(), net.input_grad(), net.params()).unwrap();

        let m0: Vec<f64> = bits.iter().map(|&b| bit(b)).collect();
        let h = 1e-5;
        let mut masked_out_nonzero = 0;
        for i in 0..spec.k() {
            let mut p = m0.clone();
            p[i] += h;
            let mut q = m0.clone();
            q[i] -= h;
            let fd = (relaxed_loss(&net, &spec, &p, &x, &y) - relaxed_loss(&net, &spec, &q, &x, &y)) / (2.0 * h);
            let diff = (g[i] - fd).abs();
            assert!(diff < 1e-8 || diff / g[i].abs().max(fd.abs()) < 1e-4, "entry {i}: {} vs {fd}", g[i]);
            if !bits[i] && g[i].abs() > 1e-6 {
                masked_out_nonzero += 1;
            }
        }
        assert!(masked_out_nonzero > 0);
    }

    // With a mean loss, duplicating every row leaves the input-mask gradient unchanged.
    #[test]
    fn duplicated_rows_under_mean_loss() {
        let mut r = rng();
        let layers = vec![LayerSpec::Linear { in_dim: 2, out_dim: 2 }];
        let net = Network::new(layers, &mut r).unwrap();
        let spec = MaskSpec::inputs(&net).unwrap();
        let grad_for = |x: &DenseMatrix, y: &[usize]| {
            let mut n = net.clone();
            let logits = n.forward(x, Mode::Train, &mut rng()).unwrap();
            let (_, d) = loss_and_grad(&logits, y, LossKind::SoftmaxCrossEntropy).unwrap();
            n.backward(&d).unwrap();
            mask_grad(&spec, x, n.params(), n.input_grad(), n.params()).unwrap()
        };
        let one = grad_for(&DenseMatrix::from_rows(&[vec![0.3, -0.7]]).unwrap(), &[1]);
        let two = grad_for(&DenseMatrix::from_rows(&[vec![0.3, -0.7], vec![0.3, -0.7]]).unwrap(), &[1, 1]);
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn in_place_masking_is_non_destructive() {
        let mut net = linear(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        let spec = MaskSpec::all_weights(&net).unwrap();
        let stash = mask_weights_in_place(&spec, &[false, false, true, false], &mut net).unwrap();
        assert_eq!(net.param(0).values(), &[0.0, 0.0, 3.0, 0.0]);
        stash.restore(&mut net);
        assert_eq!(net.param(0).values(), &[1.0, -2.0, 3.0, 4.0]);
    }

    #[test]
    fn spec_serializes_as_binding_list() {
        let net = linear(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        let spec = MaskSpec::all_weights(&net).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"[{"kind":"weight_tensor","param":0}]"#);
        let back: MaskSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.resolve(&net).unwrap(), spec);
    }
}
