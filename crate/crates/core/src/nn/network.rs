//! Sequential network with cached reverse-mode backprop.

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binarize::{effective_weight, ste_route_gradients, BinarizationState};
use crate::error::{Error, Result};
use crate::nn::init::he_init;
use crate::nn::loss::softmax_cross_entropy_loss;
use crate::nn::ops::{self, BatchNormCache, BatchStats, Mode};
use crate::nn::spec::{LayerSpec, NetworkSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    Shift,
}

/// Where a flat parameter index lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamInfo {
    pub layer: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone)]
struct LayerState<T> {
    /// `[weight, bias]` for dense/conv, `[gain, shift]` for batch norm.
    params: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    /// `[mean, var]` for batch norm.
    running: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Weighted { input: Tensor<T>, binarized: Option<Tensor<T>> },
    BatchNorm(Option<BatchNormCache<T>>),
    Relu { input: Tensor<T> },
    Flatten { shape: Vec<usize> },
}

struct ForwardPass<T> {
    output: Tensor<T>,
    caches: Vec<LayerCache<T>>,
    stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    layers: Vec<LayerState<T>>,
    /// Position among weight-bearing layers (0-based) for each layer.
    weight_slot: Vec<Option<usize>>,
    binarization: BinarizationState,
    cache: Option<Vec<LayerCache<T>>>,
}

impl<T: Scalar> Network<T> {
    /// He-initialized weights, zero biases, unit batch-norm gains, all
    /// layers in floating point.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut weight_slot = Vec::with_capacity(spec.layers.len());
        let mut slot = 0;
        for layer in &spec.layers {
            let state = match *layer {
                LayerSpec::Dense { outputs, .. } | LayerSpec::Conv2d { out_channels: outputs, .. } => {
                    weight_slot.push(Some(slot));
                    slot += 1;
                    let w = he_init(layer, &mut rng)?;
                    LayerState {
                        grads: vec![Tensor::zeros(w.shape()), Tensor::zeros(&[outputs])],
                        params: vec![w, Tensor::zeros(&[outputs])],
                        running: Vec::new(),
                    }
                }
                LayerSpec::BatchNorm { features } => {
                    weight_slot.push(None);
                    LayerState {
                        params: vec![Tensor::full(&[features], T::one()), Tensor::zeros(&[features])],
                        grads: vec![Tensor::zeros(&[features]), Tensor::zeros(&[features])],
                        running: vec![Tensor::zeros(&[features]), Tensor::full(&[features], T::one())],
                    }
                }
                LayerSpec::Relu | LayerSpec::Flatten => {
                    weight_slot.push(None);
                    LayerState { params: Vec::new(), grads: Vec::new(), running: Vec::new() }
                }
            };
            layers.push(state);
        }
        Ok(Network { binarization: BinarizationState::zeros(slot), spec, layers, weight_slot, cache: None })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weight_layer_count(&self) -> usize {
        self.binarization.len()
    }

    pub fn binarization(&self) -> &BinarizationState {
        &self.binarization
    }

    pub fn set_binarization(&mut self, state: BinarizationState) -> Result<()> {
        if state.len() != self.weight_layer_count() {
            return Err(Error::config(format!(
                "binarization state has {} flags, network has {} weight layers",
                state.len(),
                self.weight_layer_count()
            )));
        }
        self.binarization = state;
        Ok(())
    }

    fn layer_of_weight(&self, layer: usize) -> usize {
        self.weight_slot
            .iter()
            .position(|&s| s == Some(layer - 1))
            .unwrap_or_else(|| panic!("weight layer {layer} outside 1..={}", self.weight_layer_count()))
    }

    /// Float (shadow) weights of weight-bearing layer `layer`, 1-based.
    pub fn shadow_weight(&self, layer: usize) -> &Tensor<T> {
        &self.layers[self.layer_of_weight(layer)].params[0]
    }

    pub fn shadow_weight_mut(&mut self, layer: usize) -> &mut Tensor<T> {
        let idx = self.layer_of_weight(layer);
        &mut self.layers[idx].params[0]
    }

    /// Gradient of the loss with respect to the shadow weights of `layer`.
    pub fn weight_grad(&self, layer: usize) -> &Tensor<T> {
        &self.layers[self.layer_of_weight(layer)].grads[0]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn grads(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.grads.iter())
    }

    /// Batch-norm running means and variances, layer order.
    pub fn buffers(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.running.iter())
    }

    pub(crate) fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.running.iter_mut())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    fn locate(&self, index: usize) -> (usize, usize) {
        let mut rest = index;
        for (li, l) in self.layers.iter().enumerate() {
            if rest < l.params.len() {
                return (li, rest);
            }
            rest -= l.params.len();
        }
        panic!("parameter index {index} outside 0..{}", self.param_count());
    }

    pub fn param(&self, index: usize) -> &Tensor<T> {
        let (l, p) = self.locate(index);
        &self.layers[l].params[p]
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Tensor<T> {
        let (l, p) = self.locate(index);
        &mut self.layers[l].params[p]
    }

    pub fn grad(&self, index: usize) -> &Tensor<T> {
        let (l, p) = self.locate(index);
        &self.layers[l].grads[p]
    }

    pub fn param_info(&self, index: usize) -> ParamInfo {
        let (layer, p) = self.locate(index);
        let kind = match (self.spec.layers[layer], p) {
            (LayerSpec::BatchNorm { .. }, 0) => ParamKind::Gain,
            (LayerSpec::BatchNorm { .. }, _) => ParamKind::Shift,
            (_, 0) => ParamKind::Weight,
            _ => ParamKind::Bias,
        };
        ParamInfo { layer, kind }
    }

    /// Every parameter with its current gradient, for the optimizer.
    pub fn param_grad_pairs(&mut self) -> impl Iterator<Item = (&mut Tensor<T>, &Tensor<T>)> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut().zip(l.grads.iter()))
    }

    /// Same network in another precision. Caches are dropped.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let cast_all = |ts: &[Tensor<T>]| ts.iter().map(Tensor::cast).collect::<Vec<_>>();
        Network {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerState { params: cast_all(&l.params), grads: cast_all(&l.grads), running: cast_all(&l.running) })
                .collect(),
            weight_slot: self.weight_slot.clone(),
            binarization: self.binarization.clone(),
            cache: None,
        }
    }

    fn conform_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let per_sample: usize = self.spec.input_shape.iter().product();
        if x.shape().len() < 2 || x.row_len() != per_sample {
            return Err(Error::config(format!(
                "input {:?} does not match per-sample shape {:?}",
                x.shape(),
                self.spec.input_shape
            )));
        }
        let mut shape = vec![x.rows()];
        shape.extend_from_slice(&self.spec.input_shape);
        x.clone().reshape(&shape)
    }

    fn run_forward(&self, x: &Tensor<T>, mode: Mode, keep: bool) -> Result<ForwardPass<T>> {
        let mut cur = self.conform_input(x)?;
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut stats = Vec::new();
        for (i, (spec, state)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            match *spec {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    let slot = self.weight_slot[i].expect("weight layer slot");
                    let w = effective_weight(&state.params[0], self.binarization.is_set(slot + 1));
                    let y = match spec.geometry() {
                        Some(g) => ops::conv2d_forward(&cur, &w, &state.params[1], &g)?,
                        None => ops::dense_forward(&cur, &w, &state.params[1])?,
                    };
                    if keep {
                        let binarized = match w {
                            Cow::Owned(t) => Some(t),
                            Cow::Borrowed(_) => None,
                        };
                        caches.push(LayerCache::Weighted { input: cur, binarized });
                    }
                    cur = y;
                }
                LayerSpec::BatchNorm { .. } => {
                    let out = ops::batchnorm_forward(
                        &cur,
                        &state.params[0],
                        &state.params[1],
                        &state.running[0],
                        &state.running[1],
                        mode,
                    )?;
                    if let Some(s) = out.stats {
                        stats.push((i, s));
                    }
                    if keep {
                        caches.push(LayerCache::BatchNorm(out.cache));
                    }
                    cur = out.output;
                }
                LayerSpec::Relu => {
                    let y = ops::relu_forward(&cur);
                    if keep {
                        caches.push(LayerCache::Relu { input: cur });
                    }
                    cur = y;
                }
                LayerSpec::Flatten => {
                    let shape = cur.shape().to_vec();
                    let n = cur.rows();
                    let width = cur.row_len();
                    cur = cur.reshape(&[n, width])?;
                    if keep {
                        caches.push(LayerCache::Flatten { shape });
                    }
                }
            }
        }
        Ok(ForwardPass { output: cur, caches, stats })
    }

    /// Forward pass that records what backward needs. In train mode the
    /// batch-norm running statistics are updated.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let pass = self.run_forward(x, mode, true)?;
        for (i, s) in &pass.stats {
            let running = &mut self.layers[*i].running;
            let (mean, var) = running.split_at_mut(1);
            ops::update_running_stats(&mut mean[0], &mut var[0], s);
        }
        self.cache = Some(pass.caches);
        Ok(pass.output)
    }

    /// Eval-mode logits; no state changes.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run_forward(x, Mode::Eval, false)?.output)
    }

    /// Mean cross-entropy of a forward pass in `mode`; no state changes.
    pub fn loss(&self, x: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<T> {
        let logits = self.run_forward(x, mode, false)?.output;
        softmax_cross_entropy_loss(&logits, labels)
    }

    /// Sign pattern of every ReLU input for a forward pass in `mode`.
    pub fn relu_pattern(&self, x: &Tensor<T>, mode: Mode) -> Result<Vec<bool>> {
        let pass = self.run_forward(x, mode, true)?;
        Ok(pass
            .caches
            .iter()
            .filter_map(|c| match c {
                LayerCache::Relu { input } => Some(input.data().iter().map(|&v| v > T::zero())),
                _ => None,
            })
            .flatten()
            .collect())
    }

    /// Reverse-mode pass from `d loss / d logits`. Overwrites every
    /// parameter gradient and returns the gradient with respect to the
    /// input. Binarized layers route their weight gradient to the shadow
    /// unchanged.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let caches = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("backward called without a preceding forward".into()))?;
        let mut dy = dlogits.clone();
        for ((spec, state), cache) in self.spec.layers.iter().zip(self.layers.iter_mut()).zip(caches).rev() {
            dy = match cache {
                LayerCache::Weighted { input, binarized } => {
                    let w = binarized.as_ref().unwrap_or(&state.params[0]);
                    let g = match spec.geometry() {
                        Some(geo) => ops::conv2d_backward(&input, w, &dy, &geo)?,
                        None => ops::dense_backward(&input, w, &dy)?,
                    };
                    state.grads[0] = if binarized.is_some() { ste_route_gradients(g.weight) } else { g.weight };
                    state.grads[1] = g.bias;
                    g.input
                }
                LayerCache::BatchNorm(cache) => {
                    let cache = cache
                        .ok_or_else(|| Error::Usage("backward through an eval-mode batch norm".into()))?;
                    let g = ops::batchnorm_backward(&cache, &state.params[0], &dy)?;
                    state.grads[0] = g.gamma;
                    state.grads[1] = g.beta;
                    g.input
                }
                LayerCache::Relu { input } => ops::relu_backward(&input, &dy)?,
                LayerCache::Flatten { shape } => dy.reshape(&shape)?,
            };
        }
        let mut input_shape = vec![dy.rows()];
        input_shape.extend_from_slice(&self.spec.input_shape);
        dy.reshape(&input_shape)
    }

    /// Drops cached activations from the last forward pass.
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::softmax_cross_entropy;

    fn toy() -> Network<f64> {
        Network::new(NetworkSpec::fully_connected(&[4], &[5, 3]).unwrap(), 11).unwrap()
    }

    fn batch(n: usize, width: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, width], |i| ((i * 7 + 3) % 10) as f64 / 5.0 - 1.0)
    }

    #[test]
    fn backward_before_forward_is_usage_error() {
        let mut net = toy();
        assert!(matches!(net.backward(&Tensor::zeros(&[2, 3])), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let mut net = toy();
        net.forward(&batch(4, 4), Mode::Train).unwrap();
        net.backward(&Tensor::zeros(&[4, 3])).unwrap();
        assert!(net.grads().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_dense_quadratic_loss() {
        // loss = ½ Σ y², y = W x + b ⇒ dW = (W x + b) xᵀ.
        let spec = NetworkSpec::new(vec![3], vec![LayerSpec::Dense { inputs: 3, outputs: 2 }]).unwrap();
        let mut net = Network::<f64>::new(spec, 5).unwrap();
        let x = Tensor::from_rows(&[&[0.5, -1.0, 2.0]]);
        let y = net.forward(&x, Mode::Train).unwrap();
        net.backward(&y).unwrap();
        let w = net.shadow_weight(1).clone();
        for o in 0..2 {
            let delta: f64 = (0..3).map(|i| w.data()[o * 3 + i] * x.data()[i]).sum();
            for i in 0..3 {
                let want = delta * x.data()[i];
                assert!((net.weight_grad(1).data()[o * 3 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_update_only_in_train_forward() {
        let mut net = toy();
        let before: Vec<_> = net.buffers().cloned().collect();
        net.predict(&batch(4, 4)).unwrap();
        net.loss(&batch(4, 4), &[0, 1, 2, 0], Mode::Train).unwrap();
        assert_eq!(before, net.buffers().cloned().collect::<Vec<_>>());
        net.forward(&batch(4, 4), Mode::Train).unwrap();
        assert_ne!(before, net.buffers().cloned().collect::<Vec<_>>());
    }

    #[test]
    fn param_enumeration() {
        let net = toy();
        // dense, bn, dense → 2 + 2 + 2
        assert_eq!(net.param_count(), 6);
        assert_eq!(net.param_info(0), ParamInfo { layer: 0, kind: ParamKind::Weight });
        assert_eq!(net.param_info(2), ParamInfo { layer: 1, kind: ParamKind::Gain });
        assert_eq!(net.param_info(5), ParamInfo { layer: 3, kind: ParamKind::Bias });
        assert_eq!(net.param(4), net.shadow_weight(2));
    }

    #[test]
    fn flattens_image_input() {
        let spec = NetworkSpec::parse("6-3", &[1, 2, 2]).unwrap();
        let mut net = Network::<f32>::new(spec, 0).unwrap();
        let x = Tensor::from_fn(&[3, 1, 2, 2], |i| i as f32 * 0.1);
        let logits = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(logits.shape(), &[3, 3]);
        let (_, d) = softmax_cross_entropy(&logits, &[0, 1, 2]).unwrap();
        let dx = net.backward(&d).unwrap();
        assert_eq!(dx.shape(), &[3, 1, 2, 2]);
    }

    #[test]
    fn binarization_state_length_is_checked() {
        let mut net = toy();
        assert!(net.set_binarization(BinarizationState::zeros(3)).is_err());
        net.set_binarization(BinarizationState::all(2)).unwrap();
    }

    #[test]
    fn flagged_layer_forward_uses_signs() {
        let spec = NetworkSpec::new(vec![2], vec![LayerSpec::Dense { inputs: 2, outputs: 1 }]).unwrap();
        let mut net = Network::<f64>::new(spec, 0).unwrap();
        net.shadow_weight_mut(1).data_mut().copy_from_slice(&[0.3, -0.2]);
        let x = Tensor::from_rows(&[&[1.0, 2.0]]);
        assert!((net.predict(&x).unwrap().data()[0] - (0.3 - 0.4)).abs() < 1e-12);
        net.set_binarization(BinarizationState::all(1)).unwrap();
        assert_eq!(net.predict(&x).unwrap().data(), &[1.0 - 2.0]);
    }
}
