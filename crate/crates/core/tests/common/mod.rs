#![allow(dead_code)]

use std::path::PathBuf;

use layerbin::data::{batches, epoch_seed, synthetic, Splits, SyntheticSpec};
use layerbin::nn::loss::{argmax_rows, softmax_cross_entropy};
use layerbin::nn::{LayerSpec, Mode, Network, NetworkSpec, Optimizer, OptimizerKind};
use layerbin::par::{error_rate, Parallelism};
use layerbin::schedule::{run_iterative, Regime, TrainPlan};
use layerbin::{BinarizationState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central difference of the train-mode loss for one parameter element.
/// Returns `None` when a ReLU input changes sign inside `[p − h, p + h]`.
pub fn central_difference(net: &mut Network<f64>, x: &Tensor<f64>, labels: &[usize], param: usize, elem: usize, h: f64) -> Option<f64> {
    let base = net.relu_pattern(x, Mode::Train).unwrap();
    let orig = net.param(param).data()[elem];
    net.param_mut(param).data_mut()[elem] = orig + h;
    let plus = net.loss(x, labels, Mode::Train).unwrap();
    let kink_plus = net.relu_pattern(x, Mode::Train).unwrap() != base;
    net.param_mut(param).data_mut()[elem] = orig - h;
    let minus = net.loss(x, labels, Mode::Train).unwrap();
    let kink_minus = net.relu_pattern(x, Mode::Train).unwrap() != base;
    net.param_mut(param).data_mut()[elem] = orig;
    (!kink_plus && !kink_minus).then(|| (plus - minus) / (2.0 * h))
}

/// Same oracle with respect to one input element.
pub fn central_difference_input(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize], elem: usize, h: f64) -> Option<f64> {
    let base = net.relu_pattern(x, Mode::Train).unwrap();
    let mut probe = x.clone();
    probe.data_mut()[elem] = x.data()[elem] + h;
    let plus = net.loss(&probe, labels, Mode::Train).unwrap();
    let kink_plus = net.relu_pattern(&probe, Mode::Train).unwrap() != base;
    probe.data_mut()[elem] = x.data()[elem] - h;
    let minus = net.loss(&probe, labels, Mode::Train).unwrap();
    let kink_minus = net.relu_pattern(&probe, Mode::Train).unwrap() != base;
    (!kink_plus && !kink_minus).then(|| (plus - minus) / (2.0 * h))
}

/// A small random sequential network mixing the supported layer kinds.
/// Even seeds start with a convolution.
pub fn random_spec(seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut layers = Vec::new();
        let input_shape;
        let mut width;
        if seed.is_multiple_of(2) {
            let c = rng.random_range(1..=2);
            let hw = rng.random_range(4..=5);
            input_shape = vec![c, hw, hw];
            let out = rng.random_range(2..=3);
            let kernel = if rng.random_bool(0.5) { 3 } else { 1 };
            let stride = rng.random_range(1..=2);
            layers.push(LayerSpec::Conv2d { in_channels: c, out_channels: out, kernel, stride, padding: kernel / 2 });
            if rng.random_bool(0.7) {
                layers.push(LayerSpec::BatchNorm { features: out });
            }
            if rng.random_bool(0.7) {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Flatten);
            let side = (hw + 2 * (kernel / 2) - kernel) / stride + 1;
            width = out * side * side;
        } else {
            width = rng.random_range(3..=8);
            input_shape = vec![width];
        }
        for _ in 0..rng.random_range(1..=2) {
            let next = rng.random_range(3..=6);
            layers.push(LayerSpec::Dense { inputs: width, outputs: next });
            if rng.random_bool(0.7) {
                layers.push(LayerSpec::BatchNorm { features: next });
            }
            if rng.random_bool(0.8) {
                layers.push(LayerSpec::Relu);
            }
            width = next;
        }
        layers.push(LayerSpec::Dense { inputs: width, outputs: rng.random_range(3..=4) });
        if let Ok(spec) = NetworkSpec::new(input_shape, layers) {
            return spec;
        }
    }
}

/// Deterministic inputs in roughly [−1, 1] and labels for a spec.
pub fn random_batch(spec: &NetworkSpec, batch: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C);
    let mut shape = vec![batch];
    shape.extend_from_slice(&spec.input_shape);
    let x = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let labels = (0..batch).map(|_| rng.random_range(0..spec.classes())).collect();
    (x, labels)
}

/// Toy classification data shaped for a flat 16-feature input.
pub fn toy_data(train: usize, seed: u64) -> Splits {
    synthetic(&SyntheticSpec { train, val: 60, test: 60, seed, ..SyntheticSpec::default() }).unwrap()
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

/// Outcome of comparing backprop against central differences on one net.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub params: usize,
    pub checked: usize,
    pub skipped: usize,
    /// Largest `‖a − f‖ / max(‖a‖, ‖f‖)` over parameter tensors and the
    /// input gradient, restricted to elements away from ReLU kinks.
    pub max_tensor_error: f64,
    pub worst_tensor: String,
    /// Largest elementwise `|a − f| / max(|a|, |f|, GRAD_FLOOR)`.
    pub max_elem_error: f64,
    pub worst_elem: String,
}

pub const GRAD_H: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_BATCH: usize = 8;
/// Magnitude below which a gradient element is compared absolutely. Central
/// differences at h = 1e-5 carry round-off near `f64::EPSILON / h ≈ 2e-11`,
/// which exact-zero gradients (biases feeding batch norm) see in full.
pub const GRAD_FLOOR: f64 = 1e-6;

fn compare(report: &mut GradCheck, what: String, pairs: &[(f64, Option<f64>)]) {
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for (i, &(a, fd)) in pairs.iter().enumerate() {
        let Some(f) = fd else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        diff += (a - f) * (a - f);
        na += a * a;
        nf += f * f;
        let e = (a - f).abs() / a.abs().max(f.abs()).max(GRAD_FLOOR);
        if e > report.max_elem_error {
            report.max_elem_error = e;
            report.worst_elem = format!("{what} elem {i}: backprop {a:e}, difference {f:e}");
        }
    }
    let scale = f64::max(na, nf).sqrt();
    let e = if scale > GRAD_FLOOR { diff.sqrt() / scale } else { diff.sqrt() };
    if e > report.max_tensor_error {
        report.max_tensor_error = e;
        report.worst_tensor = what;
    }
}

pub fn gradient_check(seed: u64, h: f64) -> GradCheck {
    let spec = random_spec(seed);
    let mut net = Network::<f64>::new(spec.clone(), seed).unwrap();
    let (x, labels) = random_batch(&spec, GRAD_BATCH, seed);
    let logits = net.forward(&x, Mode::Train).unwrap();
    let (_, dlogits) = layerbin::nn::loss::softmax_cross_entropy(&logits, &labels).unwrap();
    let dx = net.backward(&dlogits).unwrap();
    let analytic: Vec<Tensor<f64>> = net.grads().cloned().collect();

    let mut report = GradCheck { params: net.params().map(|p| p.len()).sum(), ..GradCheck::default() };
    for (p, grad) in analytic.iter().enumerate() {
        let pairs: Vec<_> =
            (0..grad.len()).map(|i| (grad.data()[i], central_difference(&mut net, &x, &labels, p, i, h))).collect();
        compare(&mut report, format!("param {p} {:?}", net.param_info(p)), &pairs);
    }
    let pairs: Vec<_> = (0..x.len()).map(|i| (dx.data()[i], central_difference_input(&net, &x, &labels, i, h))).collect();
    compare(&mut report, "input".to_string(), &pairs);
    report
}

pub const TOY_LR: f64 = 3e-3;
pub const TOY_BATCH: usize = 25;

pub fn toy_plan(regime: Regime, epochs: usize, seed: u64) -> TrainPlan {
    TrainPlan {
        regime,
        total_epochs: epochs,
        lr: TOY_LR,
        milestones: vec![],
        optimizer: OptimizerKind::adam(),
        batch_size: TOY_BATCH,
        seed,
    }
}

/// Parameters after every epoch, and per-epoch `[train, val, test]` errors.
pub type Trajectory = (Vec<Vec<Tensor>>, Vec<[f64; 3]>);

/// Plain training with a fixed binarization state, written out step by step.
pub fn hand_rolled(spec: &NetworkSpec, state: BinarizationState, epochs: usize, seed: u64, data: &Splits) -> Trajectory {
    let mut net = Network::<f32>::new(spec.clone(), seed).unwrap();
    net.set_binarization(state).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::adam(), TOY_LR);
    let (mut params, mut errors) = (Vec::new(), Vec::new());
    for epoch in 1..=epochs {
        let (mut wrong, mut seen) = (0, 0);
        for (x, y) in batches(&data.train, TOY_BATCH, epoch_seed(seed, epoch)).unwrap() {
            let logits = net.forward(&x, Mode::Train).unwrap();
            let (_, d) = softmax_cross_entropy(&logits, &y).unwrap();
            wrong += argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p != l).count();
            seen += y.len();
            net.backward(&d).unwrap();
            opt.step(net.param_grad_pairs()).unwrap();
        }
        params.push(net.params().cloned().collect());
        let val = error_rate(Parallelism::Sequential, &net, &data.val).unwrap();
        let test = error_rate(Parallelism::Sequential, &net, &data.test).unwrap();
        errors.push([wrong as f64 / seen as f64, val, test]);
    }
    (params, errors)
}

/// The scheduler's trajectory for the same regime: one run per prefix length
/// for the parameters, and the longest run's records for the errors.
pub fn scheduled(spec: &NetworkSpec, regime: &Regime, epochs: usize, seed: u64, data: &Splits) -> Trajectory {
    let mut params = Vec::new();
    let mut errors = Vec::new();
    for t in 1..=epochs {
        let net = Network::new(spec.clone(), seed).unwrap();
        let run = run_iterative(&toy_plan(regime.clone(), t, seed), net, data, Parallelism::Sequential).unwrap();
        params.push(run.network.params().cloned().collect());
        if t == epochs {
            errors = run.records.iter().map(|r| [r.train_error, r.val_error, r.test_error]).collect();
        }
    }
    (params, errors)
}
