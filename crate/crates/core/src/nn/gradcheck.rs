//! Central-difference gradient estimates, used as a test oracle.
//!
//! Only the loss value is evaluated here; nothing from the backward pass is
//! reused, so the estimates are independent of the code they check.

use crate::error::{Error, Result};
use crate::nn::network::Network;
use crate::nn::ops::Mode;
use crate::tensor::Tensor;

/// `(loss(p + h) − loss(p − h)) / 2h` for every element of parameter
/// `param_index`. The network is restored exactly afterwards.
pub fn finite_diff_grad(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    param_index: usize,
    h: f64,
    mode: Mode,
) -> Result<Tensor<f64>> {
    if h <= 0.0 {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let len = net.param(param_index).len();
    let shape = net.param(param_index).shape().to_vec();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let orig = net.param(param_index).data()[i];
        net.param_mut(param_index).data_mut()[i] = orig + h;
        let plus = net.loss(x, labels, mode);
        net.param_mut(param_index).data_mut()[i] = orig - h;
        let minus = net.loss(x, labels, mode);
        net.param_mut(param_index).data_mut()[i] = orig;
        out.push((plus? - minus?) / (2.0 * h));
    }
    Tensor::new(shape, out)
}

/// Same estimate with respect to the network input.
pub fn finite_diff_input_grad(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    h: f64,
    mode: Mode,
) -> Result<Tensor<f64>> {
    if h <= 0.0 {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = net.loss(&probe, labels, mode)?;
        probe.data_mut()[i] = orig - h;
        let minus = net.loss(&probe, labels, mode)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::{LayerSpec, NetworkSpec};

    /// One dense weight `w`, input 1, zero bias, two classes with the second
    /// logit fixed at 0: loss = softplus(−w) for label 0.
    fn scalar_net(w: f64) -> Network<f64> {
        let spec = NetworkSpec::new(vec![1], vec![LayerSpec::Dense { inputs: 1, outputs: 2 }]).unwrap();
        let mut net = Network::new(spec, 0).unwrap();
        net.shadow_weight_mut(1).data_mut().copy_from_slice(&[w, 0.0]);
        net
    }

    #[test]
    fn matches_analytic_derivative() {
        let w = 0.7;
        let mut net = scalar_net(w);
        let x = Tensor::from_rows(&[&[1.0]]);
        let est = finite_diff_grad(&mut net, &x, &[0], 0, 1e-4, Mode::Eval).unwrap();
        let exact = -1.0 / (1.0 + w.exp());
        assert!((est.data()[0] - exact).abs() < 1e-8);
        assert_eq!(net.shadow_weight(1).data()[0], w);
    }

    #[test]
    fn error_is_second_order_in_step() {
        let w = 0.3;
        let x = Tensor::from_rows(&[&[1.0]]);
        let exact = -1.0 / (1.0 + f64::exp(w));
        let err = |h: f64| {
            let mut net = scalar_net(w);
            (finite_diff_grad(&mut net, &x, &[0], 0, h, Mode::Eval).unwrap().data()[0] - exact).abs()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut net = scalar_net(0.0);
        let x = Tensor::from_rows(&[&[1.0]]);
        assert!(finite_diff_grad(&mut net, &x, &[0], 0, 0.0, Mode::Eval).is_err());
    }
}
