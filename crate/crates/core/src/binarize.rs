//! Sign binarization with floating-point shadow weights.
//!
//! Each weight-bearing layer keeps its float weights (the shadow copy) as the
//! only stored parameter. A [`BinarizationState`] decides, per layer, whether
//! the forward pass sees the shadow itself or `sign(shadow)`. Gradients with
//! respect to the binarized weights are passed straight through to the
//! shadow, which is the only thing the optimizer updates. Shadows are never
//! clipped and learning rates are never scaled per layer.
//!
//! Biases and batch-norm parameters are never binarized.

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sign with `sign(0) = +1`; every output is exactly `-1.0` or `+1.0`.
#[inline]
pub fn sign<T: Scalar>(w: T) -> T {
    if w < T::zero() {
        -T::one()
    } else {
        T::one()
    }
}

pub fn binarize_sign<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    w.map(sign)
}

/// `w − sign(w)`, the residual that binarization throws away.
pub fn quantization_error<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    w.map(|v| v - sign(v))
}

/// Weights a layer forward-propagates with: the shadow itself, or a freshly
/// binarized copy when the layer is flagged.
pub fn effective_weight<T: Scalar>(shadow: &Tensor<T>, binarized: bool) -> Cow<'_, Tensor<T>> {
    if binarized {
        Cow::Owned(binarize_sign(shadow))
    } else {
        Cow::Borrowed(shadow)
    }
}

/// Straight-through estimator: `d loss / d shadow := d loss / d sign(shadow)`.
pub fn ste_route_gradients<T: Scalar>(grad_wrt_effective: Tensor<T>) -> Tensor<T> {
    grad_wrt_effective
}

/// Per weight-bearing layer: `true` means the layer forward-propagates with
/// binarized weights. Layers are numbered from 1 at the input side.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinarizationState {
    flags: Vec<bool>,
}

impl BinarizationState {
    /// All layers in floating point.
    pub fn zeros(layers: usize) -> Self {
        BinarizationState { flags: vec![false; layers] }
    }

    /// All layers binarized.
    pub fn all(layers: usize) -> Self {
        BinarizationState { flags: vec![true; layers] }
    }

    /// Exactly `layer` (1-based) binarized.
    pub fn one_hot(layers: usize, layer: usize) -> Result<Self> {
        let mut s = Self::zeros(layers);
        s.set(layer)?;
        Ok(s)
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        BinarizationState { flags }
    }

    /// Marks `layer` (1-based) as binarized.
    pub fn set(&mut self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.flags.len() {
            return Err(Error::config(format!("layer {layer} outside 1..={}", self.flags.len())));
        }
        self.flags[layer - 1] = true;
        Ok(())
    }

    /// Whether `layer` (1-based) is binarized.
    pub fn is_set(&self, layer: usize) -> bool {
        layer >= 1 && self.flags.get(layer - 1).copied().unwrap_or(false)
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_fully_binarized(&self) -> bool {
        self.flags.iter().all(|&f| f)
    }

    /// Whether every layer set here is also set in `later`.
    pub fn is_subset_of(&self, later: &BinarizationState) -> bool {
        self.len() == later.len() && self.flags.iter().zip(&later.flags).all(|(&a, &b)| !a || b)
    }

    /// Flag string such as `100`, input layer first.
    pub fn bitstring(&self) -> String {
        self.flags.iter().map(|&f| if f { '1' } else { '0' }).collect()
    }

    pub fn parse_bitstring(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::config(format!("bad binarization flag string `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_flags)
    }
}

impl fmt::Debug for BinarizationState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinarizationState({})", self.bitstring())
    }
}

/// Shadow and effective weights of one weight-bearing layer.
#[derive(Debug)]
pub struct LayerView<'a, T: Scalar> {
    pub shadow: &'a Tensor<T>,
    pub effective: Cow<'a, Tensor<T>>,
}

impl<T: Scalar> LayerView<'_, T> {
    pub fn is_binarized(&self) -> bool {
        matches!(self.effective, Cow::Owned(_))
    }
}

#[derive(Debug)]
pub struct ShadowView<'a, T: Scalar> {
    pub layers: Vec<LayerView<'a, T>>,
}

/// Effective forward weights of `net` under `state`, without touching the
/// shadows.
pub fn apply_binarization<'a, T: Scalar>(net: &'a Network<T>, state: &BinarizationState) -> Result<ShadowView<'a, T>> {
    let count = net.weight_layer_count();
    if state.len() != count {
        return Err(Error::config(format!(
            "binarization state has {} flags, network has {count} weight layers",
            state.len()
        )));
    }
    let layers = (1..=count)
        .map(|layer| {
            let shadow = net.shadow_weight(layer);
            LayerView { shadow, effective: effective_weight(shadow, state.is_set(layer)) }
        })
        .collect();
    Ok(ShadowView { layers })
}
