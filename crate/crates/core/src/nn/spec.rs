//! Declarative network descriptions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm { features: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Number of weight-matrix (or kernel) entries; biases excluded.
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => out_channels * in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Inputs feeding each output unit.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    pub(crate) fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some(vec![outputs, inputs]),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some(vec![out_channels, in_channels, kernel, kernel])
            }
            _ => None,
        }
    }

    pub(crate) fn geometry(&self) -> Option<ConvGeometry> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                Some(ConvGeometry { in_channels, out_channels, kernel, stride, padding })
            }
            _ => None,
        }
    }

    /// Per-sample output shape for a given per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::config(format!("{self:?} cannot take per-sample input {input:?}"));
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(mismatch());
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d { in_channels, out_channels, .. } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(mismatch());
                }
                let (oh, ow) = self.geometry().unwrap().output_hw(input[1], input[2])?;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::BatchNorm { features } => {
                if input.first() != Some(&features) {
                    return Err(mismatch());
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// A sequential network: per-sample input shape plus its layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = NetworkSpec { input_shape, layers };
        spec.shapes()?;
        if spec.weight_layer_count() == 0 {
            return Err(Error::config("network has no weight-bearing layer"));
        }
        match spec.shapes()?.last() {
            Some(s) if s.len() == 1 => Ok(spec),
            other => Err(Error::config(format!("network must end in class scores, ends in {other:?}"))),
        }
    }

    /// Fully connected stack `Flatten → [Dense → BatchNorm → ReLU]* → Dense`.
    pub fn fully_connected(input_shape: &[usize], widths: &[usize]) -> Result<Self> {
        Self::parse(
            &widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-"),
            input_shape,
        )
    }

    /// Builds a spec from a compact name such as `300-100-10`.
    ///
    /// Tokens are separated by `-`. A bare number is a dense layer of that
    /// width. `c<ch>` is a 3×3 convolution with `ch` output channels;
    /// `k<n>` and `s<n>` suffixes override kernel size and stride, and
    /// padding is `kernel / 2`. Every layer but the last is followed by
    /// batch norm and ReLU. The last token must be dense.
    pub fn parse(name: &str, input_shape: &[usize]) -> Result<Self> {
        let tokens: Vec<&str> = name.split('-').map(str::trim).collect();
        let bad = |t: &str| Error::config(format!("bad layer token `{t}` in network `{name}`"));
        let mut layers = Vec::new();
        let mut shape = input_shape.to_vec();
        let mut push = |layer: LayerSpec, shape: &mut Vec<usize>| -> Result<()> {
            *shape = layer.output_shape(shape)?;
            layers.push(layer);
            Ok(())
        };
        for (i, tok) in tokens.iter().enumerate() {
            let last = i + 1 == tokens.len();
            if let Some(rest) = tok.strip_prefix('c') {
                if last {
                    return Err(Error::config(format!("network `{name}` must end with a dense layer")));
                }
                let (channels, kernel, stride) = parse_conv_token(rest).ok_or_else(|| bad(tok))?;
                if shape.len() != 3 {
                    return Err(Error::config(format!("convolution `{tok}` after a flat layer")));
                }
                push(
                    LayerSpec::Conv2d { in_channels: shape[0], out_channels: channels, kernel, stride, padding: kernel / 2 },
                    &mut shape,
                )?;
                push(LayerSpec::BatchNorm { features: channels }, &mut shape)?;
                push(LayerSpec::Relu, &mut shape)?;
            } else {
                let width: usize = tok.parse().map_err(|_| bad(tok))?;
                if width == 0 {
                    return Err(bad(tok));
                }
                if shape.len() != 1 {
                    push(LayerSpec::Flatten, &mut shape)?;
                }
                push(LayerSpec::Dense { inputs: shape[0], outputs: width }, &mut shape)?;
                if !last {
                    push(LayerSpec::BatchNorm { features: width }, &mut shape)?;
                    push(LayerSpec::Relu, &mut shape)?;
                }
            }
        }
        Self::new(input_shape.to_vec(), layers)
    }

    /// Per-sample output shape after each layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// `L`: the number of dense and convolutional layers.
    pub fn weight_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.has_weights()).count()
    }

    /// Indices (into `layers`) of the weight-bearing layers, input first.
    pub fn weight_layer_indices(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.has_weights()).map(|(i, _)| i).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::weight_count).sum()
    }

    pub fn classes(&self) -> usize {
        self.shapes().ok().and_then(|s| s.last().map(|s| s[0])).unwrap_or(0)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }
}

fn parse_conv_token(rest: &str) -> Option<(usize, usize, usize)> {
    let digits_end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    let channels: usize = rest[..digits_end].parse().ok()?;
    let (mut kernel, mut stride) = (3, 1);
    let mut tail = &rest[digits_end..];
    while let Some(flag) = tail.chars().next() {
        let body = &tail[1..];
        let end = body.find(|c: char| !c.is_ascii_digit()).unwrap_or(body.len());
        let value: usize = body[..end].parse().ok()?;
        match flag {
            'k' => kernel = value,
            's' => stride = value,
            _ => return None,
        }
        tail = &body[end..];
    }
    (channels > 0 && kernel > 0 && stride > 0).then_some((channels, kernel, stride))
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for layer in &self.layers {
            match *layer {
                LayerSpec::Dense { outputs, .. } => parts.push(outputs.to_string()),
                LayerSpec::Conv2d { out_channels, kernel, stride, .. } => {
                    let mut tok = format!("c{out_channels}");
                    if kernel != 3 {
                        tok.push_str(&format!("k{kernel}"));
                    }
                    if stride != 1 {
                        tok.push_str(&format!("s{stride}"));
                    }
                    parts.push(tok);
                }
                _ => {}
            }
        }
        write!(f, "{}", parts.join("-"))
    }
}
