//! Forward and backward kernels for each layer kind.
//!
//! Every function here is pure: caches are returned to the caller rather
//! than stored, so the same code serves training, inference and the
//! finite-difference oracle.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `y[n,o] = Σ_i W[o,i]·x[n,i] + b[o]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, inputs, outputs) = dense_dims(x, w, b)?;
    let mut y = vec![T::zero(); n * outputs];
    T::gemm(false, true, n, inputs, outputs, x.data(), w.data(), T::zero(), &mut y);
    for row in y.chunks_exact_mut(outputs) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Tensor::new(vec![n, outputs], y)
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<DenseGrads<T>> {
    let n = x.rows();
    let (outputs, inputs) = (w.shape()[0], w.shape()[1]);
    dy.expect_shape(&[n, outputs], "dense upstream gradient")?;
    let mut dw = vec![T::zero(); outputs * inputs];
    T::gemm(true, false, outputs, n, inputs, dy.data(), x.data(), T::zero(), &mut dw);
    let mut dx = vec![T::zero(); n * inputs];
    T::gemm(false, false, n, outputs, inputs, dy.data(), w.data(), T::zero(), &mut dx);
    let mut db = vec![T::zero(); outputs];
    for row in dy.data().chunks_exact(outputs) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n, inputs], dx)?,
        weight: Tensor::new(vec![outputs, inputs], dw)?,
        bias: Tensor::new(vec![outputs], db)?,
    })
}

fn dense_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::config(format!("dense weight must be 2-D, got {:?}", w.shape())));
    }
    let (outputs, inputs) = (w.shape()[0], w.shape()[1]);
    if x.shape().len() != 2 || x.shape()[1] != inputs {
        return Err(Error::config(format!(
            "dense input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    b.expect_shape(&[outputs], "dense bias")?;
    Ok((x.rows(), inputs, outputs))
}

/// Static description of a 2-D convolution with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial size; rejects strides that do not tile the padded input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let side = |len: usize| -> Result<usize> {
            let padded = len + 2 * self.padding;
            if self.stride == 0 || padded < self.kernel || !(padded - self.kernel).is_multiple_of(self.stride) {
                return Err(Error::config(format!(
                    "conv output size ({len} + 2·{} − {})/{} + 1 is not a positive integer",
                    self.padding, self.kernel, self.stride
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((side(h)?, side(w)?))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

struct Plane {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

/// Unfolds one sample `[c, h, w]` into columns `[c·k·k, oh·ow]`.
fn im2col<T: Scalar>(g: &ConvGeometry, p: &Plane, x: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let spatial = p.oh * p.ow;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oi in 0..p.oh {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..p.ow {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        dst[oi * p.ow + oj] = if ii < 0 || jj < 0 || ii >= p.h as isize || jj >= p.w as isize {
                            T::zero()
                        } else {
                            x[(c * p.h + ii as usize) * p.w + jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters column gradients back onto the sample.
fn col2im<T: Scalar>(g: &ConvGeometry, p: &Plane, cols: &[T], dx: &mut [T]) {
    let k = g.kernel;
    let spatial = p.oh * p.ow;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oi in 0..p.oh {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= p.h as isize {
                        continue;
                    }
                    for oj in 0..p.ow {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj >= p.w as isize {
                            continue;
                        }
                        dx[(c * p.h + ii as usize) * p.w + jj as usize] += src[oi * p.ow + oj];
                    }
                }
            }
        }
    }
}

fn conv_plane<T: Scalar>(g: &ConvGeometry, x: &Tensor<T>, k: &Tensor<T>) -> Result<Plane> {
    let s = x.shape();
    if s.len() != 4 || s[1] != g.in_channels {
        return Err(Error::config(format!(
            "conv input must be [batch, {}, h, w], got {s:?}",
            g.in_channels
        )));
    }
    k.expect_shape(&[g.out_channels, g.in_channels, g.kernel, g.kernel], "conv kernel")?;
    let (oh, ow) = g.output_hw(s[2], s[3])?;
    Ok(Plane { h: s[2], w: s[3], oh, ow })
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let p = conv_plane(g, x, k)?;
    b.expect_shape(&[g.out_channels], "conv bias")?;
    let n = x.rows();
    let spatial = p.oh * p.ow;
    let mut cols = vec![T::zero(); g.patch_len() * spatial];
    let mut y = vec![T::zero(); n * g.out_channels * spatial];
    for (xs, ys) in x.data().chunks_exact(x.row_len()).zip(y.chunks_exact_mut(g.out_channels * spatial)) {
        im2col(g, &p, xs, &mut cols);
        T::gemm(false, false, g.out_channels, g.patch_len(), spatial, k.data(), &cols, T::zero(), ys);
        for (plane, &bias) in ys.chunks_exact_mut(spatial).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bias);
        }
    }
    Tensor::new(vec![n, g.out_channels, p.oh, p.ow], y)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<DenseGrads<T>> {
    let p = conv_plane(g, x, k)?;
    let n = x.rows();
    let spatial = p.oh * p.ow;
    dy.expect_shape(&[n, g.out_channels, p.oh, p.ow], "conv upstream gradient")?;
    let mut cols = vec![T::zero(); g.patch_len() * spatial];
    let mut dcols = vec![T::zero(); g.patch_len() * spatial];
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); g.out_channels];
    let mut dx = vec![T::zero(); x.len()];
    let sample = x.row_len();
    for i in 0..n {
        let xs = &x.data()[i * sample..(i + 1) * sample];
        let dys = dy.row(i);
        im2col(g, &p, xs, &mut cols);
        T::gemm(false, true, g.out_channels, spatial, g.patch_len(), dys, &cols, T::one(), &mut dk);
        T::gemm(true, false, g.patch_len(), g.out_channels, spatial, k.data(), dys, T::zero(), &mut dcols);
        col2im(g, &p, &dcols, &mut dx[i * sample..(i + 1) * sample]);
        for (acc, plane) in db.iter_mut().zip(dys.chunks_exact(spatial)) {
            *acc += plane.iter().copied().sum::<T>();
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weight: Tensor::new(k.shape().to_vec(), dk)?,
        bias: Tensor::new(vec![g.out_channels], db)?,
    })
}

/// Layout helper: `[n, features, rest...]` where statistics are taken per
/// feature over the batch and every trailing position.
fn bn_layout<T: Scalar>(x: &Tensor<T>, features: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != features {
        return Err(Error::config(format!(
            "batch norm over {features} features got input {s:?}"
        )));
    }
    Ok((s[0], s[2..].iter().product()))
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Batch statistics of one train-mode pass, for the running-average update.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (divide-by-m) variance.
    pub var: Vec<T>,
    pub count: usize,
}

pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    pub cache: Option<BatchNormCache<T>>,
    pub stats: Option<BatchStats<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
) -> Result<BatchNormOutput<T>> {
    let features = gamma.len();
    beta.expect_shape(&[features], "batch norm shift")?;
    let (n, inner) = bn_layout(x, features)?;
    let count = n * inner;
    let eps = T::lit(BN_EPS);

    let (mean, var) = match mode {
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
        Mode::Train => {
            if count < 2 {
                return Err(Error::DegenerateVariance(count));
            }
            let mut mean = vec![T::zero(); features];
            let mut var = vec![T::zero(); features];
            for_each_feature(x.data(), n, features, inner, |f, v| mean[f] += v);
            let m = T::from_usize(count).unwrap();
            mean.iter_mut().for_each(|v| *v /= m);
            for_each_feature(x.data(), n, features, inner, |f, v| {
                let d = v - mean[f];
                var[f] += d * d;
            });
            var.iter_mut().for_each(|v| *v /= m);
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut normalized = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for (idx, &v) in x.data().iter().enumerate() {
        let f = (idx / inner) % features;
        let xh = (v - mean[f]) * inv_std[f];
        normalized[idx] = xh;
        y[idx] = gamma.data()[f] * xh + beta.data()[f];
    }
    let output = Tensor::new(x.shape().to_vec(), y)?;
    Ok(match mode {
        Mode::Eval => BatchNormOutput { output, cache: None, stats: None },
        Mode::Train => BatchNormOutput {
            output,
            cache: Some(BatchNormCache { normalized: Tensor::new(x.shape().to_vec(), normalized)?, inv_std }),
            stats: Some(BatchStats { mean, var, count }),
        },
    })
}

fn for_each_feature<T: Scalar>(data: &[T], n: usize, features: usize, inner: usize, mut f: impl FnMut(usize, T)) {
    for i in 0..n {
        for c in 0..features {
            let base = (i * features + c) * inner;
            for &v in &data[base..base + inner] {
                f(c, v);
            }
        }
    }
}

/// Exponential moving average of batch statistics. The variance stored is
/// the unbiased estimate.
pub fn update_running_stats<T: Scalar>(running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>, stats: &BatchStats<T>) {
    let mom = T::lit(BN_MOMENTUM);
    let keep = T::one() - mom;
    let m = T::from_usize(stats.count).unwrap();
    let unbias = m / (m - T::one());
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + mom * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + mom * b * unbias;
    }
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let features = gamma.len();
    dy.expect_shape(cache.normalized.shape(), "batch norm upstream gradient")?;
    let (n, inner) = bn_layout(dy, features)?;
    let m = T::from_usize(n * inner).unwrap();
    let xh = cache.normalized.data();

    let mut dgamma = vec![T::zero(); features];
    let mut dbeta = vec![T::zero(); features];
    for (idx, (&g, &h)) in dy.data().iter().zip(xh).enumerate() {
        let f = (idx / inner) % features;
        dgamma[f] += g * h;
        dbeta[f] += g;
    }
    let dx: Vec<T> = dy
        .data()
        .iter()
        .zip(xh)
        .enumerate()
        .map(|(idx, (&g, &h))| {
            let f = (idx / inner) % features;
            gamma.data()[f] * cache.inv_std[f] / m * (m * g - dbeta[f] - h * dgamma[f])
        })
        .collect();
    Ok(BatchNormGrads {
        input: Tensor::new(dy.shape().to_vec(), dx)?,
        gamma: Tensor::new(vec![features], dgamma)?,
        beta: Tensor::new(vec![features], dbeta)?,
    })
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given the layer's input.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_shape(x.shape(), "relu upstream gradient")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
