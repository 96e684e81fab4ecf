use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::spec::LayerSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// He-normal weights: zero mean, variance `2 / fan_in`.
pub fn he_init<T: Scalar, R: Rng + ?Sized>(layer: &LayerSpec, rng: &mut R) -> Result<Tensor<T>> {
    let shape = layer
        .weight_shape()
        .ok_or_else(|| Error::config(format!("{layer:?} has no weights to initialize")))?;
    let std = (2.0 / layer.fan_in() as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    Ok(Tensor::from_fn(&shape, |_| T::lit(normal.sample(rng))))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn variance_is_two_over_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Tensor<f64> = he_init(&LayerSpec::Dense { inputs: 100, outputs: 50 }, &mut rng).unwrap();
        assert_eq!(w.shape(), &[50, 100]);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.02).abs() < 0.2 * 0.02, "variance {var}");
    }

    #[test]
    fn conv_fan_in_counts_kernel_area() {
        let layer = LayerSpec::Conv2d { in_channels: 4, out_channels: 8, kernel: 3, stride: 1, padding: 1 };
        assert_eq!(layer.fan_in(), 36);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f32> = he_init(&layer, &mut rng).unwrap();
        assert_eq!(w.shape(), &[8, 4, 3, 3]);
    }

    #[test]
    fn same_seed_same_tensor() {
        let layer = LayerSpec::Dense { inputs: 30, outputs: 20 };
        let a: Tensor<f32> = he_init(&layer, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b: Tensor<f32> = he_init(&layer, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c: Tensor<f32> = he_init(&layer, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn layers_without_weights_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(he_init::<f32, _>(&LayerSpec::Relu, &mut rng).is_err());
    }
}
