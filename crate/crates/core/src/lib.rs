//! Iterative layer-by-layer weight binarization.
//!
//! A small, self-contained training toolkit: a sequential backprop engine
//! ([`nn`]), sign binarization with float shadow weights ([`binarize`]), the
//! layer-by-layer binarization schedule ([`schedule`]), sensitivity probes
//! for choosing the binarization order ([`sensitivity`]), MNIST loading
//! ([`data`]) and experiment orchestration ([`experiment`]).

pub mod binarize;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod par;
pub mod scalar;
pub mod schedule;
pub mod sensitivity;
pub mod tensor;

pub use binarize::BinarizationState;
pub use error::{Error, Result};
pub use nn::{Network, NetworkSpec};
pub use tensor::Tensor;
