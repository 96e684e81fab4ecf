//! Minimal dense-tensor backprop engine: layers, loss, optimizers,
//! initialization and a finite-difference gradient oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;
pub mod spec;

pub use network::{Network, ParamInfo, ParamKind};
pub use ops::Mode;
pub use optim::{Optimizer, OptimizerKind};
pub use spec::{LayerSpec, NetworkSpec};
