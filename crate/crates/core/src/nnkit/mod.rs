//! Minimal differentiable numeric core: layers with analytic gradients,
//! optimizers, weight files and a finite-difference checker. All math is
//! double precision.

pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod weights;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use layers::{Activation, LayerKind, ReturnMode, CONV_KERNEL, POOL_SIZE};
pub use network::{ForwardCache, Network, Param, ParamStore};
pub use optim::{Algorithm, OptimizerConfig, OptimizerState};
pub use tensor::Tensor2;
