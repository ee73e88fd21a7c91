//! Reverse-mode differentiation over dense `f64` tensors.

pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport, FD_STEP};
pub use kernels::{causal_conv1d, Direction, ScaleMode};
pub use layers::{LayerNorm, Linear, Mlp, LAYER_NORM_EPS};
pub use params::{ParamId, ParamStore};
pub use tape::{Activation, Gradients, NodeId, Tape};
