//! Dense f64 tensors with a tape-based reverse-mode autodiff graph.
//!
//! All model code is written against [`Graph`]: parameters enter as leaves
//! via [`Graph::param`], every op appends a node, and [`Graph::backward`]
//! fills gradients that [`Graph::accumulate_param_grads`] folds back into the
//! [`ParamStore`].

pub mod check;
pub mod gemm;
mod graph;
mod layers;
pub mod kernels;
pub mod mmt;
mod params;
mod tensor;

pub use graph::{BatchStats, Graph, Var, BN_EPS, BN_MOMENTUM};
pub use kernels::ConvGeom;
pub use layers::{init_bn, init_conv_bn, init_linear, BnUpdates, Ctx};
pub use params::ParamStore;
pub use tensor::Tensor;

