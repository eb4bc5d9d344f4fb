//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] outside the graph; [`Graph::param`] copies them in and
//! [`Graph::accumulate_param_grads`] hands gradients back for [`Adam`].

mod graph;
mod gradcheck;
mod optim;
mod params;
mod tensor;

pub mod checkpoint;

pub use graph::{gelu_tanh, Graph, Var};
pub use gradcheck::{gradcheck, gradcheck_params, relative_error, GradcheckReport, FD_STEP};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
