//! Dense tensors, the reverse-mode tape, parameters and the optimizer.

pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{AttnContext, Graph, Mode, RegressionKind, Var, HUBER_DELTA, LAYER_NORM_EPS};
pub use optim::{lr_at, AdamW};
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};
pub use rng::RngStream;
pub use tensor::Tensor;

#[cfg(test)]
mod graph_tests;
