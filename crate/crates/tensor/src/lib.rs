//! Dense row-major `f64` tensors, a tape-based reverse-mode autodiff graph,
//! and the handful of neural-network layers the diffusion models are built
//! from.
//!
//! Everything runs in double precision. Layers store their parameters in a
//! [`ParamStore`] and are evaluated by binding that store into a [`Graph`]:
//!
//! ```
//! use diffrep_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new([2], vec![3.0, -1.0]));
//! let y = g.mul(x, x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss);
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0, -2.0]);
//! ```

pub mod gradcheck;
mod graph;
mod kernels;
pub mod nn;
mod ops;
mod params;
pub mod rng;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use kernels::gemm;
pub use params::{Binding, Init, ParamId, ParamLayout, ParamSpec, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("parameter `{0}` not found")]
    UnknownParam(String),
}
