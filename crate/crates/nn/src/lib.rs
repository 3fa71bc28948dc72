//! Small CPU neural-network toolkit: NCHW tensors, a reverse-mode tape,
//! im2col convolutions, parameter stores and Adam.

pub mod adam;
pub mod conv;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Function, Gradients, Graph, Var};
pub use params::{Bound, Initializer, Param, ParamId, ParamStore};
pub use tensor::Tensor;
