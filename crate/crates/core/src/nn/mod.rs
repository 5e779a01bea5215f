//! Minimal CPU tensor engine: a tape graph with the convolution, pooling and
//! masking ops the detectors need, plus parameter storage and SGD.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, RoiSpec, Var};
pub use layers::{Conv2d, Linear};
pub use optim::Sgd;
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
