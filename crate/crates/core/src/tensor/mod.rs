//! Dense tensors with a reverse-mode tape.

pub mod checkpoint;
pub mod dense;
pub mod graph;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;

pub use dense::Tensor;
pub use graph::{Gradients, Graph, Var};
pub use ops::sample::Padding;
pub use optim::{Adam, AdamConfig, StepSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::{DType, Scalar};
