//! Constraint-satisfying kernels and the layers built from them.

mod activation;
pub mod basis;
mod layer;

pub use activation::typed_activation;
pub use basis::{build_pair_basis, constraint_residual, pair_basis, PairBasis, TapSet};
pub use layer::{EquivariantLinear, LiftingConv3d, SteerableConv2d, SteerableKernel, TypedVar};
pub(crate) use layer::{add_channel_bias, expect_spec, TypedBias};
