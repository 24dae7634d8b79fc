//! Deformable convolutions, conventional and steerable.

mod conv;
mod figures;

pub use conv::{sampled_conv, DeformableConv2d, DeformableSteerableConv, OFFSET_BOUND};
pub use figures::{dilation_parameter_count, FigureTable};
