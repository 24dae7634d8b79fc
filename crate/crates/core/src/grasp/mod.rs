//! Grasp decoders: EquiGIGA heads, deformable attention, rotation flow and
//! the GraspDAM classifier.

mod dam;
mod eda;
mod flow;
mod mlp;
mod model;
pub mod rotation;

pub use dam::GraspDam;
pub use eda::Eda;
pub use flow::{flow_pair, time_embedding, FlowNet};
pub use mlp::{Linear, Mlp};
pub use model::{points_tensor, DecoderConfig, GraspBatch, GraspModel, LossTerms, ModelKind};
