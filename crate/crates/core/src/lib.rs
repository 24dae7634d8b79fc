pub mod deformable;
pub mod error;
pub mod grasp;
pub mod runtime;
pub mod scene;
pub mod group;
pub mod steerable;
pub mod tensor;
pub mod triplane;
