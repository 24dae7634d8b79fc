pub mod conv;
pub mod elementwise;
pub mod sample;
pub mod shape;
