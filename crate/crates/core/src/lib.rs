pub mod energy;
pub mod lamellae;
pub mod orientation;
pub mod pipeline;
pub mod polytope;
pub mod regression;
pub mod schema;
pub mod stats;
pub mod tessellation;
pub mod twinning;
