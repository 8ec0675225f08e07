pub mod config;
pub mod dense;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod hand;
pub mod harness;
pub mod io;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod shapes;
pub mod sparse;
pub mod synth;
pub mod tensor;
