//! Inverse procedural window modeling: grammar, geometry, data, training
//! and inference.

pub mod grammar;
pub mod procgen;
pub mod dataset;
pub mod train;
pub mod inference;
