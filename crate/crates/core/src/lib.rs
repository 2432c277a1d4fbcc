pub mod corpus;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod harness;
pub mod img2tree;
pub mod metrics;
pub mod nn;
pub mod recipe2tree;
pub mod sgn;
pub mod train;
pub mod tree2recipe;
pub mod treekit;

pub use error::{Result, SgnError};
