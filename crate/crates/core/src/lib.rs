//! Pipelined tree-speculative decoding on a deterministic toy model.

pub mod batch;
pub mod bits;
pub mod cli;
pub mod model;
pub mod perf;
pub mod pipeline;
pub mod source;
pub mod tree;
