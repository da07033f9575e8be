//! Distributed training with integer-compressed gradient communication.

pub mod aggregation;
pub mod optimizers;
pub mod problems;
pub mod rounding;
pub mod harness;
pub mod scaling;
