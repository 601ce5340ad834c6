//! Targeted multi-agent communication (signature/query/value attention over
//! agent messages) trained with a batched synchronous actor-critic and a
//! centralized critic, plus the gridworld tasks used to evaluate it.

pub mod agents;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod comm;
pub mod config;
pub mod envs;
pub mod error;
pub mod nn;
pub mod tensor;
pub mod trainer;
#[cfg(test)]
mod testutil;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
