//! Split-unlearn-merge: partition a forget set by an attribute, unlearn each
//! partition from the same base model, and TIES-merge the results.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod neural;
pub mod param_store;
pub mod pipeline;
pub mod rng;
pub mod task_arith;
pub mod ties_merge;
pub mod unlearn;

pub use error::{Error, Result};
