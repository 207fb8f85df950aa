//! Blocks-world instruction following: environment, factored neural policy,
//! contextual-bandit policy gradient with potential-based reward shaping, and
//! the comparison learners.

pub mod cli;
pub mod env;
pub mod error;
pub mod eval;
pub mod lang;
pub mod learn;
pub mod policy;
pub mod reward;

pub use error::{Error, Result};
