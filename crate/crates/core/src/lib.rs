//! Decentralized entropy-regularized softmax policy gradient for tabular
//! multi-task reinforcement learning, with exact linear-algebra oracles.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consensus;
pub mod dpg;
pub mod environments;
pub mod error;
pub mod gradcheck;
pub mod gradient;
pub mod mdp;
pub mod rng;
pub mod suite;
pub mod verify;

pub use error::{DpgError, Result};
