//! Multi-reference preference optimization.
//!
//! Preference losses (DPO, per-reference Multi-DPO and the virtual-reference
//! MRPO objective with clipping and adaptive weights), a small character-level
//! autoregressive policy with exact gradients, data handling, a trainer, and
//! brute-force oracles over finite response sets.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
mod error;
mod fsutil;
pub mod losses;
pub mod numerics;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod prefmath;
pub mod trainer;

pub use error::{Error, Result};
