//! A desk-scale laboratory for flow-matching generative models on
//! low-dimensional synthetic distributions.
//!
//! The crate trains a small velocity-field network by conditional flow
//! matching ([`train`]), fine-tunes it against a reward with KL-regularized
//! reinforcement learning ([`rl`]), and applies inference-time guidance that
//! blends the reference and fine-tuned fields ([`guide`]). Analytic Gaussian
//! mixtures with closed-form exponential tilting ([`density`]) provide exact
//! targets, and [`eval`] supplies the distribution distances used to compare
//! samples against them.
//!
//! Everything is deterministic: all randomness flows from a single global
//! seed through named streams (see [`rng`]).

pub mod density;
pub mod error;
pub mod eval;
pub mod guide;
pub mod net;
pub mod rl;
pub mod rng;
pub mod schedule;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{Point, SampleBatch};
