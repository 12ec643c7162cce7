//! Monte Carlo laboratory for λ-biased random walks on dynamical
//! percolation on `Z^d`.
//!
//! The walker attempts jumps at rate 1 in an environment whose edges
//! refresh at rate μ to Bernoulli(p) states. The crate simulates the walk
//! exactly through a regeneration-time construction, estimates the speed
//! and its derivative in the bias by three independent methods, and checks
//! the model's closed-form identities and asymptotic regimes.

pub mod analytic;
pub mod cli;
pub mod couple;
pub mod engine;
pub mod env;
pub mod error;
pub mod estimate;
pub mod model;
pub mod stats;

pub use error::{Error, Result};
pub use model::ModelParams;
pub use stats::Estimate;
