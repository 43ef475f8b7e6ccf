//! Deterministic simulator and solver library for sparse linear regression
//! (constrained LASSO) over mesh networks.
//!
//! The crate is organized around six building blocks:
//!
//! - [`numerics`]: the ℓ1-ball projection used by every solver step, and
//!   spectral-norm estimation for mixing matrices;
//! - [`model`]: synthetic sparse-regression instances, losses/gradients, the
//!   centralized reference solution, and curvature probes;
//! - [`network`]: graph topologies, doubly stochastic weight rules, the
//!   contraction factor ρ = ‖W − J‖₂, multi-round and Chebyshev-accelerated
//!   mixing, and communication-cost accounting;
//! - [`solvers`]: centralized projected gradient descent, distributed
//!   gradient descent, the gradient-tracking NetLASSO algorithm, and a
//!   star-topology push-pull executor;
//! - [`diagnostics`]: per-iteration metrics and the closed-form rate /
//!   residual / condition formulas that describe the solvers;
//! - [`harness`]: experiment presets, multi-trial orchestration, and CSV
//!   emission.
//!
//! Every run is a deterministic function of its configuration and a 64-bit
//! seed; see [`rng`] for the stream-splitting scheme.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod model;
pub mod network;
pub mod numerics;
pub mod rng;
pub mod solvers;

pub use error::{Error, Result};
