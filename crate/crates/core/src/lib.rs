//! Data-adaptive sparse attention where every head samples its query–key mask
//! from a mixed-membership stochastic block model.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense row-major matrices, activations, BCE loss, Adam and a
//!   central-difference gradient checker.
//! - [`sbm_sampler`]: Poisson edge sampling from `Y B Zᵀ` in time linear in the
//!   number of edges (alias tables + Poisson counts), self-loops and the
//!   background exploration cluster.
//! - [`sbm_attention`]: one attention head: membership inference, masked
//!   softmax over the sampled edge list, and the straight-through backward.
//! - [`encoder`]: a small post-norm Transformer encoder with hand-written
//!   backpropagation, Adam training loop and checkpoints.
//! - [`duplicate_task`]: the repeated-token detection benchmark.
//! - [`theory`]: executable checks of the sparsity-pattern conditions used for
//!   universal approximation, and Hamiltonian-cycle expectations.
//! - [`costing`]: analytic and instrumented FLOP/memory accounting.
//! - [`config`]: flat `key=value` run configuration.

pub mod config;
pub mod costing;
pub mod duplicate_task;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod rng;
pub mod sbm_attention;
pub mod sbm_sampler;
pub mod theory;

pub use error::{Error, Result};
pub use numerics::Matrix;
