//! Learning solutions of steady PDEs with small multilayer perceptrons.
//!
//! The network `û(x, θ)` is trained by minimizing Monte-Carlo collocation
//! losses (PDE residual at interior points plus boundary mismatch) with a
//! dense BFGS optimizer. Two problems are provided: a manufactured Poisson
//! problem on the unit square and Kovasznay flow for the steady
//! incompressible Navier–Stokes equations.

// `!(x > 0.0)` is used on purpose so that NaN lands in the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod evaluate;
pub mod experiment;
pub mod neuralnet;
pub mod objective;
pub mod optimize;
pub mod problems;
pub mod rng;
pub mod sampling;

