//! Decoupled translation/rotation registration of 3D correspondence sets.
//!
//! The crate is `no_std` + `alloc`. It carries the whole algorithmic stack:
//!
//! - [`geom`]: rotations, 3×3 SVD, weighted Procrustes solvers and pose errors.
//! - [`tensor`]: a small dense tensor type with a recorded graph for reverse-mode
//!   differentiation, covering exactly the operators the network uses.
//! - [`nn`]: the registration network (feature-drift translation branch,
//!   consensus encoding, attention classifier, weighted SVD rotation head).
//! - [`loss`], [`optim`], [`train`]: training objective, Adam and the training loop.
//! - [`data`]: synthetic correspondence generation and inlier labelling.
//! - [`baselines`]: RANSAC, ICP and all-pairs Procrustes.
//! - [`eval`]: pose and classification metrics.
//!
//! File formats, the CLI and anything that touches the OS live in the `detar` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod sum;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
