//! Numeric core for a teacher/student smart-contract vulnerability detector.
//!
//! Everything in this crate is pure computation over in-memory data: dense
//! tensors with a small reverse-mode tape, the layers the teacher and student
//! networks are built from, the adaptive fusion attention block, CBOW word
//! vectors, and the data-free distillation loop. File formats, the Solidity
//! front end and the command line live in the `stip` crate.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod distill;
pub mod embed;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Tape, Var};
pub use params::{ParamId, ParameterStore};
pub use scalar::{DType, Real};
pub use tensor::Tensor;
