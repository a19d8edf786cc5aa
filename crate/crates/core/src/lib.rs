//! Core of the stained-glass embedding obfuscation toolkit.
//!
//! Everything in this crate is pure computation over in-memory arrays and
//! needs only `alloc`: a small reverse-mode tape, the frozen toy decoder,
//! the Gaussian mean/scale estimator, the training objectives, the privacy
//! attacks and metrics, and the optimizer loop. File formats, configuration
//! parsing and the command line live in the `sgt` companion crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod array;
pub mod baseline;
pub mod corpus;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lm;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod privacy;
pub mod quadrature;
pub mod real;
pub mod rng;
pub mod sgt;
pub mod tape;
pub mod train;

pub use array::RealArray;
pub use error::{Error, Result};
pub use real::Real;
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
