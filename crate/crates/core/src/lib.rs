//! Masked diffusion captioning on a synthetic shapes corpus.
//!
//! The crate is `no_std` (with `alloc`) so that the numerical core carries no
//! IO. File formats, the command line, and experiment orchestration live in
//! the `mdc` companion crate.
//!
//! Layout:
//! - [`diffusion`]: noise schedule, forward corruption, posteriors, loss weighting
//! - [`autodiff`]: dense tensors and a reverse-mode tape
//! - [`model`]: patch encoder and cross-attending text decoder
//! - [`train`]: objectives, AdamW, cosine schedule, training loop
//! - [`inference`]: confidence decoding and caption scoring
//! - [`synth`]: procedural scenes, renderer, caption grammar, hard negatives
//! - [`eval`]: linear probe, masked accuracy, compositionality, caption metrics

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod inference;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;
