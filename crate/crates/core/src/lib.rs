//! Separable multi-concept erasure for a toy text-conditioned diffusion model.
//!
//! The crate is `no_std` (with `alloc`). It contains the numeric substrate, a
//! miniature cross-attention DDPM, the concept-irrelevant unlearning objective,
//! null-space weight decoupling with its composition algebra, the erasure
//! trainers and an evaluation harness. File formats and the command-line runner
//! live in the `sepme` companion crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![deny(missing_debug_implementations)]

extern crate alloc;

pub mod concept_repr;
pub mod decoupling;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod trainers;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
