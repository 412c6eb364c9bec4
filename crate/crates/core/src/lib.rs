//! Gated multimodal fusion over precomputed embedding sequences.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numeric piece:
//! a small reverse-mode differentiation engine, the fusion / guidance / response
//! layers built on top of it, the task losses, evaluation metrics, synthetic data
//! generation, splitting, and the training loop. File formats and the command
//! line live in the `medfuse` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod layers;
pub mod data;
pub mod diff;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod guidance;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod modality;
pub mod params;
pub mod response;
pub mod rng;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
