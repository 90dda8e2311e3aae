//! Self-representation alignment (SRA) for diffusion transformers.
//!
//! A student transformer's early-layer, high-noise token latents are pulled
//! towards an EMA teacher's later-layer, lower-noise latents as an auxiliary
//! loss next to the ordinary denoising or velocity objective. The crate holds
//! the forward-process math, a small adaptive-layer-norm transformer with
//! hand-written reverse-mode gradients, the alignment machinery, a trainer,
//! samplers, and the representation diagnostics used to inspect the effect.

// `!(x > 0.0)` is the NaN-rejecting range check used throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod backbone;
pub mod config;
pub mod data;
pub mod diagnostics;
mod error;
pub mod experiment;
pub mod process;
pub mod rng;
pub mod sampler;
mod scalar;
pub mod sra;
pub mod trainer;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
