//! Reference-conditioned latent diffusion for scene text and logos.
//!
//! Everything numeric lives here: the noise schedule, the latent codec, the
//! conditioned denoiser with its low-rank adapters, auxiliary recognition
//! heads, guided DDIM sampling, the training loop, and evaluation metrics.
//! The crate is `no_std`-compatible (with `alloc`) so the same code runs in
//! hosted tools and embedded or wasm targets; file formats, datasets, and the
//! CLI live in the companion `refdiff-tools` crate.
//!
//! All floating-point work is generic over [`Scalar`], which is `f32` in
//! production and `f64` in gradient-checking tests. Randomness always flows
//! through explicitly seeded [`rand_chacha::ChaCha8Rng`] generators, so every
//! run of every function is reproducible from its seed.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod auxiliary;
pub mod codec;
pub mod condition;
pub mod error;
pub mod graph;
pub mod guidance;
pub mod lora;
pub mod metrics;
pub mod network;
pub mod render;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{CoreError, Result};
pub use tensor::{Scalar, Tensor};
