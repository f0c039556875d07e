//! Desk-scale lab for any-order autoregressive (AO-AR) language models.
//!
//! The library trains and evaluates three model variants on a character
//! corpus: a left-to-right decoder, an any-order decoder that consumes
//! tokens in a sampled permutation while predicting announced target
//! positions, and an encoder-only masked diffusion model. The central fact
//! the code is built around is that the masked-diffusion ELBO and the
//! any-order autoregressive objective are the same expectation, term for
//! term, so one decoder serves both training styles and both sampling
//! styles (sequential and diffusion-like parallel unmasking).

pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod model;
pub mod objectives;
pub mod ordering;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::CoreError;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
