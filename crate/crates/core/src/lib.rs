//! Impartial optimization for heterogeneous and multimodal variational autoencoders.
//!
//! The crate provides a small reverse-mode autodiff engine, exponential-family
//! likelihood heads, gradient-conflict resolvers, impartiality blocks that
//! rewrite the backward pass of split-and-merge sub-graphs, VAE model families,
//! data handling, and evaluation utilities.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradconflict;
pub mod impartiality;
pub mod likelihoods;
pub mod models;
pub mod train;

pub use error::{Error, Result};
