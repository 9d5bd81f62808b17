//! Query-contrastive decoding engine and desk-scale evaluation harness.
//!
//! The crate is organized around an abstract next-token-distribution
//! provider: the math kernel ([`dist`]), prompt assembly ([`prompt`],
//! [`embedding`]), providers ([`backend`]), the dual-stream decoding loop
//! ([`decoder`]), and the synthetic task harness ([`evalkit`], [`fixtures`]).

pub mod backend;
pub mod decoder;
pub mod dist;
pub mod embedding;
pub mod error;
pub mod evalkit;
pub mod fixtures;
pub mod prompt;

pub use error::{Error, Result};
