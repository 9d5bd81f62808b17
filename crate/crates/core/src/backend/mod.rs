//! Next-token-distribution providers: the deterministic table-driven toy
//! model and the HTTP client for external logit servers.

mod http;
mod table;

pub use http::{endpoint_probe, HttpBackend, LogitEndpointConfig, PROTOCOL_VERSION};
pub use table::{table_lm_load, TableLm, TableLmSpec, BOS_SENTINEL};

use crate::dist::{LogitVector, Vocabulary};
use crate::error::Result;

/// A deterministic source of next-token logits: the same rendered context
/// and generated-so-far prefix always produce the same vector, and the
/// vocabulary is fixed for the provider's lifetime. Implementations must be
/// callable from concurrent decoding streams.
pub trait NextTokenProvider: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Logits over the declared vocabulary given the rendered input text
    /// and the tokens generated so far.
    fn next_logits(&self, context: &str, prefix: &[String]) -> Result<LogitVector>;
}
