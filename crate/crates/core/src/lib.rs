//! Lossless text compression with a weighted product of experts.
//!
//! Each symbol is predicted by several experts (windowed Lidstone counts, adaptive
//! context models, optionally an out-of-process language model). Their distributions
//! are multiplied with exponents on the simplex, renormalized, quantized to an integer
//! table and fed to an arithmetic coder. The exponents are fitted on a calibration
//! sample at compression time and stored in the container header.
//!
//! Modules, bottom-up:
//! - [`coder`]: integer arithmetic coding over quantized frequency tables.
//! - [`experts`]: the expert contract and the built-in deterministic experts.
//! - [`mix`]: log-domain weighted product of distributions.
//! - [`fit`]: cross-entropy weight fitting and grid search.
//! - [`external`]: wire protocol, client and mock server for remote experts.
//! - [`codec`]: chunked compress/decompress and the container format.
//! - [`eval`]: corpus ingestion and benchmark reports.

pub mod codec;
pub mod coder;
pub mod eval;
pub mod experts;
pub mod external;
pub mod fit;
mod memo;
pub mod mix;

/// Symbol index into the active alphabet (bytes, or token ids of an external expert).
pub type Symbol = u32;

/// Alphabet of the built-in experts.
pub const BYTE_ALPHABET: usize = 256;
