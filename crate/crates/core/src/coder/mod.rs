//! Integer arithmetic coding over quantized cumulative-frequency tables.
//!
//! The coder is a classic interval-refinement coder at fixed precision: every symbol
//! narrows `[low, high]` to its share of the current width, leading bits are shifted
//! out as soon as they are determined, and the stream ends with the shortest bit
//! string that pins a point inside the final interval. Total output stays within two
//! bits (plus negligible rounding) of the sum of `-log2(freq / 2^scale_bits)`.
//!
//! Bitstreams are packed most-significant-bit first; the last byte is zero-padded.

mod arith;
mod bits;
mod cdf;

pub use arith::{Decoder, EncodedStream, Encoder};
pub use bits::{BitReader, BitWriter};
pub use cdf::{quantize_distribution, QuantizedCdf, Quantizer, SUM_TOLERANCE};

use thiserror::Error;

/// Width of the coder's `low`/`high` registers.
pub const REGISTER_BITS: u32 = 64;

/// Largest supported table precision (`REGISTER_BITS - 2`).
pub const MAX_SCALE_BITS: u32 = REGISTER_BITS - 2;

/// Table precision used by the container format.
pub const DEFAULT_SCALE_BITS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoderError {
    #[error("alphabet of {alphabet_size} symbols does not fit in 2^{scale_bits} frequency units")]
    Precision { alphabet_size: usize, scale_bits: u32 },

    #[error("scale of {0} bits exceeds the coder limit of {MAX_SCALE_BITS}")]
    ScaleTooLarge(u32),

    #[error("empty alphabet")]
    EmptyAlphabet,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("symbol {symbol} has zero frequency")]
    ZeroFrequency { symbol: usize },

    #[error("frequencies sum to {actual}, expected {expected}")]
    BadTotal { expected: u64, actual: u64 },

    #[error("symbol {symbol} out of range for alphabet of {alphabet_size}")]
    SymbolOutOfRange { symbol: usize, alphabet_size: usize },

    #[error("bitstream ended before all symbols were decoded")]
    Truncated,
}
