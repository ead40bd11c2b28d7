//! Out-of-process experts over a small framed binary protocol.
//!
//! The server quantizes its next-token distribution to integers summing to 2^30, so
//! encoder and decoder see bit-identical distributions no matter how the server
//! computes them internally. A SHA-256 model digest is exchanged at handshake and
//! stored in container headers.

mod client;
mod mock;
pub mod protocol;
mod transport;

pub use client::{ExternalExpert, Session};
pub use mock::{serve_connection, MockConfig, MockModel, ProbabilityModel, Server};
pub use protocol::{Message, ModelDigest, DIGEST_LEN, DIST_TOTAL, PROTOCOL_VERSION};
pub use transport::{Connection, Endpoint, DEFAULT_TIMEOUT};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("connection closed mid-exchange")]
    Closed,

    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(u32),

    #[error("unknown message tag 0x{0:02x}")]
    UnknownTag(u8),

    #[error("malformed frame: {0}")]
    Malformed(String),

    #[error("expected {expected}, got {got}")]
    UnexpectedMessage { expected: &'static str, got: &'static str },

    #[error("invalid DIST frame: {0}")]
    BadDistribution(String),

    #[error("server error {code}: {message}")]
    Remote { code: u32, message: String },

    #[error("bad endpoint {0}")]
    BadEndpoint(String),
}
