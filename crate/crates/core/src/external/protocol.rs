//! Frame layout and message codec.
//!
//! Every frame is a little-endian `u32` payload length followed by the payload; the
//! payload's first byte is the message tag. Integer fields are little-endian `u32`.
//!
//! | tag | message | body |
//! |-----|---------|------|
//! | 0x01 | HELLO | version |
//! | 0x02 | HELLO_ACK | alphabet_size, 32-byte model digest, max_context |
//! | 0x03 | RESET | empty, no reply |
//! | 0x04 | TOKENIZE | raw bytes |
//! | 0x05 | TOKENS | ids |
//! | 0x06 | DETOKENIZE | ids |
//! | 0x07 | BYTES | raw bytes |
//! | 0x08 | PREDICT | context ids, oldest first |
//! | 0x09 | DIST | alphabet_size fixed-point weights, each >= 1, summing to 2^30 |
//! | 0x7F | ERROR | code, UTF-8 message |

use std::io::{self, Read, Write};

use super::ProtocolError;

pub const PROTOCOL_VERSION: u32 = 1;
/// Fixed-point scale of DIST entries.
pub const DIST_BITS: u32 = 30;
pub const DIST_TOTAL: u64 = 1 << DIST_BITS;
/// Frames above this size are rejected before allocation.
pub const MAX_FRAME_BYTES: u32 = 1 << 26;

pub const DIGEST_LEN: usize = 32;
pub type ModelDigest = [u8; DIGEST_LEN];

pub mod tag {
    pub const HELLO: u8 = 0x01;
    pub const HELLO_ACK: u8 = 0x02;
    pub const RESET: u8 = 0x03;
    pub const TOKENIZE: u8 = 0x04;
    pub const TOKENS: u8 = 0x05;
    pub const DETOKENIZE: u8 = 0x06;
    pub const BYTES: u8 = 0x07;
    pub const PREDICT: u8 = 0x08;
    pub const DIST: u8 = 0x09;
    pub const ERROR: u8 = 0x7F;
}

/// Codes carried by ERROR frames.
pub mod code {
    pub const UNKNOWN_TAG: u32 = 1;
    pub const MALFORMED: u32 = 2;
    pub const CONTEXT_TOO_LONG: u32 = 3;
    pub const BAD_TOKEN: u32 = 4;
    pub const MODEL_FAILURE: u32 = 5;
    pub const VERSION: u32 = 6;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello { version: u32 },
    HelloAck { alphabet_size: u32, digest: ModelDigest, max_context: u32 },
    Reset,
    Tokenize(Vec<u8>),
    Tokens(Vec<u32>),
    Detokenize(Vec<u32>),
    Bytes(Vec<u8>),
    Predict(Vec<u32>),
    Dist(Vec<u32>),
    Error { code: u32, message: String },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => tag::HELLO,
            Message::HelloAck { .. } => tag::HELLO_ACK,
            Message::Reset => tag::RESET,
            Message::Tokenize(_) => tag::TOKENIZE,
            Message::Tokens(_) => tag::TOKENS,
            Message::Detokenize(_) => tag::DETOKENIZE,
            Message::Bytes(_) => tag::BYTES,
            Message::Predict(_) => tag::PREDICT,
            Message::Dist(_) => tag::DIST,
            Message::Error { .. } => tag::ERROR,
        }
    }

    pub fn name(&self) -> &'static str {
        tag_name(self.tag())
    }

    /// Payload bytes (tag + body), without the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.tag()];
        match self {
            Message::Hello { version } => out.extend_from_slice(&version.to_le_bytes()),
            Message::HelloAck {
                alphabet_size,
                digest,
                max_context,
            } => {
                out.extend_from_slice(&alphabet_size.to_le_bytes());
                out.extend_from_slice(digest);
                out.extend_from_slice(&max_context.to_le_bytes());
            }
            Message::Reset => {}
            Message::Tokenize(b) | Message::Bytes(b) => out.extend_from_slice(b),
            Message::Tokens(ids) | Message::Detokenize(ids) | Message::Predict(ids) | Message::Dist(ids) => {
                out.reserve(4 * ids.len());
                for id in ids {
                    out.extend_from_slice(&id.to_le_bytes());
                }
            }
            Message::Error { code, message } => {
                out.extend_from_slice(&code.to_le_bytes());
                out.extend_from_slice(message.as_bytes());
            }
        }
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        let (&t, body) = payload
            .split_first()
            .ok_or_else(|| ProtocolError::Malformed("empty frame".into()))?;
        let fixed = |len: usize| {
            if body.len() == len {
                Ok(())
            } else {
                Err(ProtocolError::Malformed(format!(
                    "{} body is {} bytes, expected {len}",
                    tag_name(t),
                    body.len()
                )))
            }
        };
        Ok(match t {
            tag::HELLO => {
                fixed(4)?;
                Message::Hello { version: u32_at(body, 0) }
            }
            tag::HELLO_ACK => {
                fixed(8 + DIGEST_LEN)?;
                Message::HelloAck {
                    alphabet_size: u32_at(body, 0),
                    digest: body[4..4 + DIGEST_LEN].try_into().unwrap(),
                    max_context: u32_at(body, 4 + DIGEST_LEN),
                }
            }
            tag::RESET => {
                fixed(0)?;
                Message::Reset
            }
            tag::TOKENIZE => Message::Tokenize(body.to_vec()),
            tag::BYTES => Message::Bytes(body.to_vec()),
            tag::TOKENS => Message::Tokens(u32s(t, body)?),
            tag::DETOKENIZE => Message::Detokenize(u32s(t, body)?),
            tag::PREDICT => Message::Predict(u32s(t, body)?),
            tag::DIST => Message::Dist(u32s(t, body)?),
            tag::ERROR => {
                if body.len() < 4 {
                    return Err(ProtocolError::Malformed("ERROR body shorter than its code".into()));
                }
                Message::Error {
                    code: u32_at(body, 0),
                    message: String::from_utf8_lossy(&body[4..]).into_owned(),
                }
            }
            other => return Err(ProtocolError::UnknownTag(other)),
        })
    }
}

pub fn tag_name(t: u8) -> &'static str {
    match t {
        tag::HELLO => "HELLO",
        tag::HELLO_ACK => "HELLO_ACK",
        tag::RESET => "RESET",
        tag::TOKENIZE => "TOKENIZE",
        tag::TOKENS => "TOKENS",
        tag::DETOKENIZE => "DETOKENIZE",
        tag::BYTES => "BYTES",
        tag::PREDICT => "PREDICT",
        tag::DIST => "DIST",
        tag::ERROR => "ERROR",
        _ => "UNKNOWN",
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u32s(t: u8, body: &[u8]) -> Result<Vec<u32>, ProtocolError> {
    if body.len() % 4 != 0 {
        return Err(ProtocolError::Malformed(format!(
            "{} body of {} bytes is not a whole number of ids",
            tag_name(t),
            body.len()
        )));
    }
    Ok(body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    let payload = msg.encode();
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(&payload)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any length byte.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>, ProtocolError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Closed),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Closed,
        _ => e.into(),
    })?;
    Message::decode(&payload).map(Some)
}

/// Checks a DIST body against the fixed-point invariants.
pub fn validate_dist(weights: &[u32], alphabet_size: usize) -> Result<(), ProtocolError> {
    if weights.len() != alphabet_size {
        return Err(ProtocolError::BadDistribution(format!(
            "{} entries for alphabet of {alphabet_size}",
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|&w| w == 0) {
        return Err(ProtocolError::BadDistribution(format!("entry {i} is zero")));
    }
    let sum: u64 = weights.iter().map(|&w| w as u64).sum();
    if sum != DIST_TOTAL {
        return Err(ProtocolError::BadDistribution(format!("entries sum to {sum}, expected 2^30")));
    }
    Ok(())
}

/// Largest-remainder quantization of non-negative integer scores to `2^30`, each
/// entry at least 1. Ties on the remainder go to the lowest index.
pub fn quantize_scores(scores: &[u64]) -> Result<Vec<u32>, ProtocolError> {
    let d = scores.len() as u64;
    if d == 0 || d > DIST_TOTAL {
        return Err(ProtocolError::BadDistribution(format!("cannot quantize {d} entries")));
    }
    // Reserve one unit per entry, share the rest proportionally.
    let spare = DIST_TOTAL - d;
    let total: u128 = scores.iter().map(|&s| s as u128).sum();
    if total == 0 {
        return Err(ProtocolError::BadDistribution("all scores are zero".into()));
    }
    let mut out = Vec::with_capacity(scores.len());
    let mut rem = Vec::with_capacity(scores.len());
    let mut assigned = 0u64;
    for (i, &s) in scores.iter().enumerate() {
        let x = s as u128 * spare as u128;
        let q = (x / total) as u64;
        out.push(1 + q as u32);
        rem.push((x % total, i));
        assigned += q;
    }
    let left = (spare - assigned) as usize;
    if left > 0 {
        rem.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &rem[..left] {
            out[i] += 1;
        }
    }
    Ok(out)
}
