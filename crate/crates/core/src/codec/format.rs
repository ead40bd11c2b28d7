//! Container layout. All integers little-endian.
//!
//! ```text
//! magic "WPOE" | version u8 | alphabet_size u32 | original_length u64 | chunk_size u32
//! | K u8 | K expert specs | weight vector | K x 32-byte model digests
//! | chunk table: per chunk payload bytes u32 (version 2: then that chunk's weights)
//! | SHA-256 of everything above | chunk payloads
//! ```
//!
//! Version 1 uses one weight vector for the whole file. Version 2 additionally stores
//! a weight vector per chunk and ignores the file-level one when decoding.

use sha2::{Digest, Sha256};

use super::CodecError;
use crate::experts::ExpertSpec;
use crate::external::{ModelDigest, DIGEST_LEN};
use crate::mix::WeightVector;

pub const MAGIC: [u8; 4] = *b"WPOE";
pub const VERSION_FILE_WEIGHTS: u8 = 1;
pub const VERSION_CHUNK_WEIGHTS: u8 = 2;
pub const HEADER_DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkEntry {
    pub payload_bytes: u32,
    pub weights: Option<WeightVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u8,
    pub alphabet_size: u32,
    pub original_length: u64,
    pub chunk_size: u32,
    pub specs: Vec<ExpertSpec>,
    pub weights: WeightVector,
    /// Zeros for built-in experts.
    pub digests: Vec<ModelDigest>,
    pub chunks: Vec<ChunkEntry>,
}

impl Header {
    pub fn chunk_count(original_length: u64, chunk_size: u32) -> u64 {
        original_length.div_ceil(chunk_size as u64)
    }

    /// Symbols in chunk `index`.
    pub fn chunk_len(&self, index: usize) -> usize {
        let start = index as u64 * self.chunk_size as u64;
        (self.original_length - start).min(self.chunk_size as u64) as usize
    }

    pub fn weights_for(&self, index: usize) -> &WeightVector {
        self.chunks[index].weights.as_ref().unwrap_or(&self.weights)
    }

    /// Serialized header including its trailing digest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.alphabet_size.to_le_bytes());
        out.extend_from_slice(&self.original_length.to_le_bytes());
        out.extend_from_slice(&self.chunk_size.to_le_bytes());
        out.push(self.specs.len() as u8);
        for s in &self.specs {
            s.write_header(&mut out);
        }
        self.weights.write_bytes(&mut out);
        for d in &self.digests {
            out.extend_from_slice(d);
        }
        for c in &self.chunks {
            out.extend_from_slice(&c.payload_bytes.to_le_bytes());
            if self.version == VERSION_CHUNK_WEIGHTS {
                c.weights
                    .as_ref()
                    .expect("version 2 chunks carry weights")
                    .write_bytes(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies a header; returns it with the header's byte length.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize), CodecError> {
        let mut buf = bytes;
        let magic: [u8; 4] = take(&mut buf)?;
        if magic != MAGIC {
            return Err(CodecError::BadMagic);
        }
        let [version] = take(&mut buf)?;
        if version != VERSION_FILE_WEIGHTS && version != VERSION_CHUNK_WEIGHTS {
            return Err(CodecError::UnsupportedVersion(version));
        }
        let alphabet_size = u32::from_le_bytes(take(&mut buf)?);
        let original_length = u64::from_le_bytes(take(&mut buf)?);
        let chunk_size = u32::from_le_bytes(take(&mut buf)?);
        let [k] = take(&mut buf)?;
        // Fields are range-checked only after the digest, but guard allocation sizes.
        let mut specs = Vec::with_capacity(k as usize);
        for _ in 0..k {
            specs.push(ExpertSpec::read_header(&mut buf).map_err(|e| CodecError::Format(e.to_string()))?);
        }
        let weights = WeightVector::read_bytes(&mut buf).map_err(|e| CodecError::Format(e.to_string()))?;
        let mut digests = Vec::with_capacity(k as usize);
        for _ in 0..k {
            digests.push(take::<DIGEST_LEN>(&mut buf)?);
        }
        if chunk_size == 0 {
            return Err(CodecError::Format("chunk size is zero".into()));
        }
        let n_chunks = Self::chunk_count(original_length, chunk_size);
        // Each table entry is at least 4 bytes; a count beyond the input is corrupt.
        if n_chunks > (buf.len() / 4) as u64 {
            return Err(CodecError::Truncated("chunk table".into()));
        }
        let mut chunks = Vec::with_capacity(n_chunks as usize);
        for _ in 0..n_chunks {
            let payload_bytes = u32::from_le_bytes(take(&mut buf)?);
            let weights = if version == VERSION_CHUNK_WEIGHTS {
                Some(WeightVector::read_bytes(&mut buf).map_err(|e| CodecError::Format(e.to_string()))?)
            } else {
                None
            };
            chunks.push(ChunkEntry { payload_bytes, weights });
        }
        let body_len = bytes.len() - buf.len();
        let stored: [u8; HEADER_DIGEST_LEN] = take(&mut buf)?;
        if Sha256::digest(&bytes[..body_len]).as_slice() != stored {
            return Err(CodecError::HeaderDigest);
        }

        let header = Self {
            version,
            alphabet_size,
            original_length,
            chunk_size,
            specs,
            weights,
            digests,
            chunks,
        };
        header.check()?;
        Ok((header, body_len + HEADER_DIGEST_LEN))
    }

    fn check(&self) -> Result<(), CodecError> {
        let k = self.specs.len();
        if k == 0 {
            return Err(CodecError::Format("no experts".into()));
        }
        if self.alphabet_size == 0 {
            return Err(CodecError::Format("empty alphabet".into()));
        }
        if self.weights.len() != k {
            return Err(CodecError::Format(format!("{} weights for {k} experts", self.weights.len())));
        }
        if self.chunks.iter().any(|c| c.weights.as_ref().is_some_and(|w| w.len() != k)) {
            return Err(CodecError::Format("chunk weight vector has the wrong length".into()));
        }
        Ok(())
    }
}

fn take<const N: usize>(buf: &mut &[u8]) -> Result<[u8; N], CodecError> {
    if buf.len() < N {
        return Err(CodecError::Truncated("header".into()));
    }
    let (head, rest) = buf.split_at(N);
    *buf = rest;
    Ok(head.try_into().expect("length checked"))
}
