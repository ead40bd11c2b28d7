//! Protocol server loop and a seeded deterministic stand-in model.

use std::io::{self, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

#[cfg(unix)]
use std::os::unix::net::UnixListener;

use sha2::{Digest, Sha256};

use super::protocol::{
    code, quantize_scores, read_frame, write_frame, Message, ModelDigest, DIST_BITS, PROTOCOL_VERSION,
};
use super::transport::Endpoint;
use super::ProtocolError;

/// What a protocol server needs from its model.
pub trait ProbabilityModel: Send + Sync {
    fn alphabet_size(&self) -> u32;
    fn digest(&self) -> ModelDigest;
    /// 0 for no limit.
    fn max_context(&self) -> u32;
    fn tokenize(&self, bytes: &[u8]) -> Result<Vec<u32>, (u32, String)>;
    fn detokenize(&self, ids: &[u32]) -> Result<Vec<u8>, (u32, String)>;
    /// Fixed-point next-token weights: `alphabet_size` entries, each >= 1, sum 2^30.
    fn predict(&self, context: &[u32]) -> Result<Vec<u32>, (u32, String)>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockConfig {
    pub seed: u64,
    pub alphabet_size: u32,
    pub max_context: u32,
    /// Answer every PREDICT with the uniform distribution.
    pub uniform: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alphabet_size: 256,
            max_context: 4096,
            uniform: false,
        }
    }
}

/// Recent tokens the mock looks at.
const MOCK_WINDOW: usize = 64;
/// Score bonus per occurrence in the recent window.
const MOCK_BOOST: u64 = 64;

/// Deterministic dummy model. Tokens are bytes (ids below 256). Each prediction
/// scores every symbol as `1 + jitter + 64 * (occurrences among the last 64
/// tokens)`, where the jitter in `0..16` is a keyed hash of the seed, the last three
/// tokens and the symbol, and quantizes the scores to 2^30.
#[derive(Debug, Clone)]
pub struct MockModel {
    config: MockConfig,
}

impl MockModel {
    pub fn new(config: MockConfig) -> Result<Self, ProtocolError> {
        if config.alphabet_size == 0 || config.alphabet_size > 1 << 24 {
            return Err(ProtocolError::BadEndpoint(format!(
                "mock alphabet of {} is unsupported",
                config.alphabet_size
            )));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl ProbabilityModel for MockModel {
    fn alphabet_size(&self) -> u32 {
        self.config.alphabet_size
    }

    fn digest(&self) -> ModelDigest {
        let mut h = Sha256::new();
        h.update(b"wpoe-mock-v1");
        h.update(self.config.seed.to_le_bytes());
        h.update(self.config.alphabet_size.to_le_bytes());
        h.update(DIST_BITS.to_le_bytes());
        h.update([self.config.uniform as u8]);
        h.finalize().into()
    }

    fn max_context(&self) -> u32 {
        self.config.max_context
    }

    fn tokenize(&self, bytes: &[u8]) -> Result<Vec<u32>, (u32, String)> {
        bytes
            .iter()
            .map(|&b| {
                if (b as u32) < self.config.alphabet_size {
                    Ok(b as u32)
                } else {
                    Err((code::BAD_TOKEN, format!("byte {b} has no token")))
                }
            })
            .collect()
    }

    fn detokenize(&self, ids: &[u32]) -> Result<Vec<u8>, (u32, String)> {
        ids.iter()
            .map(|&id| u8::try_from(id).map_err(|_| (code::BAD_TOKEN, format!("token {id} has no bytes"))))
            .collect()
    }

    fn predict(&self, context: &[u32]) -> Result<Vec<u32>, (u32, String)> {
        let d = self.config.alphabet_size as usize;
        if self.config.max_context > 0 && context.len() > self.config.max_context as usize {
            return Err((
                code::CONTEXT_TOO_LONG,
                format!("context of {} exceeds {}", context.len(), self.config.max_context),
            ));
        }
        if let Some(&bad) = context.iter().find(|&&t| t as usize >= d) {
            return Err((code::BAD_TOKEN, format!("token {bad} outside the alphabet")));
        }
        let mut scores = vec![1u64; d];
        if !self.config.uniform {
            let mut key = splitmix(self.config.seed);
            for &t in context.iter().rev().take(3) {
                key = splitmix(key ^ t as u64);
            }
            for (a, s) in scores.iter_mut().enumerate() {
                *s += splitmix(key ^ (a as u64).wrapping_mul(0xA24B_AED4_963E_E407)) >> 60;
            }
            for &t in context.iter().rev().take(MOCK_WINDOW) {
                scores[t as usize] += MOCK_BOOST;
            }
        }
        quantize_scores(&scores).map_err(|e| (code::MODEL_FAILURE, e.to_string()))
    }
}

/// Answers frames on one connection until the peer closes it.
pub fn serve_connection<M, R, W>(model: &M, reader: R, writer: W) -> Result<(), ProtocolError>
where
    M: ProbabilityModel + ?Sized,
    R: Read,
    W: Write,
{
    let mut reader = io::BufReader::new(reader);
    let mut writer = io::BufWriter::new(writer);
    loop {
        let msg = match read_frame(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(ProtocolError::UnknownTag(t)) => {
                write_frame(&mut writer, &Message::Error {
                    code: code::UNKNOWN_TAG,
                    message: format!("unknown tag 0x{t:02x}"),
                })?;
                continue;
            }
            Err(ProtocolError::Malformed(why)) => {
                write_frame(&mut writer, &Message::Error {
                    code: code::MALFORMED,
                    message: why,
                })?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let reply = match msg {
            Message::Hello { version } if version == PROTOCOL_VERSION => Some(Ok(Message::HelloAck {
                alphabet_size: model.alphabet_size(),
                digest: model.digest(),
                max_context: model.max_context(),
            })),
            Message::Hello { version } => Some(Err((code::VERSION, format!("unsupported version {version}")))),
            Message::Reset => None,
            Message::Tokenize(bytes) => Some(model.tokenize(&bytes).map(Message::Tokens)),
            Message::Detokenize(ids) => Some(model.detokenize(&ids).map(Message::Bytes)),
            Message::Predict(ctx) => Some(model.predict(&ctx).map(Message::Dist)),
            other => Some(Err((code::UNKNOWN_TAG, format!("{} is not a request", other.name())))),
        };
        match reply {
            Some(Ok(m)) => write_frame(&mut writer, &m)?,
            Some(Err((code, message))) => write_frame(&mut writer, &Message::Error { code, message })?,
            None => {}
        }
    }
}

enum Listener {
    Tcp(TcpListener),
    #[cfg(unix)]
    Unix(UnixListener, std::path::PathBuf),
    Stdio,
}

/// A bound protocol server.
pub struct Server {
    listener: Listener,
    model: Arc<dyn ProbabilityModel>,
}

impl Server {
    pub fn bind(endpoint: &Endpoint, model: Arc<dyn ProbabilityModel>) -> Result<Self, ProtocolError> {
        let listener = match endpoint {
            Endpoint::Tcp(addr) => Listener::Tcp(TcpListener::bind(addr)?),
            #[cfg(unix)]
            Endpoint::Unix(path) => {
                if path.exists() {
                    std::fs::remove_file(path)?;
                }
                Listener::Unix(UnixListener::bind(path)?, path.clone())
            }
            #[cfg(not(unix))]
            Endpoint::Unix(_) => return Err(ProtocolError::BadEndpoint("unix sockets are unsupported here".into())),
            Endpoint::Stdio => Listener::Stdio,
            Endpoint::Exec(_) => return Err(ProtocolError::BadEndpoint("exec is a client-side endpoint".into())),
        };
        Ok(Self { listener, model })
    }

    /// The endpoint clients should use, with any OS-assigned port filled in.
    pub fn endpoint(&self) -> Result<Endpoint, ProtocolError> {
        Ok(match &self.listener {
            Listener::Tcp(l) => Endpoint::Tcp(l.local_addr()?.to_string()),
            #[cfg(unix)]
            Listener::Unix(_, path) => Endpoint::Unix(path.clone()),
            Listener::Stdio => Endpoint::Stdio,
        })
    }

    /// Serves until the listener fails; one thread per connection. A stdio server
    /// returns when stdin closes.
    pub fn run(self) -> Result<(), ProtocolError> {
        match self.listener {
            Listener::Stdio => serve_connection(&*self.model, io::stdin().lock(), io::stdout().lock()),
            Listener::Tcp(l) => {
                for stream in l.incoming() {
                    let stream = stream?;
                    stream.set_nodelay(true)?;
                    let model = Arc::clone(&self.model);
                    thread::spawn(move || {
                        let r = stream.try_clone()?;
                        serve_connection(&*model, r, stream)
                    });
                }
                Ok(())
            }
            #[cfg(unix)]
            Listener::Unix(l, _) => {
                for stream in l.incoming() {
                    let stream = stream?;
                    let model = Arc::clone(&self.model);
                    thread::spawn(move || {
                        let r = stream.try_clone()?;
                        serve_connection(&*model, r, stream)
                    });
                }
                Ok(())
            }
        }
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> JoinHandle<Result<(), ProtocolError>> {
        thread::spawn(move || self.run())
    }
}
