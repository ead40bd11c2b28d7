use super::protocol::{read_frame, validate_dist, write_frame, Message, ModelDigest, DIST_BITS, DIST_TOTAL, PROTOCOL_VERSION};
use super::transport::{Connection, Endpoint};
use super::ProtocolError;
use crate::experts::{check_symbol, Expert, ExpertError};
use crate::Symbol;

/// An established protocol session.
pub struct Session {
    conn: Connection,
    alphabet_size: usize,
    digest: ModelDigest,
    max_context: u32,
    ln_scale: f64,
}

impl Session {
    pub fn connect(endpoint: &Endpoint) -> Result<Self, ProtocolError> {
        Self::handshake(Connection::open(endpoint)?)
    }

    pub fn handshake(mut conn: Connection) -> Result<Self, ProtocolError> {
        write_frame(&mut conn.writer, &Message::Hello {
            version: PROTOCOL_VERSION,
        })?;
        match read_reply(&mut conn)? {
            Message::HelloAck {
                alphabet_size,
                digest,
                max_context,
            } => {
                if alphabet_size == 0 {
                    return Err(ProtocolError::Malformed("server declared an empty alphabet".into()));
                }
                Ok(Self {
                    conn,
                    alphabet_size: alphabet_size as usize,
                    digest,
                    max_context,
                    ln_scale: DIST_BITS as f64 * std::f64::consts::LN_2,
                })
            }
            other => Err(unexpected("HELLO_ACK", &other)),
        }
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn digest(&self) -> &ModelDigest {
        &self.digest
    }

    /// Longest context the server accepts; 0 means no declared limit.
    pub fn max_context(&self) -> u32 {
        self.max_context
    }

    pub fn reset(&mut self) -> Result<(), ProtocolError> {
        write_frame(&mut self.conn.writer, &Message::Reset)?;
        Ok(())
    }

    pub fn tokenize(&mut self, bytes: &[u8]) -> Result<Vec<u32>, ProtocolError> {
        write_frame(&mut self.conn.writer, &Message::Tokenize(bytes.to_vec()))?;
        match read_reply(&mut self.conn)? {
            Message::Tokens(ids) => {
                if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.alphabet_size) {
                    return Err(ProtocolError::Malformed(format!("token id {bad} outside the alphabet")));
                }
                Ok(ids)
            }
            other => Err(unexpected("TOKENS", &other)),
        }
    }

    pub fn detokenize(&mut self, ids: &[u32]) -> Result<Vec<u8>, ProtocolError> {
        write_frame(&mut self.conn.writer, &Message::Detokenize(ids.to_vec()))?;
        match read_reply(&mut self.conn)? {
            Message::Bytes(b) => Ok(b),
            other => Err(unexpected("BYTES", &other)),
        }
    }

    /// Raw fixed-point distribution for `context`, validated.
    pub fn predict_fixed(&mut self, context: &[u32]) -> Result<Vec<u32>, ProtocolError> {
        write_frame(&mut self.conn.writer, &Message::Predict(context.to_vec()))?;
        match read_reply(&mut self.conn)? {
            Message::Dist(w) => {
                validate_dist(&w, self.alphabet_size)?;
                Ok(w)
            }
            other => Err(unexpected("DIST", &other)),
        }
    }

    /// Log-probabilities `ln(w_j) - 30 ln 2` for `context`.
    pub fn predict_into(&mut self, context: &[u32], out: &mut [f64]) -> Result<(), ProtocolError> {
        let w = self.predict_fixed(context)?;
        for (o, &x) in out.iter_mut().zip(&w) {
            *o = libm::log(x as f64) - self.ln_scale;
        }
        Ok(())
    }
}

fn read_reply(conn: &mut Connection) -> Result<Message, ProtocolError> {
    match read_frame(&mut conn.reader)? {
        Some(Message::Error { code, message }) => Err(ProtocolError::Remote { code, message }),
        Some(m) => Ok(m),
        None => Err(ProtocolError::Closed),
    }
}

fn unexpected(expected: &'static str, got: &Message) -> ProtocolError {
    ProtocolError::UnexpectedMessage {
        expected,
        got: got.name(),
    }
}

/// A remote model acting as an expert. Contexts longer than the effective limit are
/// cut to their most recent tokens.
pub struct ExternalExpert {
    session: Session,
    context_limit: Option<usize>,
}

impl ExternalExpert {
    /// `cap` further restricts the server's declared context limit.
    pub fn new(session: Session, cap: Option<u32>) -> Self {
        let server = (session.max_context() > 0).then_some(session.max_context());
        let limit = match (server, cap) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        Self {
            session,
            context_limit: limit.map(|l| l as usize),
        }
    }

    pub fn connect(endpoint: &Endpoint, cap: Option<u32>) -> Result<Self, ProtocolError> {
        Ok(Self::new(Session::connect(endpoint)?, cap))
    }

    /// Effective context limit, the value recorded in container headers.
    pub fn context_limit(&self) -> Option<u32> {
        self.context_limit.map(|l| l as u32)
    }

    pub fn session(&mut self) -> &mut Session {
        &mut self.session
    }
}

impl ExternalExpert {
    /// The most recent tokens of `context` that fit the context limit.
    fn window<'c>(&self, context: &'c [Symbol]) -> &'c [Symbol] {
        let start = match self.context_limit {
            Some(l) => context.len().saturating_sub(l),
            None => 0,
        };
        &context[start..]
    }
}

impl Expert for ExternalExpert {
    fn alphabet_size(&self) -> usize {
        self.session.alphabet_size()
    }

    fn begin_chunk(&mut self) -> Result<(), ExpertError> {
        Ok(self.session.reset()?)
    }

    fn predict_into(&mut self, context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        let context = self.window(context);
        Ok(self.session.predict_into(context, out)?)
    }

    fn predict_probs_into(&mut self, context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        let context = self.window(context);
        let w = self.session.predict_fixed(context)?;
        for (o, &x) in out.iter_mut().zip(&w) {
            *o = x as f64 / DIST_TOTAL as f64;
        }
        Ok(())
    }

    fn observe(&mut self, symbol: Symbol, _context: &[Symbol]) -> Result<(), ExpertError> {
        check_symbol(symbol, self.session.alphabet_size())
    }
}
