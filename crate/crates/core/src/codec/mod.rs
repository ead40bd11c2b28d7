//! Chunked compression pipeline.
//!
//! The input is split into fixed-size chunks that are coded independently: every
//! expert starts each chunk from a fresh state, so chunks can be encoded and decoded
//! in parallel and the output does not depend on the thread count. For each symbol
//! the experts predict, the mixture is quantized to a 16-bit table, the symbol is
//! coded, and every expert observes it.

mod format;

pub use format::{ChunkEntry, Header, HEADER_DIGEST_LEN, MAGIC, VERSION_CHUNK_WEIGHTS, VERSION_FILE_WEIGHTS};

use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::coder::{CoderError, Decoder, EncodedStream, Encoder, QuantizedCdf, Quantizer, DEFAULT_SCALE_BITS};
use crate::experts::{build_builtin, Expert, ExpertError, ExpertSpec};
use crate::external::{Endpoint, ExternalExpert, ModelDigest, ProtocolError, Session};
use crate::fit::{fit_weights, CalibrationSample, FitConfig, FitError, FitReport};
use crate::memo::Memo;
use crate::mix::{mix_probabilities_memo, MixError, WeightVector};
use crate::{Symbol, BYTE_ALPHABET};

pub const DEFAULT_CHUNK_SIZE: usize = 2048;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("not a wpoe container")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),

    #[error("header checksum mismatch")]
    HeaderDigest,

    #[error("container truncated: {0}")]
    Truncated(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("expert {expert} model digest differs from the one recorded at compression time")]
    ModelDigest { expert: usize },

    #[error("alphabet mismatch: {0}")]
    Alphabet(String),

    #[error("no endpoint configured for external expert {expert}")]
    NoEndpoint { expert: usize },

    #[error("tokenizer does not round-trip the input")]
    Tokenizer,

    #[error("invalid options: {0}")]
    Config(String),

    #[error(transparent)]
    Coder(#[from] CoderError),

    #[error(transparent)]
    Expert(#[from] ExpertError),

    #[error(transparent)]
    Fit(#[from] FitError),

    #[error(transparent)]
    Mix(#[from] MixError),

    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Broad error classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Io,
    Integrity,
    Protocol,
    Internal,
}

impl CodecError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CodecError::BadMagic
            | CodecError::UnsupportedVersion(_)
            | CodecError::HeaderDigest
            | CodecError::Truncated(_)
            | CodecError::Format(_)
            | CodecError::ModelDigest { .. } => ErrorClass::Integrity,
            CodecError::Coder(CoderError::Truncated) => ErrorClass::Integrity,
            CodecError::Alphabet(_) | CodecError::Tokenizer => ErrorClass::Protocol,
            CodecError::Protocol(ProtocolError::Io(_)) | CodecError::Expert(ExpertError::Protocol(ProtocolError::Io(_))) => {
                ErrorClass::Io
            }
            CodecError::Protocol(_) | CodecError::Expert(ExpertError::Protocol(_)) => ErrorClass::Protocol,
            CodecError::NoEndpoint { .. } | CodecError::Config(_) | CodecError::Expert(ExpertError::Config(_)) => {
                ErrorClass::Usage
            }
            _ => ErrorClass::Internal,
        }
    }
}

/// Which chunks make up the calibration sample.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightMode {
    /// Fit once on the listed chunk indices (out-of-range ones are ignored), use
    /// everywhere.
    Fit { calibration: Vec<usize> },
    Fixed(WeightVector),
    /// Fit separately on every chunk and store each chunk's weights.
    PerChunk,
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::Fit { calibration: vec![0] }
    }
}

#[derive(Debug, Clone)]
pub struct CompressOptions {
    pub chunk_size: usize,
    pub weights: WeightMode,
    pub fit: FitConfig,
    /// Worker threads; `None` uses every core.
    pub threads: Option<usize>,
    /// Endpoints for external experts without one in their spec, in order.
    pub endpoints: Vec<Endpoint>,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            weights: WeightMode::default(),
            fit: FitConfig::default(),
            threads: None,
            endpoints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DecompressOptions {
    pub threads: Option<usize>,
    pub endpoints: Vec<Endpoint>,
}

#[derive(Debug, Clone)]
pub struct CodecStats {
    pub input_bytes: u64,
    pub symbols: u64,
    pub output_bytes: u64,
    pub header_bytes: u64,
    pub payload_bytes: u64,
    /// Exact bit length of each chunk's arithmetic-code stream.
    pub chunk_bits: Vec<u64>,
    /// Per chunk, the sum of `-log2` of the quantized probabilities of its symbols.
    pub chunk_ideal_bits: Vec<f64>,
    pub weights: WeightVector,
    pub chunk_weights: Option<Vec<WeightVector>>,
    pub fit: Option<FitReport>,
    pub wall_time: Duration,
}

/// Whether the container header counts toward the rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeaderAccounting {
    Include,
    Exclude,
}

impl CodecStats {
    pub fn rate(&self, header: HeaderAccounting) -> Option<f64> {
        compute_rate(self, header)
    }

    pub fn ideal_bits(&self) -> f64 {
        self.chunk_ideal_bits.iter().sum()
    }
}

/// `100 * compressed / original` in percent, `None` for empty input.
pub fn compute_rate(stats: &CodecStats, header: HeaderAccounting) -> Option<f64> {
    if stats.input_bytes == 0 {
        return None;
    }
    let compressed = match header {
        HeaderAccounting::Include => stats.output_bytes,
        HeaderAccounting::Exclude => stats.payload_bytes,
    };
    Some(100.0 * compressed as f64 / stats.input_bytes as f64)
}

/// What it takes to instantiate the expert set in a worker.
struct ExpertSet {
    specs: Vec<ExpertSpec>,
    endpoints: Vec<Option<Endpoint>>,
    alphabet_size: usize,
}

impl ExpertSet {
    fn build(&self) -> Result<Vec<Box<dyn Expert>>, CodecError> {
        self.specs
            .iter()
            .zip(&self.endpoints)
            .map(|(spec, ep)| -> Result<Box<dyn Expert>, CodecError> {
                match (spec, ep) {
                    (ExpertSpec::External { max_context, .. }, Some(ep)) => {
                        Ok(Box::new(ExternalExpert::connect(ep, *max_context)?))
                    }
                    _ => Ok(build_builtin(spec, self.alphabet_size)?),
                }
            })
            .collect()
    }
}

fn parse_endpoint(text: &str) -> Result<Endpoint, CodecError> {
    Ok(text.parse::<Endpoint>()?)
}

/// Resolves each external spec's endpoint: its own, else the next of `defaults`
/// (the last one repeats).
fn resolve_endpoints(specs: &[ExpertSpec], defaults: &[Endpoint]) -> Result<Vec<Option<Endpoint>>, CodecError> {
    let mut next = 0;
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            ExpertSpec::External { endpoint: Some(e), .. } => parse_endpoint(e).map(Some),
            ExpertSpec::External { endpoint: None, .. } => {
                let ep = defaults
                    .get(next)
                    .or(defaults.last())
                    .cloned()
                    .ok_or(CodecError::NoEndpoint { expert: i })?;
                next += 1;
                Ok(Some(ep))
            }
            _ => Ok(None),
        })
        .collect()
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, CodecError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CodecError::Config("thread count must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CodecError::Config(e.to_string()))
}

/// Mixes the active experts' rows into `probs`; a vertex weight uses the expert's
/// probabilities directly.
struct Mixer {
    weights: WeightVector,
    active: Vec<usize>,
    rows: Vec<Vec<f64>>,
    probs: Vec<f64>,
    quantizer: Quantizer,
    exp: Memo,
}

impl Mixer {
    fn new(weights: WeightVector, alphabet_size: usize) -> Self {
        let active = weights
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect();
        let k = weights.len();
        Self {
            weights,
            active,
            rows: vec![vec![0.0; alphabet_size]; k],
            probs: Vec::with_capacity(alphabet_size),
            quantizer: Quantizer::new(),
            exp: Memo::exp(),
        }
    }

    fn begin(&mut self, experts: &mut [Box<dyn Expert>]) -> Result<(), CodecError> {
        for &k in &self.active {
            experts[k].begin_chunk()?;
        }
        Ok(())
    }

    fn table(&mut self, experts: &mut [Box<dyn Expert>], context: &[Symbol]) -> Result<QuantizedCdf, CodecError> {
        if let Some(k) = self.weights.vertex() {
            self.probs.resize(self.rows[k].len(), 0.0);
            experts[k].predict_probs_into(context, &mut self.probs)?;
        } else {
            for &k in &self.active {
                experts[k].predict_into(context, &mut self.rows[k])?;
            }
            let rows: Vec<&[f64]> = self.rows.iter().map(|r| r.as_slice()).collect();
            mix_probabilities_memo(&rows, &self.weights, &mut self.probs, &mut self.exp)?;
        }
        Ok(self.quantizer.quantize(&self.probs, DEFAULT_SCALE_BITS)?)
    }

    fn observe(&mut self, experts: &mut [Box<dyn Expert>], symbol: Symbol, context: &[Symbol]) -> Result<(), CodecError> {
        for &k in &self.active {
            experts[k].observe(symbol, context)?;
        }
        Ok(())
    }
}

type WorkerExperts = Result<Vec<Box<dyn Expert>>, Option<CodecError>>;

/// The first task on a worker whose experts failed to build reports the real error.
fn worker_experts(state: &mut WorkerExperts) -> Result<&mut Vec<Box<dyn Expert>>, CodecError> {
    match state {
        Ok(e) => Ok(e),
        Err(e) => Err(e
            .take()
            .unwrap_or_else(|| CodecError::Config("expert construction failed".into()))),
    }
}

fn encode_chunk(
    chunk: &[Symbol],
    experts: &mut [Box<dyn Expert>],
    weights: &WeightVector,
    alphabet_size: usize,
) -> Result<(EncodedStream, f64), CodecError> {
    let mut mixer = Mixer::new(weights.clone(), alphabet_size);
    mixer.begin(experts)?;
    let mut enc = Encoder::new();
    let mut ideal = 0.0;
    for i in 0..chunk.len() {
        let ctx = &chunk[..i];
        let cdf = mixer.table(experts, ctx)?;
        let s = chunk[i] as usize;
        ideal += cdf.code_length_bits(s);
        enc.encode(&cdf, s)?;
        mixer.observe(experts, chunk[i], ctx)?;
    }
    Ok((enc.finish(), ideal))
}

fn decode_chunk(
    payload: &[u8],
    len: usize,
    experts: &mut [Box<dyn Expert>],
    weights: &WeightVector,
    alphabet_size: usize,
) -> Result<Vec<Symbol>, CodecError> {
    let mut mixer = Mixer::new(weights.clone(), alphabet_size);
    mixer.begin(experts)?;
    let mut dec = Decoder::new(payload);
    let mut out: Vec<Symbol> = Vec::with_capacity(len);
    for _ in 0..len {
        let cdf = mixer.table(experts, &out)?;
        let s = dec.decode(&cdf)? as Symbol;
        mixer.observe(experts, s, &out)?;
        out.push(s);
    }
    Ok(out)
}

/// Replays the coding tables of one chunk under built-in experts, calling `visit`
/// with the table each symbol is coded against.
pub fn trace_chunk<F>(
    chunk: &[Symbol],
    specs: &[ExpertSpec],
    alphabet_size: usize,
    weights: &WeightVector,
    mut visit: F,
) -> Result<(), CodecError>
where
    F: FnMut(&QuantizedCdf, Symbol),
{
    if weights.len() != specs.len() {
        return Err(CodecError::Config(format!("{} weights for {} experts", weights.len(), specs.len())));
    }
    let mut experts = specs
        .iter()
        .map(|s| build_builtin(s, alphabet_size))
        .collect::<Result<Vec<_>, _>>()?;
    let mut mixer = Mixer::new(weights.clone(), alphabet_size);
    mixer.begin(&mut experts)?;
    for i in 0..chunk.len() {
        let ctx = &chunk[..i];
        let cdf = mixer.table(&mut experts, ctx)?;
        visit(&cdf, chunk[i]);
        mixer.observe(&mut experts, chunk[i], ctx)?;
    }
    Ok(())
}

struct Prepared {
    symbols: Vec<Symbol>,
    specs: Vec<ExpertSpec>,
    digests: Vec<ModelDigest>,
    set: ExpertSet,
}

/// Handshakes with external experts, fixes the alphabet and tokenizes the input.
fn prepare(input: &[u8], specs: &[ExpertSpec], endpoints: &[Endpoint]) -> Result<Prepared, CodecError> {
    if specs.is_empty() {
        return Err(CodecError::Config("at least one expert is required".into()));
    }
    if specs.len() > u8::MAX as usize {
        return Err(CodecError::Config("at most 255 experts".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let resolved = resolve_endpoints(specs, endpoints)?;
    let mut specs = specs.to_vec();
    let mut digests = vec![[0u8; 32]; specs.len()];
    let mut alphabet = None;
    let mut symbols = None;
    for (i, ep) in resolved.iter().enumerate() {
        let Some(ep) = ep else { continue };
        let ExpertSpec::External { max_context, .. } = specs[i] else { unreachable!() };
        let mut session = Session::connect(ep)?;
        let d = session.alphabet_size();
        digests[i] = *session.digest();
        match alphabet {
            None => {
                alphabet = Some(d);
                let ids = session.tokenize(input)?;
                if session.detokenize(&ids)? != input {
                    return Err(CodecError::Tokenizer);
                }
                symbols = Some(ids);
            }
            Some(a) if a != d => {
                return Err(CodecError::Alphabet(format!("external experts declare alphabets {a} and {d}")));
            }
            Some(_) => {}
        }
        // Record the effective context limit so decoding truncates identically.
        let limit = ExternalExpert::new(session, max_context).context_limit();
        specs[i] = ExpertSpec::External {
            endpoint: None,
            max_context: limit,
        };
    }
    let alphabet_size = alphabet.unwrap_or(BYTE_ALPHABET);
    let symbols = symbols.unwrap_or_else(|| input.iter().map(|&b| b as Symbol).collect());
    let set = ExpertSet {
        specs: specs.clone(),
        endpoints: resolved,
        alphabet_size,
    };
    Ok(Prepared {
        symbols,
        specs,
        digests,
        set,
    })
}

pub fn compress(input: &[u8], specs: &[ExpertSpec], options: &CompressOptions) -> Result<(Vec<u8>, CodecStats), CodecError> {
    let started = Instant::now();
    if options.chunk_size == 0 || options.chunk_size > u32::MAX as usize {
        return Err(CodecError::Config("chunk size must be in 1..=2^32-1".into()));
    }
    let prep = prepare(input, specs, &options.endpoints)?;
    let k = prep.specs.len();
    let d = prep.set.alphabet_size;
    let chunks: Vec<&[Symbol]> = prep.symbols.chunks(options.chunk_size).collect();
    let pool = thread_pool(options.threads)?;

    let fit_on = |indices: &[&[Symbol]]| -> Result<FitReport, CodecError> {
        let mut experts = prep.set.build()?;
        let sample = CalibrationSample::from_chunks(indices, &mut experts)?;
        Ok(fit_weights(&sample, &options.fit)?)
    };

    let mut fit_report = None;
    let mut chunk_weights: Option<Vec<WeightVector>> = None;
    let weights = match &options.weights {
        WeightMode::Fixed(w) => {
            if w.len() != k {
                return Err(CodecError::Config(format!("{} fixed weights for {k} experts", w.len())));
            }
            w.clone()
        }
        _ if k == 1 => WeightVector::one_hot(1, 0),
        WeightMode::Fit { calibration } => {
            let cal: Vec<&[Symbol]> = calibration.iter().filter_map(|&i| chunks.get(i).copied()).collect();
            if cal.iter().all(|c| c.is_empty()) {
                WeightVector::one_hot(k, 0)
            } else {
                let report = pool.install(|| fit_on(&cal))?;
                let w = report.weights.clone();
                fit_report = Some(report);
                w
            }
        }
        WeightMode::PerChunk => {
            let per: Vec<WeightVector> = pool.install(|| {
                chunks
                    .par_iter()
                    .map(|c| fit_on(std::slice::from_ref(c)).map(|r| r.weights))
                    .collect::<Result<_, _>>()
            })?;
            chunk_weights = Some(per);
            WeightVector::one_hot(k, 0)
        }
    };

    let encoded: Vec<(EncodedStream, f64)> = pool.install(|| {
        chunks
            .par_iter()
            .enumerate()
            .map_init(
                || prep.set.build().map_err(Some),
                |experts, (i, chunk)| {
                    let experts = worker_experts(experts)?;
                    let w = chunk_weights.as_ref().map_or(&weights, |cw| &cw[i]);
                    encode_chunk(chunk, experts, w, d)
                },
            )
            .collect::<Result<_, _>>()
    })?;

    let mut table = Vec::with_capacity(encoded.len());
    for (i, (stream, _)) in encoded.iter().enumerate() {
        let payload_bytes = u32::try_from(stream.bytes.len())
            .map_err(|_| CodecError::Config("chunk payload exceeds 4 GiB".into()))?;
        table.push(ChunkEntry {
            payload_bytes,
            weights: chunk_weights.as_ref().map(|cw| cw[i].clone()),
        });
    }
    let header = Header {
        version: if chunk_weights.is_some() {
            VERSION_CHUNK_WEIGHTS
        } else {
            VERSION_FILE_WEIGHTS
        },
        alphabet_size: d as u32,
        original_length: prep.symbols.len() as u64,
        chunk_size: options.chunk_size as u32,
        specs: prep.specs.clone(),
        weights: weights.clone(),
        digests: prep.digests.clone(),
        chunks: table,
    };
    let mut out = header.to_bytes();
    let header_bytes = out.len() as u64;
    for (stream, _) in &encoded {
        out.extend_from_slice(&stream.bytes);
    }
    let stats = CodecStats {
        input_bytes: input.len() as u64,
        symbols: prep.symbols.len() as u64,
        output_bytes: out.len() as u64,
        header_bytes,
        payload_bytes: out.len() as u64 - header_bytes,
        chunk_bits: encoded.iter().map(|(s, _)| s.bits).collect(),
        chunk_ideal_bits: encoded.iter().map(|(_, b)| *b).collect(),
        weights,
        chunk_weights,
        fit: fit_report,
        wall_time: started.elapsed(),
    };
    Ok((out, stats))
}

/// Decompresses a container built only from built-in experts, on all cores.
pub fn decompress(container: &[u8]) -> Result<Vec<u8>, CodecError> {
    decompress_with(container, &DecompressOptions::default())
}

pub fn decompress_with(container: &[u8], options: &DecompressOptions) -> Result<Vec<u8>, CodecError> {
    let (header, header_len) = Header::parse(container)?;
    let payload = &container[header_len..];
    let total: u64 = header.chunks.iter().map(|c| c.payload_bytes as u64).sum();
    if (payload.len() as u64) < total {
        return Err(CodecError::Truncated(format!(
            "{} payload bytes present, {total} expected",
            payload.len()
        )));
    }
    if payload.len() as u64 > total {
        return Err(CodecError::Format("trailing bytes after the last chunk".into()));
    }

    let resolved = resolve_endpoints(&header.specs, &options.endpoints)?;
    let d = header.alphabet_size as usize;
    let mut tokenizer = None;
    for (i, ep) in resolved.iter().enumerate() {
        let Some(ep) = ep else { continue };
        let session = Session::connect(ep)?;
        if session.digest() != &header.digests[i] {
            return Err(CodecError::ModelDigest { expert: i });
        }
        if session.alphabet_size() != d {
            return Err(CodecError::Alphabet(format!(
                "server declares {} symbols, container uses {d}",
                session.alphabet_size()
            )));
        }
        tokenizer.get_or_insert(session);
    }
    if tokenizer.is_none() && d != BYTE_ALPHABET {
        return Err(CodecError::Alphabet(format!("built-in experts code bytes, container uses {d} symbols")));
    }

    let set = ExpertSet {
        specs: header.specs.clone(),
        endpoints: resolved,
        alphabet_size: d,
    };
    let mut offsets = Vec::with_capacity(header.chunks.len());
    let mut at = 0usize;
    for c in &header.chunks {
        offsets.push(at);
        at += c.payload_bytes as usize;
    }
    let pool = thread_pool(options.threads)?;
    let decoded: Vec<Vec<Symbol>> = pool.install(|| {
        (0..header.chunks.len())
            .into_par_iter()
            .map_init(
                || set.build().map_err(Some),
                |experts, i| {
                    let experts = worker_experts(experts)?;
                    let bytes = &payload[offsets[i]..offsets[i] + header.chunks[i].payload_bytes as usize];
                    decode_chunk(bytes, header.chunk_len(i), experts, header.weights_for(i), d)
                },
            )
            .collect::<Result<_, _>>()
    })?;

    let symbols: Vec<Symbol> = decoded.into_iter().flatten().collect();
    match tokenizer {
        Some(mut session) => Ok(session.detokenize(&symbols)?),
        None => Ok(symbols
            .into_iter()
            .map(|s| u8::try_from(s).map_err(|_| CodecError::Format(format!("symbol {s} is not a byte"))))
            .collect::<Result<_, _>>()?),
    }
}
