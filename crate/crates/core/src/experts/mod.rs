//! Expert contract and the built-in experts.
//!
//! An expert sees one chunk at a time. After [`Expert::begin_chunk`] it alternates
//! [`Expert::predict`] and [`Expert::observe`]; both receive the chunk's symbols so far.
//! Built-in experts are pure functions of what they have observed, so the encoder
//! and decoder replay identical state trajectories.

mod context;
mod distribution;
mod naive_bayes;
mod spec;

pub use context::ContextModel;
pub use distribution::{SymbolDistribution, NORMALIZATION_TOLERANCE};
pub use naive_bayes::NaiveBayes;
pub use spec::{ExpertKind, ExpertSpec, SpecParseError, DEFAULT_CTX_ALPHA, DEFAULT_NB_ALPHA, MAX_CONTEXT_ORDER, MIN_ALPHA};

use thiserror::Error;

use crate::external::ProtocolError;
use crate::Symbol;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("symbol {symbol} out of range for alphabet of {alphabet_size}")]
    SymbolOutOfRange { symbol: Symbol, alphabet_size: usize },

    #[error("expert kind {0} cannot be built without an external session")]
    NeedsSession(ExpertKind),

    #[error("invalid expert configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// A sequential next-symbol predictor.
pub trait Expert: Send {
    fn alphabet_size(&self) -> usize;

    /// Clears all state accumulated since the previous chunk.
    fn begin_chunk(&mut self) -> Result<(), ExpertError>;

    /// Writes natural-log probabilities of the next symbol into `out`
    /// (`out.len() == alphabet_size`). `context` holds the chunk's symbols so far.
    fn predict_into(&mut self, context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError>;

    /// Same prediction as plain probabilities. Implementations that hold the
    /// probabilities directly override this to skip the log/exp round trip.
    fn predict_probs_into(&mut self, context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        self.predict_into(context, out)?;
        for v in out.iter_mut() {
            *v = libm::exp(*v);
        }
        Ok(())
    }

    /// Records `symbol` as the symbol following `context`.
    fn observe(&mut self, symbol: Symbol, context: &[Symbol]) -> Result<(), ExpertError>;

    fn predict(&mut self, context: &[Symbol]) -> Result<SymbolDistribution, ExpertError> {
        let mut out = vec![0.0; self.alphabet_size()];
        self.predict_into(context, &mut out)?;
        SymbolDistribution::from_log_probs(out)
    }
}

impl<E: Expert + ?Sized> Expert for Box<E> {
    fn alphabet_size(&self) -> usize {
        (**self).alphabet_size()
    }
    fn begin_chunk(&mut self) -> Result<(), ExpertError> {
        (**self).begin_chunk()
    }
    fn predict_into(&mut self, context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        (**self).predict_into(context, out)
    }
    fn predict_probs_into(&mut self, context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        (**self).predict_probs_into(context, out)
    }
    fn observe(&mut self, symbol: Symbol, context: &[Symbol]) -> Result<(), ExpertError> {
        (**self).observe(symbol, context)
    }
}

/// Predicts every symbol uniformly.
#[derive(Debug, Clone)]
pub struct Uniform {
    alphabet_size: usize,
    log_prob: f64,
}

impl Uniform {
    pub fn new(alphabet_size: usize) -> Self {
        Self {
            alphabet_size,
            log_prob: -libm::log(alphabet_size as f64),
        }
    }
}

impl Expert for Uniform {
    fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    fn begin_chunk(&mut self) -> Result<(), ExpertError> {
        Ok(())
    }

    fn predict_into(&mut self, _context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        out.fill(self.log_prob);
        Ok(())
    }

    fn predict_probs_into(&mut self, _context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        out.fill(1.0 / self.alphabet_size as f64);
        Ok(())
    }

    fn observe(&mut self, symbol: Symbol, _context: &[Symbol]) -> Result<(), ExpertError> {
        check_symbol(symbol, self.alphabet_size)
    }
}

pub(crate) fn check_symbol(symbol: Symbol, alphabet_size: usize) -> Result<(), ExpertError> {
    if (symbol as usize) < alphabet_size {
        Ok(())
    } else {
        Err(ExpertError::SymbolOutOfRange { symbol, alphabet_size })
    }
}

/// Builds a built-in expert. External specs need a live session and are built by
/// [`crate::external::ExternalExpert`] instead.
pub fn build_builtin(spec: &ExpertSpec, alphabet_size: usize) -> Result<Box<dyn Expert>, ExpertError> {
    if alphabet_size == 0 {
        return Err(ExpertError::Config("empty alphabet".into()));
    }
    Ok(match *spec {
        ExpertSpec::Uniform => Box::new(Uniform::new(alphabet_size)),
        ExpertSpec::NaiveBayes { alpha, window } => Box::new(NaiveBayes::new(alphabet_size, alpha, window)?),
        ExpertSpec::Context { order, alpha } => Box::new(ContextModel::new(alphabet_size, order, alpha)?),
        ExpertSpec::External { .. } => return Err(ExpertError::NeedsSession(ExpertKind::External)),
    })
}

/// Lidstone log-probabilities `ln(c + alpha) - ln(n + alpha * D)` for a dense count
/// vector. Shared by the count-based experts so their degenerate cases agree bit for bit.
pub(crate) struct LidstoneTable {
    alpha: f64,
    alphabet_size: usize,
    ln_count: Vec<f64>,
}

impl LidstoneTable {
    pub(crate) fn new(alpha: f64, alphabet_size: usize) -> Self {
        let mut t = Self {
            alpha,
            alphabet_size,
            ln_count: Vec::new(),
        };
        t.reserve(64);
        t
    }

    fn reserve(&mut self, count: usize) {
        while self.ln_count.len() <= count {
            let c = self.ln_count.len() as f64;
            self.ln_count.push(libm::log(c + self.alpha));
        }
    }

    #[inline]
    pub(crate) fn ln_numerator(&mut self, count: u32) -> f64 {
        let c = count as usize;
        if c >= self.ln_count.len() {
            self.reserve(c.max(self.ln_count.len() * 2));
        }
        self.ln_count[c]
    }

    #[inline]
    pub(crate) fn ln_denominator(&self, total: u64) -> f64 {
        libm::log(total as f64 + self.alpha * self.alphabet_size as f64)
    }

    pub(crate) fn fill(&mut self, counts: &[u32], total: u64, out: &mut [f64]) {
        let ln_den = self.ln_denominator(total);
        if let Some(&max) = counts.iter().max() {
            self.ln_numerator(max);
        }
        for (o, &c) in out.iter_mut().zip(counts) {
            *o = self.ln_count[c as usize] - ln_den;
        }
    }

    pub(crate) fn fill_probs(&self, counts: &[u32], total: u64, out: &mut [f64]) {
        let den = total as f64 + self.alpha * self.alphabet_size as f64;
        for (o, &c) in out.iter_mut().zip(counts) {
            *o = (c as f64 + self.alpha) / den;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_expert() {
        let mut u = Uniform::new(4);
        let d = u.predict(&[]).unwrap();
        for p in d.probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!(u.observe(4, &[]).is_err());
    }

    #[test]
    fn builtin_factory() {
        for text in ["nb", "nb:alpha=0.5,window=2048", "ctx:order=2", "uniform"] {
            let spec: ExpertSpec = text.parse().unwrap();
            let mut e = build_builtin(&spec, 256).unwrap();
            e.begin_chunk().unwrap();
            assert_eq!(e.predict(&[]).unwrap().alphabet_size(), 256);
        }
        let ext: ExpertSpec = "ext".parse().unwrap();
        assert!(matches!(build_builtin(&ext, 256), Err(ExpertError::NeedsSession(_))));
    }
}
