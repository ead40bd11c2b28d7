use super::ExpertError;

/// Largest tolerated deviation of a distribution's probability mass from one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Next-symbol distribution stored as natural-log probabilities.
///
/// Every entry is finite (no zero-probability symbols) and the probabilities sum to
/// one within [`NORMALIZATION_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolDistribution {
    log_probs: Vec<f64>,
}

impl SymbolDistribution {
    pub fn uniform(alphabet_size: usize) -> Self {
        let lp = -libm::log(alphabet_size as f64);
        Self {
            log_probs: vec![lp; alphabet_size],
        }
    }

    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self, ExpertError> {
        if log_probs.is_empty() {
            return Err(ExpertError::InvalidDistribution("empty alphabet".into()));
        }
        if let Some(bad) = log_probs.iter().find(|l| !l.is_finite()) {
            return Err(ExpertError::InvalidDistribution(format!("non-finite log-probability {bad}")));
        }
        let mass: f64 = log_probs.iter().map(|&l| l.exp()).sum();
        if (mass - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(ExpertError::InvalidDistribution(format!("probability mass {mass}")));
        }
        Ok(Self { log_probs })
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self, ExpertError> {
        Self::from_log_probs(probs.iter().map(|&p| libm::log(p)).collect())
    }

    /// Wraps log-probabilities that the caller guarantees are normalized.
    pub(crate) fn from_log_probs_unchecked(log_probs: Vec<f64>) -> Self {
        debug_assert!(!log_probs.is_empty());
        Self { log_probs }
    }

    pub fn alphabet_size(&self) -> usize {
        self.log_probs.len()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_prob(&self, symbol: usize) -> f64 {
        self.log_probs[symbol]
    }

    pub fn prob(&self, symbol: usize) -> f64 {
        libm::exp(self.log_probs[symbol])
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|&l| libm::exp(l)).collect()
    }

    pub fn into_log_probs(self) -> Vec<f64> {
        self.log_probs
    }
}
