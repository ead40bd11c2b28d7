//! Weighted product of experts in the log domain.
//!
//! For weights `w` on the simplex the mixture is
//! `log pi(a) = sum_k w_k log p_k(a) - log Z` with
//! `Z = sum_a prod_k p_k(a)^{w_k}`. `Z <= 1` always (weighted AM-GM followed by
//! summing over the alphabet), with equality exactly when all experts agree or the
//! weights are one-hot.

use thiserror::Error;

use crate::experts::SymbolDistribution;
use crate::memo::Memo;

/// Largest tolerated deviation of the weight sum from one.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// Entries outside `[0, 1]` by at most this much are treated as optimizer
/// round-off: clamped, then the vector is renormalized.
pub const CLAMP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixError {
    #[error("need at least one expert")]
    Empty,

    #[error("{experts} distributions but {weights} weights")]
    CountMismatch { experts: usize, weights: usize },

    #[error("expert {index} has alphabet {actual}, expected {expected}")]
    AlphabetMismatch { index: usize, expected: usize, actual: usize },

    #[error("weight {index} = {value} is not in [0, 1]")]
    OutOfRange { index: usize, value: f64 },

    #[error("weights sum to {0}")]
    BadSum(f64),

    #[error("more than 255 weights")]
    TooMany,

    #[error("weight vector truncated")]
    Truncated,
}

/// A point on the probability simplex, one weight per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self, MixError> {
        if weights.is_empty() {
            return Err(MixError::Empty);
        }
        if weights.len() > u8::MAX as usize {
            return Err(MixError::TooMany);
        }
        let mut clamped = false;
        let mut w = weights;
        for (index, v) in w.iter_mut().enumerate() {
            if !v.is_finite() || *v < -CLAMP_TOLERANCE || *v > 1.0 + CLAMP_TOLERANCE {
                return Err(MixError::OutOfRange { index, value: *v });
            }
            if *v < 0.0 || *v > 1.0 {
                *v = v.clamp(0.0, 1.0);
                clamped = true;
            }
        }
        let sum: f64 = w.iter().sum();
        if clamped || ((sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE && (sum - 1.0).abs() <= CLAMP_TOLERANCE) {
            if sum <= 0.0 {
                return Err(MixError::BadSum(sum));
            }
            for v in w.iter_mut() {
                *v = (*v / sum).min(1.0);
            }
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(MixError::BadSum(sum));
        }
        Ok(Self(w))
    }

    /// Normalizes arbitrary non-negative scores onto the simplex.
    pub fn from_unnormalized(scores: &[f64]) -> Result<Self, MixError> {
        let sum: f64 = scores.iter().sum();
        if !(sum.is_finite() && sum > 0.0) || scores.iter().any(|&s| s < 0.0) {
            return Err(MixError::BadSum(sum));
        }
        Self::new(scores.iter().map(|s| s / sum).collect())
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0 && k <= u8::MAX as usize);
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        assert!(index < k && k <= u8::MAX as usize);
        let mut w = vec![0.0; k];
        w[index] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the weight equal to exactly 1, if the vector is a vertex.
    pub fn vertex(&self) -> Option<usize> {
        let i = self.0.iter().position(|&w| w == 1.0)?;
        self.0.iter().enumerate().all(|(j, &w)| j == i || w == 0.0).then_some(i)
    }

    /// `K` as one byte, then each weight as raw little-endian binary64 bits.
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.push(self.0.len() as u8);
        for w in &self.0 {
            out.extend_from_slice(&w.to_bits().to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + 8 * self.0.len());
        self.write_bytes(&mut out);
        out
    }

    /// Reads a vector written by [`WeightVector::write_bytes`], advancing `buf`.
    pub fn read_bytes(buf: &mut &[u8]) -> Result<Self, MixError> {
        let (&k, rest) = buf.split_first().ok_or(MixError::Truncated)?;
        let k = k as usize;
        if rest.len() < 8 * k {
            return Err(MixError::Truncated);
        }
        let w = rest[..8 * k]
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        *buf = &rest[8 * k..];
        Self::exact(w)
    }

    /// Validates without clamping so decoded bits are used verbatim.
    fn exact(w: Vec<f64>) -> Result<Self, MixError> {
        if w.is_empty() {
            return Err(MixError::Empty);
        }
        for (index, &value) in w.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(MixError::OutOfRange { index, value });
            }
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(MixError::BadSum(sum));
        }
        Ok(Self(w))
    }
}

fn check<'a>(rows: &[&'a [f64]], w: &WeightVector) -> Result<usize, MixError> {
    if rows.is_empty() {
        return Err(MixError::Empty);
    }
    if rows.len() != w.len() {
        return Err(MixError::CountMismatch {
            experts: rows.len(),
            weights: w.len(),
        });
    }
    let d = rows[0].len();
    for (index, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(MixError::AlphabetMismatch {
                index,
                expected: d,
                actual: r.len(),
            });
        }
    }
    Ok(d)
}

/// Unnormalized mixed log-probabilities `sum_k w_k log p_k(a)`; zero-weight experts
/// are skipped so their rows may hold anything.
fn weighted_sum(rows: &[&[f64]], w: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (row, &wk) in rows.iter().zip(w) {
        if wk == 0.0 {
            continue;
        }
        for (o, &l) in out.iter_mut().zip(row.iter()) {
            *o += wk * l;
        }
    }
}

/// Replaces each `x` with `exp(x - shift)` and returns the sum. Rows are mostly runs
/// of one repeated value (symbols no expert has seen), so the last result is reused.
pub(crate) fn exp_shifted(x: &mut [f64], shift: f64) -> f64 {
    let mut last_in = f64::NAN;
    let mut last_out = 0.0;
    let mut sum = 0.0;
    for v in x.iter_mut() {
        if v.to_bits() != last_in.to_bits() {
            last_in = *v;
            last_out = libm::exp(*v - shift);
        }
        *v = last_out;
        sum += last_out;
    }
    sum
}

/// Log-sum-exp with the maximum shifted out; returns `(max, ln sum exp(x - max))`.
fn log_sum_exp(x: &[f64]) -> (f64, f64) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|&v| libm::exp(v - max)).sum();
    (max, libm::log(s))
}

/// Mixes log-probability rows into normalized log-probabilities.
///
/// A vertex weight vector returns that expert's row verbatim.
pub fn combine_log_rows(rows: &[&[f64]], w: &WeightVector, out: &mut Vec<f64>) -> Result<(), MixError> {
    let d = check(rows, w)?;
    out.resize(d, 0.0);
    if let Some(k) = w.vertex() {
        out.copy_from_slice(rows[k]);
        return Ok(());
    }
    weighted_sum(rows, w.as_slice(), out);
    let (max, lse) = log_sum_exp(out);
    let shift = max + lse;
    for o in out.iter_mut() {
        *o -= shift;
    }
    Ok(())
}

/// Mixes log-probability rows straight into a probability vector, the form the
/// quantizer consumes. One exponentiation per symbol.
pub fn mix_probabilities(rows: &[&[f64]], w: &WeightVector, out: &mut Vec<f64>) -> Result<(), MixError> {
    let d = check(rows, w)?;
    out.resize(d, 0.0);
    weighted_sum(rows, w.as_slice(), out);
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum = exp_shifted(out, max);
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// [`mix_probabilities`] with the exponentials cached across calls.
pub(crate) fn mix_probabilities_memo(
    rows: &[&[f64]],
    w: &WeightVector,
    out: &mut Vec<f64>,
    exp: &mut Memo,
) -> Result<(), MixError> {
    let d = check(rows, w)?;
    out.resize(d, 0.0);
    weighted_sum(rows, w.as_slice(), out);
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut last_in = f64::NAN;
    let mut last_out = 0.0;
    for o in out.iter_mut() {
        if o.to_bits() != last_in.to_bits() {
            last_in = *o;
            last_out = exp.get(*o - max);
        }
        *o = last_out;
        sum += last_out;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

pub fn combine(dists: &[SymbolDistribution], w: &WeightVector) -> Result<SymbolDistribution, MixError> {
    let rows: Vec<&[f64]> = dists.iter().map(|d| d.log_probs()).collect();
    let mut out = Vec::new();
    combine_log_rows(&rows, w, &mut out)?;
    Ok(SymbolDistribution::from_log_probs_unchecked(out))
}

/// `ln Z` for the given rows and weights.
pub fn log_normalizer(rows: &[&[f64]], w: &WeightVector) -> Result<f64, MixError> {
    let d = check(rows, w)?;
    let mut s = vec![0.0; d];
    weighted_sum(rows, w.as_slice(), &mut s);
    let (max, lse) = log_sum_exp(&s);
    Ok(max + lse)
}

pub fn normalizer_z(dists: &[SymbolDistribution], w: &WeightVector) -> Result<f64, MixError> {
    let rows: Vec<&[f64]> = dists.iter().map(|d| d.log_probs()).collect();
    Ok(libm::exp(log_normalizer(&rows, w)?))
}
