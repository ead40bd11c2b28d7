//! Integer cumulative-frequency tables and the real-to-integer bridge.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{CoderError, MAX_SCALE_BITS};

/// Largest tolerated deviation of a probability vector's sum from one.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Cumulative frequency table consumed by the arithmetic coder.
///
/// `cum` has `alphabet_size + 1` entries, starts at zero, ends at
/// `2^scale_bits`, and every symbol owns at least one unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u64>,
    scale_bits: u32,
}

impl QuantizedCdf {
    /// Builds a table from per-symbol frequencies that already sum to `2^scale_bits`.
    pub fn from_frequencies(freqs: &[u64], scale_bits: u32) -> Result<Self, CoderError> {
        if scale_bits > MAX_SCALE_BITS {
            return Err(CoderError::ScaleTooLarge(scale_bits));
        }
        if freqs.is_empty() {
            return Err(CoderError::EmptyAlphabet);
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for (symbol, &f) in freqs.iter().enumerate() {
            if f == 0 {
                return Err(CoderError::ZeroFrequency { symbol });
            }
            acc = acc.checked_add(f).ok_or(CoderError::BadTotal {
                expected: 1 << scale_bits,
                actual: u64::MAX,
            })?;
            cum.push(acc);
        }
        if acc != 1u64 << scale_bits {
            return Err(CoderError::BadTotal {
                expected: 1 << scale_bits,
                actual: acc,
            });
        }
        Ok(Self { cum, scale_bits })
    }

    /// Caller guarantees non-zero entries summing to `2^scale_bits`.
    fn from_valid_frequencies(freqs: &[u64], scale_bits: u32) -> Self {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in freqs {
            debug_assert!(f > 0);
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, 1u64 << scale_bits);
        Self { cum, scale_bits }
    }

    pub fn alphabet_size(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn total(&self) -> u64 {
        1u64 << self.scale_bits
    }

    /// Cumulative counts, `alphabet_size + 1` entries.
    pub fn cumulative(&self) -> &[u64] {
        &self.cum
    }

    pub fn frequency(&self, symbol: usize) -> u64 {
        self.cum[symbol + 1] - self.cum[symbol]
    }

    pub fn frequencies(&self) -> Vec<u64> {
        self.cum.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Probability the table assigns to each symbol, `freq / 2^scale_bits`.
    pub fn implied_distribution(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.frequencies().into_iter().map(|f| f as f64 / total).collect()
    }

    /// Code length of `symbol` under this table, in bits.
    pub fn code_length_bits(&self, symbol: usize) -> f64 {
        self.scale_bits as f64 - (self.frequency(symbol) as f64).log2()
    }
}

/// Reusable quantizer; keeps scratch buffers so the per-symbol path does not allocate
/// beyond the output table.
#[derive(Debug, Default)]
pub struct Quantizer {
    freqs: Vec<u64>,
    /// `!remainder_bits` per symbol: ascending order is largest remainder first.
    /// Bit patterns of non-negative floats order like the floats.
    keys: Vec<u64>,
    /// Copy of `keys` reordered by the selection.
    scratch: Vec<u64>,
}

impl Quantizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Largest-remainder quantization of a probability vector to `2^scale_bits` units.
    ///
    /// Leftover units go to the largest fractional parts, lowest symbol index first on
    /// ties. Symbols that round to zero then take one unit each from the current largest
    /// frequency (again lowest index on ties).
    pub fn quantize(&mut self, probs: &[f64], scale_bits: u32) -> Result<QuantizedCdf, CoderError> {
        let d = probs.len();
        if d == 0 {
            return Err(CoderError::EmptyAlphabet);
        }
        if scale_bits > MAX_SCALE_BITS {
            return Err(CoderError::ScaleTooLarge(scale_bits));
        }
        let total = 1u64 << scale_bits;
        if d as u64 > total {
            return Err(CoderError::Precision {
                alphabet_size: d,
                scale_bits,
            });
        }
        let mut sum = 0.0;
        for &p in probs {
            if !(p >= 0.0 && p <= f64::MAX) {
                return Err(CoderError::InvalidDistribution(format!("entry {p} is not a probability")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(CoderError::InvalidDistribution(format!("probabilities sum to {sum}")));
        }

        let scale = total as f64 / sum;
        self.freqs.resize(d, 0);
        self.keys.resize(d, 0);
        let mut assigned = 0u64;
        for ((&p, f), k) in probs.iter().zip(self.freqs.iter_mut()).zip(self.keys.iter_mut()) {
            let x = p * scale;
            // Truncation is floor for non-negative values; x <= 2^62 fits in i64.
            *f = x as i64 as u64;
            *k = !(x - *f as f64).to_bits();
            assigned += *f;
        }

        match assigned.cmp(&total) {
            Ordering::Less => {
                let deficit = (total - assigned) as usize;
                if deficit < d {
                    self.award_largest_remainders(deficit);
                } else {
                    // Only reachable through float round-off on huge alphabets.
                    let mut left = deficit;
                    while left > 0 {
                        for f in self.freqs.iter_mut() {
                            if left == 0 {
                                break;
                            }
                            *f += 1;
                            left -= 1;
                        }
                    }
                }
            }
            Ordering::Greater => {
                let mut excess = assigned - total;
                while excess > 0 {
                    let i = argmax_lowest(&self.freqs);
                    self.freqs[i] -= 1;
                    excess -= 1;
                }
            }
            Ordering::Equal => {}
        }

        raise_zero_frequencies(&mut self.freqs);
        Ok(QuantizedCdf::from_valid_frequencies(&self.freqs, scale_bits))
    }

    /// One extra unit for each of the `n` largest remainders, lowest index first
    /// among equal remainders. Selects the cut value, then awards in index order.
    fn award_largest_remainders(&mut self, n: usize) {
        self.scratch.clear();
        self.scratch.extend_from_slice(&self.keys);
        let (_, &mut cut, _) = self.scratch.select_nth_unstable(n - 1);
        let above = self.scratch[..n].iter().filter(|&&k| k < cut).count();
        let mut ties = n - above;
        for (f, &k) in self.freqs.iter_mut().zip(&self.keys) {
            if k < cut {
                *f += 1;
            } else if k == cut && ties > 0 {
                *f += 1;
                ties -= 1;
            }
        }
    }

    /// Quantizes a distribution given as natural-log probabilities.
    pub fn quantize_log(&mut self, log_probs: &[f64], scale_bits: u32) -> Result<QuantizedCdf, CoderError> {
        let probs: Vec<f64> = log_probs.iter().map(|&l| libm::exp(l)).collect();
        self.quantize(&probs, scale_bits)
    }
}

/// One-shot form of [`Quantizer::quantize`].
pub fn quantize_distribution(probs: &[f64], scale_bits: u32) -> Result<QuantizedCdf, CoderError> {
    Quantizer::new().quantize(probs, scale_bits)
}

fn argmax_lowest(freqs: &[u64]) -> usize {
    let mut best = 0;
    for (i, &f) in freqs.iter().enumerate() {
        if f > freqs[best] {
            best = i;
        }
    }
    best
}

#[derive(PartialEq, Eq)]
struct Donor {
    freq: u64,
    index: usize,
}

impl Ord for Donor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.freq.cmp(&other.freq).then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for Donor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn raise_zero_frequencies(freqs: &mut [u64]) {
    let zeros = freqs.iter().filter(|&&f| f == 0).count();
    if zeros == 0 {
        return;
    }
    // When the largest frequency stays strictly ahead of the runner-up after every
    // donation, it is the donor each time.
    let top = argmax_lowest(freqs);
    let runner_up = freqs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &f)| f)
        .max()
        .unwrap_or(0);
    let zeros = zeros as u64;
    if freqs[top] >= zeros && freqs[top] - zeros + 1 > runner_up {
        for f in freqs.iter_mut() {
            if *f == 0 {
                *f = 1;
            }
        }
        freqs[top] -= zeros;
        return;
    }
    let mut heap: BinaryHeap<Donor> = freqs
        .iter()
        .enumerate()
        .filter(|(_, &f)| f > 0)
        .map(|(index, &freq)| Donor { freq, index })
        .collect();
    for z in 0..freqs.len() {
        if freqs[z] != 0 {
            continue;
        }
        let mut donor = heap.pop().expect("total >= alphabet size leaves a donor");
        donor.freq -= 1;
        freqs[donor.index] = donor.freq;
        freqs[z] = 1;
        if donor.freq > 1 {
            heap.push(donor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_four_symbols() {
        let cdf = quantize_distribution(&[0.25; 4], 16).unwrap();
        assert_eq!(cdf.frequencies(), vec![16384; 4]);
        assert_eq!(cdf.cumulative(), &[0, 16384, 32768, 49152, 65536]);
    }

    #[test]
    fn zero_probability_gets_one_unit() {
        let cdf = quantize_distribution(&[1.0, 0.0], 16).unwrap();
        assert_eq!(cdf.frequencies(), vec![65535, 1]);
    }

    #[test]
    fn seventy_thirty_split() {
        let cdf = quantize_distribution(&[0.7, 0.3], 16).unwrap();
        let f = cdf.frequencies();
        assert_eq!(f.iter().sum::<u64>(), 65536);
        assert!((f[0] as f64 / 65536.0 - 0.7).abs() <= 1.0 / 32768.0);
        // 45875.2 and 19660.8: the spare unit goes to the larger remainder.
        assert_eq!(f, vec![45875, 19661]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // Three equal remainders and one spare unit.
        let cdf = quantize_distribution(&[1.0 / 3.0; 3], 2).unwrap();
        assert_eq!(cdf.frequencies(), vec![2, 1, 1]);
    }

    #[test]
    fn tied_remainders_inside_one_bucket() {
        // 65.536 units each: 536 spare units go to indices 0..536.
        let cdf = quantize_distribution(&[1.0 / 1000.0; 1000], 16).unwrap();
        let f = cdf.frequencies();
        assert!(f[..536].iter().all(|&x| x == 66));
        assert!(f[536..].iter().all(|&x| x == 65));
    }

    #[test]
    fn many_zeros_steal_from_largest() {
        let mut probs = vec![0.0; 8];
        probs[3] = 0.75;
        probs[6] = 0.25;
        let cdf = quantize_distribution(&probs, 4).unwrap();
        // 12 and 4 units; six zeros take from the current largest each time.
        assert_eq!(cdf.frequencies(), vec![1, 1, 1, 6, 1, 1, 4, 1]);
    }

    #[test]
    fn precision_error_when_alphabet_exceeds_total() {
        let probs = vec![1.0 / 300.0; 300];
        assert!(matches!(
            quantize_distribution(&probs, 8),
            Err(CoderError::Precision { alphabet_size: 300, scale_bits: 8 })
        ));
        assert!(quantize_distribution(&probs, 9).is_ok());
    }

    #[test]
    fn rejects_unnormalized_input() {
        assert!(matches!(
            quantize_distribution(&[0.5, 0.6], 16),
            Err(CoderError::InvalidDistribution(_))
        ));
        assert!(matches!(
            quantize_distribution(&[f64::NAN, 1.0], 16),
            Err(CoderError::InvalidDistribution(_))
        ));
    }

    #[test]
    fn quantizing_implied_distribution_is_identity() {
        let cdf = quantize_distribution(&[0.123, 0.5, 0.001, 0.376], 16).unwrap();
        let again = quantize_distribution(&cdf.implied_distribution(), 16).unwrap();
        assert_eq!(cdf, again);
    }

    #[test]
    fn from_frequencies_validates() {
        assert!(QuantizedCdf::from_frequencies(&[3, 1], 2).is_ok());
        assert!(QuantizedCdf::from_frequencies(&[4, 0], 2).is_err());
        assert!(QuantizedCdf::from_frequencies(&[2, 1], 2).is_err());
        assert!(QuantizedCdf::from_frequencies(&[1, 1], 63).is_err());
    }
}
