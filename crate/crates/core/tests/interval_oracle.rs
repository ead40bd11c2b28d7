//! Exact rational model of the coding interval, checked against the integer coder.
//!
//! The oracle tracks the coder's interval in absolute `[0, 1)` coordinates with
//! arbitrary-precision rationals. Renormalization is a zoom window: it never moves
//! the interval, it only halves the unit in which sub-interval floors are taken. The
//! bits the integer coder emits must name a dyadic interval inside the oracle's final
//! interval. For dyadic toy models the floors are exact, so the oracle interval must
//! also equal the ideal one from the sub-interval product formula.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use proptest::prelude::*;
use wpoe::coder::{Decoder, EncodedStream, Encoder, QuantizedCdf, Quantizer};

fn pow2(k: i64) -> BigRational {
    let p = BigRational::from_integer(BigInt::one() << k.unsigned_abs());
    if k >= 0 {
        p
    } else {
        p.recip()
    }
}

fn int(x: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(x))
}

struct IntervalOracle {
    low: BigRational,
    high: BigRational,
    window: BigRational,
    unit: BigRational,
}

impl IntervalOracle {
    fn new() -> Self {
        Self {
            low: BigRational::zero(),
            high: BigRational::one(),
            window: BigRational::zero(),
            unit: pow2(-64),
        }
    }

    fn step(&mut self, cdf: &QuantizedCdf, symbol: usize) {
        let range = (&self.high - &self.low) / &self.unit;
        assert!(range.is_integer(), "interval width is a whole number of units");
        let total = int(cdf.total());
        let cum = cdf.cumulative();
        let lo = (&range * int(cum[symbol]) / &total).floor();
        let hi = (&range * int(cum[symbol + 1]) / &total).floor();
        let base = self.low.clone();
        self.low = &base + lo * &self.unit;
        self.high = &base + hi * &self.unit;
        loop {
            let quarter = &self.unit * pow2(62);
            let half = &self.window + &quarter * int(2);
            if self.high <= half {
            } else if self.low >= half {
                self.window = half;
            } else if self.low >= &self.window + &quarter && self.high <= &self.window + &quarter * int(3) {
                self.window = &self.window + &quarter;
            } else {
                break;
            }
            self.unit = &self.unit / int(2);
        }
    }
}

/// Ideal interval `[l_n, l_n + prod p_i)` with `p_i = freq / total`.
fn ideal_interval(tables: &[QuantizedCdf], symbols: &[usize]) -> (BigRational, BigRational) {
    let mut low = BigRational::zero();
    let mut width = BigRational::one();
    for (cdf, &s) in tables.iter().zip(symbols) {
        let total = int(cdf.total());
        low += &width * int(cdf.cumulative()[s]) / &total;
        width = width * int(cdf.frequency(s)) / total;
    }
    (low, width)
}

fn code_point(stream: &EncodedStream) -> BigRational {
    let mut v = BigRational::zero();
    for i in 0..stream.bits {
        if (stream.bytes[(i / 8) as usize] >> (7 - i % 8)) & 1 == 1 {
            v += pow2(-(i as i64) - 1);
        }
    }
    v
}

fn encode(tables: &[QuantizedCdf], symbols: &[usize]) -> EncodedStream {
    let mut enc = Encoder::new();
    for (cdf, &s) in tables.iter().zip(symbols) {
        enc.encode(cdf, s).unwrap();
    }
    enc.finish()
}

/// Checks containment, the length bound, and the round trip. Returns the oracle.
fn check(tables: &[QuantizedCdf], symbols: &[usize]) -> IntervalOracle {
    let mut oracle = IntervalOracle::new();
    for (cdf, &s) in tables.iter().zip(symbols) {
        oracle.step(cdf, s);
    }
    let stream = encode(tables, symbols);
    let v = code_point(&stream);
    let end = &v + pow2(-(stream.bits as i64));
    assert!(oracle.low <= v, "code point below the final interval");
    assert!(end <= oracle.high, "code interval leaves the final interval");
    // A width-W interval always holds a dyadic interval of length at least W / 4.
    let width = &oracle.high - &oracle.low;
    assert!(width * pow2(stream.bits as i64 - 2) <= BigRational::one(), "code longer than -log2 W + 2");

    let mut dec = Decoder::new(&stream.bytes);
    for (cdf, &s) in tables.iter().zip(symbols) {
        assert_eq!(dec.decode(cdf).unwrap(), s);
    }
    oracle
}

fn table(freqs: &[u64], scale_bits: u32) -> QuantizedCdf {
    QuantizedCdf::from_frequencies(freqs, scale_bits).unwrap()
}

/// Random composition of `2^scale_bits` into `d >= 1` positive parts.
fn composition(d: usize, scale_bits: u32) -> impl Strategy<Value = Vec<u64>> {
    let total = 1u64 << scale_bits;
    prop::collection::btree_set(1..total, d - 1).prop_map(move |cuts| {
        let mut prev = 0;
        let mut out = Vec::with_capacity(d);
        for c in cuts.into_iter().chain(std::iter::once(total)) {
            out.push(c - prev);
            prev = c;
        }
        out
    })
}

/// Powers of two summing to `2^scale_bits`, by repeated halving.
fn dyadic(scale_bits: u32) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(any::<prop::sample::Index>(), 0..8).prop_map(move |splits| {
        let mut f = vec![1u64 << scale_bits];
        for ix in splits {
            let i = ix.index(f.len());
            if f[i] >= 2 {
                let h = f[i] / 2;
                f[i] = h;
                f.insert(i + 1, h);
            }
        }
        f
    })
}

fn static_model() -> impl Strategy<Value = (Vec<u64>, u32, Vec<usize>)> {
    (2usize..7, 3u32..17)
        .prop_flat_map(|(d, s)| (composition(d, s), Just(s)))
        .prop_flat_map(|(f, s)| {
            let d = f.len();
            (Just(f), Just(s), prop::collection::vec(0..d, 0..48))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn emitted_code_lies_in_the_final_interval((freqs, s, symbols) in static_model()) {
        let cdf = table(&freqs, s);
        let tables = vec![cdf; symbols.len()];
        check(&tables, &symbols);
    }

    #[test]
    fn dyadic_models_match_the_ideal_interval(
        (freqs, s, symbols) in (1u32..17).prop_flat_map(|s| (dyadic(s), Just(s))).prop_flat_map(|(f, s)| {
            let d = f.len();
            (Just(f), Just(s), prop::collection::vec(0..d, 0..48))
        })
    ) {
        let cdf = table(&freqs, s);
        let tables = vec![cdf; symbols.len()];
        let oracle = check(&tables, &symbols);
        let (low, width) = ideal_interval(&tables, &symbols);
        prop_assert_eq!(&oracle.low, &low);
        prop_assert_eq!(&oracle.high - &oracle.low, width);
    }

    #[test]
    fn adaptive_laplace_model(d in 2usize..12, symbols_raw in prop::collection::vec(any::<prop::sample::Index>(), 0..64)) {
        // Counts update after every symbol, so each step codes against a new table.
        let symbols: Vec<usize> = symbols_raw.iter().map(|ix| ix.index(d)).collect();
        let mut counts = vec![1.0f64; d];
        let mut q = Quantizer::new();
        let mut tables = Vec::new();
        for &s in &symbols {
            let n: f64 = counts.iter().sum();
            let probs: Vec<f64> = counts.iter().map(|c| c / n).collect();
            tables.push(q.quantize(&probs, 12).unwrap());
            counts[s] += 1.0;
        }
        check(&tables, &symbols);
    }
}

#[test]
fn uniform_binary_costs_n_to_n_plus_two_bits() {
    let cdf = table(&[1, 1], 1);
    for n in 0..40usize {
        let symbols: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % 2).collect();
        let tables = vec![cdf.clone(); n];
        check(&tables, &symbols);
        let bits = encode(&tables, &symbols).bits;
        assert!(bits >= n as u64 && bits <= n as u64 + 2, "n={n} bits={bits}");
    }
}

#[test]
fn non_dyadic_table_stays_near_the_ideal_interval() {
    let cdf = table(&[20000, 15000, 20536, 10000], 16);
    let symbols = [1, 3, 0, 2];
    let tables = vec![cdf; 4];
    let oracle = check(&tables, &symbols);
    let (low, width) = ideal_interval(&tables, &symbols);
    // Floors move each endpoint by less than one unit of at most 2^-64 per symbol.
    let slack = pow2(-60);
    assert!((&oracle.low - &low).abs() <= slack);
    assert!((&oracle.high - (&low + &width)).abs() <= slack);
}
