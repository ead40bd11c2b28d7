//! 64-bit arithmetic encoder and decoder with pending-bit carry handling.
//!
//! The coder keeps `[low, high]` (inclusive) in 64-bit registers. Each symbol narrows
//! the interval to its sub-range `floor(range * cum / 2^s)`; renormalization shifts out
//! determined leading bits and defers straddling ones as pending bits. After
//! renormalization the width always exceeds 2^62, so any table with `scale_bits <= 62`
//! leaves every symbol a non-empty sub-interval.

use super::bits::{BitReader, BitWriter};
use super::{CoderError, QuantizedCdf, MAX_SCALE_BITS, REGISTER_BITS};

const HALF: u64 = 1 << 63;
const QUARTER: u64 = 1 << 62;
const THREE_QUARTERS: u64 = HALF | QUARTER;

/// A finished bitstream and its exact length in bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedStream {
    pub bytes: Vec<u8>,
    pub bits: u64,
}

#[inline]
fn sub_interval(low: u64, high: u64, cdf: &QuantizedCdf, symbol: usize) -> (u64, u64) {
    let range = (high - low) as u128 + 1;
    let s = cdf.scale_bits();
    let cum = cdf.cumulative();
    let lo = (range * cum[symbol] as u128) >> s;
    let hi = (range * cum[symbol + 1] as u128) >> s;
    (low + lo as u64, low + (hi - 1) as u64)
}

fn check_scale(cdf: &QuantizedCdf) -> Result<(), CoderError> {
    if cdf.scale_bits() > MAX_SCALE_BITS {
        Err(CoderError::ScaleTooLarge(cdf.scale_bits()))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    low: u64,
    high: u64,
    pending: u64,
    sink: BitWriter,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            high: u64::MAX,
            pending: 0,
            sink: BitWriter::new(),
        }
    }

    #[inline]
    fn emit(&mut self, bit: bool) {
        self.sink.push(bit);
        let pending = std::mem::take(&mut self.pending);
        self.sink.push_repeated(!bit, pending);
    }

    pub fn encode(&mut self, cdf: &QuantizedCdf, symbol: usize) -> Result<(), CoderError> {
        if symbol >= cdf.alphabet_size() {
            return Err(CoderError::SymbolOutOfRange {
                symbol,
                alphabet_size: cdf.alphabet_size(),
            });
        }
        check_scale(cdf)?;
        let (low, high) = sub_interval(self.low, self.high, cdf, symbol);
        self.low = low;
        self.high = high;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
        Ok(())
    }

    /// Bits already committed to the sink, excluding pending ones.
    pub fn bits_written(&self) -> u64 {
        self.sink.bit_len()
    }

    /// Flushes the shortest code that places the whole dyadic interval it denotes inside
    /// the final coding interval. The decoder reads zeros past the end, so the code point
    /// is that interval's left edge.
    pub fn finish(mut self) -> EncodedStream {
        let width_end = self.high as u128 + 1;
        // With pending bits outstanding the register interval straddles one half and
        // its full span is not dyadic in the true interval, so at least one bit goes out.
        let start = if self.pending > 0 { 1 } else { 0 };
        let mut chosen = None;
        for t in start..=REGISTER_BITS {
            let unit = 1u128 << (REGISTER_BITS - t);
            let v = (self.low as u128).div_ceil(unit) * unit;
            if v + unit <= width_end {
                chosen = Some((t, v));
                break;
            }
        }
        let (t, v) = chosen.expect("a single-unit interval always fits");
        if t > 0 {
            let v = v as u64;
            self.emit(v & HALF != 0);
            for i in 1..t {
                self.sink.push((v >> (REGISTER_BITS - 1 - i)) & 1 == 1);
            }
        }
        let (bytes, bits) = self.sink.finish();
        EncodedStream { bytes, bits }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    low: u64,
    high: u64,
    value: u64,
    source: BitReader<'a>,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut source = BitReader::new(bytes);
        let mut value = 0u64;
        for _ in 0..REGISTER_BITS {
            value = (value << 1) | source.next_bit() as u64;
        }
        Self {
            low: 0,
            high: u64::MAX,
            value,
            source,
        }
    }

    #[inline]
    fn next_bit(&mut self) -> Result<u64, CoderError> {
        let bit = self.source.next_bit() as u64;
        // An intact stream never needs more than one register of zero padding.
        if self.source.padding_bits() > REGISTER_BITS as u64 {
            return Err(CoderError::Truncated);
        }
        Ok(bit)
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<usize, CoderError> {
        check_scale(cdf)?;
        let range = (self.high - self.low) as u128 + 1;
        let offset = (self.value - self.low) as u128;
        let s = cdf.scale_bits();
        let cum = cdf.cumulative();
        // Largest symbol whose lower boundary does not exceed the offset.
        let (mut lo, mut hi) = (0usize, cdf.alphabet_size());
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if (range * cum[mid] as u128) >> s <= offset {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let symbol = lo;
        let (low, high) = sub_interval(self.low, self.high, cdf, symbol);
        self.low = low;
        self.high = high;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.next_bit()?;
        }
        Ok(symbol)
    }
}
