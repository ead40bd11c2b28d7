/// MSB-first bit packer. The final partial byte is zero-padded.
#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    current: u8,
    filled: u32,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, bit: bool) {
        self.current = (self.current << 1) | bit as u8;
        self.filled += 1;
        self.bits += 1;
        if self.filled == 8 {
            self.bytes.push(self.current);
            self.current = 0;
            self.filled = 0;
        }
    }

    #[inline]
    pub fn push_repeated(&mut self, bit: bool, count: u64) {
        for _ in 0..count {
            self.push(bit);
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn finish(mut self) -> (Vec<u8>, u64) {
        if self.filled > 0 {
            self.bytes.push(self.current << (8 - self.filled));
        }
        (self.bytes, self.bits)
    }
}

/// MSB-first bit source. Reads past the end yield zeros and are counted, so the
/// decoder can tell legitimate tail padding from a truncated stream.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    padding: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            padding: 0,
        }
    }

    #[inline]
    pub fn next_bit(&mut self) -> bool {
        let byte = (self.pos >> 3) as usize;
        if byte >= self.bytes.len() {
            self.padding += 1;
            return false;
        }
        let bit = (self.bytes[byte] >> (7 - (self.pos & 7))) & 1;
        self.pos += 1;
        bit == 1
    }

    /// Zero bits supplied beyond the end of the input so far.
    pub fn padding_bits(&self) -> u64 {
        self.padding
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msb_first_with_zero_pad() {
        let mut w = BitWriter::new();
        for b in [true, false, true, true, false, false, false, true, true, true] {
            w.push(b);
        }
        let (bytes, bits) = w.finish();
        assert_eq!(bits, 10);
        assert_eq!(bytes, vec![0b1011_0001, 0b1100_0000]);

        let mut r = BitReader::new(&bytes);
        let read: Vec<bool> = (0..18).map(|_| r.next_bit()).collect();
        assert_eq!(&read[..3], &[true, false, true]);
        assert!(read[16..].iter().all(|b| !b));
        assert_eq!(r.padding_bits(), 2);
    }
}
