//! Direct-mapped cache for a pure `f64 -> f64` function.
//!
//! Count-based experts produce the same few masses for many symbols of one
//! position, so `ln` and `exp` see repeated inputs. A hit returns the stored
//! result of the same input bits, so cached and uncached outputs are identical.

const SLOT_BITS: u32 = 10;

pub(crate) struct Memo {
    f: fn(f64) -> f64,
    keys: Box<[u64]>,
    vals: Box<[f64]>,
}

impl Memo {
    pub(crate) fn new(f: fn(f64) -> f64) -> Self {
        // Empty slots hold a NaN key with `f(NaN)`, which is a correct entry.
        let empty = u64::MAX;
        Self {
            f,
            keys: vec![empty; 1 << SLOT_BITS].into_boxed_slice(),
            vals: vec![f(f64::from_bits(empty)); 1 << SLOT_BITS].into_boxed_slice(),
        }
    }

    pub(crate) fn ln() -> Self {
        Self::new(libm::log)
    }

    pub(crate) fn exp() -> Self {
        Self::new(libm::exp)
    }

    #[inline]
    pub(crate) fn get(&mut self, x: f64) -> f64 {
        let bits = x.to_bits();
        let slot = (bits.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> (64 - SLOT_BITS)) as usize;
        if self.keys[slot] != bits {
            self.keys[slot] = bits;
            self.vals[slot] = (self.f)(x);
        }
        self.vals[slot]
    }
}
