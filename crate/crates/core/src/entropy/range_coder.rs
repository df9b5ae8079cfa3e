//! 32-bit range coder with carry propagation.
//!
//! Symbols are coded against cumulative frequencies summing to `2^shift`.
//! The interval for `(cum, freq)` is `[R*cum >> shift, R*(cum+freq) >> shift)`,
//! an exact partition of the current range `R`, so encoder and decoder agree
//! without division on the encoder side.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

/// Bytes the decoder reads past the end of a well-formed stream.
const TAIL_PAD: usize = 3;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    /// The first queued byte is always zero and never written.
    virtual_byte: bool,
    coded: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 0,
            virtual_byte: true,
            coded: false,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `2^shift`.
    pub fn encode(&mut self, cum: u32, freq: u32, shift: u32) {
        debug_assert!(freq > 0 && shift <= 16 && (cum + freq) as u64 <= 1 << shift);
        let r = self.range as u64;
        let lo = (r * cum as u64) >> shift;
        let hi = (r * (cum + freq) as u64) >> shift;
        self.low += lo;
        self.range = (hi - lo) as u32;
        self.coded = true;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes the low `bits` bits of `value` with equal probability.
    pub fn encode_bits(&mut self, mut value: u32, mut bits: u32) {
        while bits > 0 {
            let chunk = bits.min(16);
            bits -= chunk;
            let part = (value >> bits) & ((1 << chunk) - 1);
            self.encode(part, 1, chunk);
            value &= (1u32 << bits).wrapping_sub(1);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            if self.virtual_byte {
                debug_assert_eq!(carry, 0);
                self.virtual_byte = false;
            } else {
                self.out.push(self.cache.wrapping_add(carry));
            }
            for _ in 0..self.pending {
                self.out.push(0xFF_u8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = (self.low >> 24) as u8;
        } else {
            self.pending += 1;
        }
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Terminates the stream. Empty when nothing was coded.
    pub fn finish(mut self) -> Vec<u8> {
        if !self.coded {
            return Vec::new();
        }
        // Any value in [low, low + range) identifies the stream; pick the one
        // whose low 24 bits are zero so the decoder's zero padding supplies them.
        self.low = (self.low + (TOP as u64 - 1)) & !(TOP as u64 - 1);
        self.shift_low();
        self.shift_low();
        self.out
    }
}

pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    pad: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            input,
            pos: 0,
            pad: 0,
            code: 0,
            range: u32::MAX,
        };
        if input.is_empty() {
            // Nothing was coded; any decode call reports exhaustion.
            d.range = 0;
            return Ok(d);
        }
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if let Some(&b) = self.input.get(self.pos) {
            self.pos += 1;
            Ok(b)
        } else {
            self.pad += 1;
            if self.pad > TAIL_PAD {
                return Err(Error::Exhausted);
            }
            Ok(0)
        }
    }

    /// Returns the value `t` such that the coded symbol is the one whose
    /// interval contains it: the largest `s` with `cum(s) <= t`.
    pub fn target(&self, shift: u32) -> Result<u32> {
        if self.range == 0 {
            return Err(Error::Exhausted);
        }
        let t = (((self.code as u64 + 1) << shift) - 1) / self.range as u64;
        Ok(t.min((1u64 << shift) - 1) as u32)
    }

    pub fn consume(&mut self, cum: u32, freq: u32, shift: u32) -> Result<()> {
        let r = self.range as u64;
        let lo = (r * cum as u64) >> shift;
        let hi = (r * (cum + freq) as u64) >> shift;
        if (self.code as u64) < lo || (self.code as u64) >= hi {
            return Err(Error::Corrupt("range decoder desynchronised".into()));
        }
        self.code -= lo as u32;
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, mut bits: u32) -> Result<u32> {
        let mut value = 0u32;
        while bits > 0 {
            let chunk = bits.min(16);
            bits -= chunk;
            let part = self.target(chunk)?;
            self.consume(part, 1, chunk)?;
            value = (value << chunk) | part;
        }
        Ok(value)
    }

    /// Verifies that exactly the produced bytes were consumed.
    pub fn finish(self) -> Result<()> {
        if self.input.is_empty() {
            return Ok(());
        }
        if self.pos != self.input.len() || self.pad != TAIL_PAD {
            return Err(Error::Corrupt(format!(
                "entropy payload has {} unread bytes",
                self.input.len() - self.pos
            )));
        }
        Ok(())
    }
}
