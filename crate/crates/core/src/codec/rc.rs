//! Byte-oriented range coder with carry propagation.
//!
//! `low` is kept in 33 bits; a carry out of bit 32 ripples into the bytes
//! already held back in `cache`. The encoder emits exactly one byte per
//! normalization plus five on flush, and the decoder consumes the same count,
//! so a well-formed stream is fully consumed and starts with a zero byte.

use crate::entropy::ChannelCdf;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
/// Bytes written by [`RangeEncoder::finish`] for an empty stream.
pub const TERMINATOR_BYTES: usize = 5;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes the interval `[start, start + freq)` of a `2^bits` total.
    pub fn encode(&mut self, start: u32, freq: u32, bits: u32) {
        debug_assert!(freq > 0 && start + freq <= 1 << bits);
        let r = self.range >> bits;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < TERMINATOR_BYTES {
            return Err(Error::decode("range-coded payload is truncated"));
        }
        if buf[0] != 0 {
            return Err(Error::decode("range-coded payload has a bad lead byte"));
        }
        let code = u32::from_be_bytes(buf[1..5].try_into().expect("4 bytes"));
        Ok(RangeDecoder { buf, pos: 5, code, range: u32::MAX })
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.buf.get(self.pos).ok_or_else(|| Error::decode("range-coded payload is truncated"))?;
        self.pos += 1;
        Ok(b)
    }

    /// Returns the scaled target and the per-unit range for a `2^bits` total.
    pub fn target(&mut self, bits: u32) -> Result<(u32, u32)> {
        let r = self.range >> bits;
        let v = self.code / r;
        if v >= 1 << bits {
            return Err(Error::decode("range-coded payload is corrupt"));
        }
        Ok((v, r))
    }

    pub fn consume(&mut self, start: u32, freq: u32, r: u32) -> Result<()> {
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    /// Fails unless every byte of the payload was read.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::decode(format!(
                "range-coded payload has {} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Codes `symbols[i]` with `tables[channel_of(i)]`.
pub fn range_encode(symbols: &[i32], channel_of: impl Fn(usize) -> usize, tables: &[ChannelCdf]) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (i, &q) in symbols.iter().enumerate() {
        let t = tables
            .get(channel_of(i))
            .ok_or_else(|| Error::internal(format!("no table for symbol {i}")))?;
        let j = t
            .index(q)
            .ok_or_else(|| Error::internal(format!("symbol {q} outside the coded support")))?;
        let (start, freq) = t.range(j);
        if freq == 0 {
            return Err(Error::internal(format!("symbol {q} has zero mass")));
        }
        enc.encode(start, freq, t.precision());
    }
    Ok(enc.finish())
}

/// Inverse of [`range_encode`] for `n` symbols.
pub fn range_decode(bytes: &[u8], n: usize, channel_of: impl Fn(usize) -> usize, tables: &[ChannelCdf]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = tables
            .get(channel_of(i))
            .ok_or_else(|| Error::internal(format!("no table for symbol {i}")))?;
        let (v, r) = dec.target(t.precision())?;
        let j = t.find(v);
        let (start, freq) = t.range(j);
        dec.consume(start, freq, r)?;
        out.push(t.symbol(j));
    }
    dec.finish()?;
    Ok(out)
}

/// `sum -log2 p` of `symbols` under the integer tables.
pub fn ideal_bits(symbols: &[i32], channel_of: impl Fn(usize) -> usize, tables: &[ChannelCdf]) -> Option<f64> {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &q)| tables.get(channel_of(i))?.cost_bits(q))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(support: usize) -> ChannelCdf {
        ChannelCdf::from_masses(&vec![1.0 / (2 * support) as f64; 2 * support], 16).unwrap()
    }

    #[test]
    fn empty_stream_is_the_terminator() {
        let bytes = range_encode(&[], |_| 0, &[flat(4)]).unwrap();
        assert_eq!(bytes.len(), TERMINATOR_BYTES);
        assert!(range_decode(&bytes, 0, |_| 0, &[flat(4)]).unwrap().is_empty());
    }

    #[test]
    fn single_symbol_round_trips() {
        let t = [flat(4)];
        for q in -4..4 {
            let bytes = range_encode(&[q], |_| 0, &t).unwrap();
            assert_eq!(range_decode(&bytes, 1, |_| 0, &t).unwrap(), vec![q]);
        }
    }

    #[test]
    fn flat_eight_symbol_stream_meets_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = [flat(4)];
        let s: Vec<i32> = (0..10_000).map(|_| rng.random_range(-4..4)).collect();
        let bytes = range_encode(&s, |_| 0, &t).unwrap();
        assert!(bytes.len() as f64 <= 3750.2 + 8.0, "{} bytes", bytes.len());
        assert_eq!(range_decode(&bytes, s.len(), |_| 0, &t).unwrap(), s);
    }

    #[test]
    fn skewed_tables_round_trip_with_carries() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = vec![1e-6; 64];
        m[32] = 1.0 - 63e-6;
        let peaked = ChannelCdf::from_masses(&m, 16).unwrap();
        let tables = [peaked, flat(32)];
        let s: Vec<i32> = (0..20_000)
            .map(|i| if i % 2 == 0 { if rng.random_bool(0.999) { 0 } else { rng.random_range(-32..32) } } else { rng.random_range(-32..32) })
            .collect();
        let bytes = range_encode(&s, |i| i % 2, &tables).unwrap();
        assert_eq!(range_decode(&bytes, s.len(), |i| i % 2, &tables).unwrap(), s);
    }

    #[test]
    fn truncation_is_detected() {
        let t = [flat(4)];
        let s: Vec<i32> = (0..500).map(|i| (i % 8) - 4).collect();
        let bytes = range_encode(&s, |_| 0, &t).unwrap();
        assert!(range_decode(&bytes[..bytes.len() - 1], s.len(), |_| 0, &t).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(range_decode(&longer, s.len(), |_| 0, &t).is_err());
    }
}
