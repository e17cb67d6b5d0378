//! Carry-less range coder with a 64-bit state and 32-bit output words.
//!
//! The coding interval `[low, low + range)` never wraps past `2^64`. When the
//! top 32 bits of both interval ends agree the word is final and is emitted.
//! When the interval straddles a word boundary and has become narrow
//! (`range < 2^32`), it is cut at that boundary and the larger side is kept;
//! the decoder mirrors the same choice, so no carry can ever propagate.
//! Words are written little-endian. Frequencies use a fixed total `2^16`.

use crate::error::{Error, Result};

pub const TOTAL_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << TOTAL_BITS;
const WORD_BITS: u32 = 32;
const BOT: u64 = 1 << 32;

#[inline]
fn shrink(low: &mut u64, range: &mut u64, cum: u32, freq: u32) {
    let r = *range >> TOTAL_BITS;
    let start = r * cum as u64;
    *low += start;
    // the last symbol absorbs the truncation remainder
    *range = if cum + freq < TOTAL { r * freq as u64 } else { *range - start };
}

/// One normalization decision: `None` when the interval is wide enough.
#[inline]
fn next_word(low: &mut u64, range: &mut u64) -> Option<u32> {
    let hi = *low as u128 + *range as u128;
    let top = *low >> WORD_BITS;
    if top as u128 != (hi - 1) >> WORD_BITS {
        if *range >= BOT {
            return None;
        }
        let boundary = (top + 1) << WORD_BITS;
        let below = boundary - *low;
        let above = (hi - boundary as u128) as u64;
        if above > below {
            *low = boundary;
            *range = above;
        } else {
            *range = below;
        }
    }
    let word = (*low >> WORD_BITS) as u32;
    *low <<= WORD_BITS;
    *range = ((*range as u128) << WORD_BITS).min(u64::MAX as u128) as u64;
    Some(word)
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u64::MAX, out: Vec::new() }
    }

    /// Code the sub-interval `[cum, cum + freq)` of `[0, 2^16)`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        shrink(&mut self.low, &mut self.range, cum, freq);
        while let Some(w) = next_word(&mut self.low, &mut self.range) {
            self.out.extend_from_slice(&w.to_le_bytes());
        }
    }

    /// One equiprobable bit.
    pub fn encode_bit(&mut self, bit: bool) {
        let half = TOTAL / 2;
        self.encode(if bit { half } else { 0 }, half);
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.out.extend_from_slice(&((self.low >> WORD_BITS) as u32).to_le_bytes());
        self.out.extend_from_slice(&(self.low as u32).to_le_bytes());
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self { low: 0, range: u64::MAX, code: 0, data, pos: 0 };
        let hi = d.read_word()? as u64;
        let lo = d.read_word()? as u64;
        d.code = (hi << WORD_BITS) | lo;
        Ok(d)
    }

    fn read_word(&mut self) -> Result<u32> {
        let Some(b) = self.data.get(self.pos..self.pos + 4) else {
            return Err(Error::truncated("range-coded stream"));
        };
        self.pos += 4;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Cumulative frequency the next symbol falls on, in `[0, 2^16)`.
    pub fn target(&self) -> u32 {
        let r = self.range >> TOTAL_BITS;
        (self.code.wrapping_sub(self.low) / r).min(TOTAL as u64 - 1) as u32
    }

    /// Remove the symbol `[cum, cum + freq)` found through [`Self::target`].
    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        shrink(&mut self.low, &mut self.range, cum, freq);
        while next_word(&mut self.low, &mut self.range).is_some() {
            self.code = (self.code << WORD_BITS) | self.read_word()? as u64;
        }
        Ok(())
    }

    pub fn decode_bit(&mut self) -> Result<bool> {
        let half = TOTAL / 2;
        let bit = self.target() >= half;
        self.consume(if bit { half } else { 0 }, half)?;
        Ok(bit)
    }

    /// Fails unless every byte of the stream was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::corruption(format!(
                "range-coded stream has {} unread bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}
