//! Packed bit sequences.
//!
//! Bit `i` lives in word `i / 64` at position `i % 64`; the byte form is
//! little-endian in the same sense (bit `i` is bit `i % 8` of byte `i / 8`).

use rand::{Rng, RngCore};
use std::fmt;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("bit block length mismatch: {left} vs {right}")]
pub struct LengthMismatch {
    pub left: usize,
    pub right: usize,
}

/// A length-checked packed bit vector.
#[derive(Clone, PartialEq, Eq, Default, Hash)]
pub struct BitBlock {
    words: Vec<u64>,
    len: usize,
}

impl BitBlock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn with_capacity(bits: usize) -> Self {
        Self {
            words: Vec::with_capacity(bits.div_ceil(64)),
            len: 0,
        }
    }

    pub fn random<R: RngCore + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut words: Vec<u64> = (0..len.div_ceil(64)).map(|_| rng.next_u64()).collect();
        if len % 64 != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (len % 64)) - 1;
            }
        }
        Self { words, len }
    }

    /// Bits that are set independently with probability `p`.
    pub fn bernoulli<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Self {
        let mut out = Self::zeros(len);
        for i in 0..len {
            if rng.random_bool(p) {
                out.set(i, true);
            }
        }
        out
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let iter = bits.into_iter();
        let mut out = Self::with_capacity(iter.size_hint().0);
        for b in iter {
            out.push(b);
        }
        out
    }

    /// Parses a string of `0`/`1` characters; anything else is skipped.
    pub fn from_bit_str(s: &str) -> Self {
        Self::from_bools(s.chars().filter_map(|c| match c {
            '0' => Some(false),
            '1' => Some(true),
            _ => None,
        }))
    }

    /// Builds a block of `len` bits from packed bytes. Missing bytes read as
    /// zero; bits beyond `len` are ignored.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Self {
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate().take(len.div_ceil(8)) {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        let mut out = Self { words, len };
        out.clear_tail();
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = self.len.div_ceil(8);
        let mut out = Vec::with_capacity(nbytes);
        for i in 0..nbytes {
            out.push((self.words[i / 8] >> (8 * (i % 8))) as u8);
        }
        out
    }

    pub fn from_words(words: Vec<u64>, len: usize) -> Self {
        assert!(words.len() >= len.div_ceil(64), "not enough words for {len} bits");
        let mut out = Self { words, len };
        out.words.truncate(len.div_ceil(64));
        out.clear_tail();
        out
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    pub fn push(&mut self, value: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        self.len += 1;
        if value {
            let i = self.len - 1;
            self.words[i / 64] |= 1u64 << (i % 64);
        }
    }

    pub fn extend_from(&mut self, other: &BitBlock) {
        for b in other.iter() {
            self.push(b);
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = bool> + '_ {
        (0..self.len).map(move |i| (self.words[i / 64] >> (i % 64)) & 1 == 1)
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn parity(&self) -> bool {
        self.words.iter().fold(0u64, |acc, w| acc ^ w).count_ones() % 2 == 1
    }

    pub fn xor(&self, other: &BitBlock) -> Result<BitBlock, LengthMismatch> {
        let mut out = self.clone();
        out.xor_assign(other)?;
        Ok(out)
    }

    pub fn xor_assign(&mut self, other: &BitBlock) -> Result<(), LengthMismatch> {
        if self.len != other.len {
            return Err(LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
        Ok(())
    }

    pub fn hamming_distance(&self, other: &BitBlock) -> Result<usize, LengthMismatch> {
        if self.len != other.len {
            return Err(LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum())
    }

    /// Copy of bits `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> BitBlock {
        assert!(start <= end && end <= self.len);
        BitBlock::from_bools((start..end).map(|i| self.get(i)))
    }

    /// Removes the bits at the given sorted, distinct positions.
    pub fn remove_positions(&self, sorted_positions: &[usize]) -> BitBlock {
        let mut out = BitBlock::with_capacity(self.len - sorted_positions.len());
        let mut skip = sorted_positions.iter().peekable();
        for i in 0..self.len {
            if skip.peek() == Some(&&i) {
                skip.next();
                continue;
            }
            out.push(self.get(i));
        }
        out
    }

    fn clear_tail(&mut self) {
        if self.len % 64 != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << (self.len % 64)) - 1;
            }
        }
    }
}

impl fmt::Debug for BitBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len <= 128 {
            write!(f, "BitBlock({}: {self})", self.len)
        } else {
            write!(f, "BitBlock({} bits, {} ones)", self.len, self.count_ones())
        }
    }
}

impl fmt::Display for BitBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromIterator<bool> for BitBlock {
    fn from_iter<T: IntoIterator<Item = bool>>(iter: T) -> Self {
        Self::from_bools(iter)
    }
}
