//! Arithmetic in GF(2^n) for n ∈ {32, 64, 96, 128, 256}.
//!
//! Elements are polynomials over GF(2) stored as little-endian 64-bit limbs
//! (bit `i` of the value is the coefficient of `x^i`). Products are reduced
//! by the lexicographically least irreducible polynomial of each degree:
//!
//! | n   | modulus            |
//! |-----|--------------------|
//! | 32  | `x^32 + 0x8d`      |
//! | 64  | `x^64 + 0x1b`      |
//! | 96  | `x^96 + 0x6f`      |
//! | 128 | `x^128 + 0x87`     |
//! | 256 | `x^256 + 0x425`    |
//!
//! where `0x8d` stands for `x^7 + x^3 + x^2 + 1`, and so on.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GfError {
    #[error("unsupported field size {0}; expected 32, 64, 96, 128 or 256")]
    UnsupportedSize(u32),
    #[error("field size mismatch: GF(2^{0}) vs GF(2^{1})")]
    SizeMismatch(u32, u32),
    #[error("element encoding needs {expected} bytes, got {got}")]
    ByteLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum FieldSize {
    N32,
    N64,
    N96,
    N128,
    N256,
}

impl FieldSize {
    pub const ALL: [FieldSize; 5] = [FieldSize::N32, FieldSize::N64, FieldSize::N96, FieldSize::N128, FieldSize::N256];

    pub fn bits(self) -> u32 {
        match self {
            FieldSize::N32 => 32,
            FieldSize::N64 => 64,
            FieldSize::N96 => 96,
            FieldSize::N128 => 128,
            FieldSize::N256 => 256,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    fn limbs(self) -> usize {
        (self.bits() as usize).div_ceil(64)
    }

    /// Low-order part of the modulus (the modulus minus `x^n`).
    pub fn reduction_poly(self) -> u64 {
        match self {
            FieldSize::N32 => 0x8d,
            FieldSize::N64 => 0x1b,
            FieldSize::N96 => 0x6f,
            FieldSize::N128 => 0x87,
            FieldSize::N256 => 0x425,
        }
    }
}

impl TryFrom<u32> for FieldSize {
    type Error = GfError;

    fn try_from(n: u32) -> Result<Self, GfError> {
        match n {
            32 => Ok(FieldSize::N32),
            64 => Ok(FieldSize::N64),
            96 => Ok(FieldSize::N96),
            128 => Ok(FieldSize::N128),
            256 => Ok(FieldSize::N256),
            _ => Err(GfError::UnsupportedSize(n)),
        }
    }
}

impl From<FieldSize> for u32 {
    fn from(n: FieldSize) -> u32 {
        n.bits()
    }
}

impl fmt::Display for FieldSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct GfElement {
    size: FieldSize,
    limbs: [u64; 4],
}

impl fmt::Debug for GfElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GF{}(0x", self.size.bits())?;
        for b in self.to_be_bytes() {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

impl GfElement {
    pub fn zero(size: FieldSize) -> Self {
        Self { size, limbs: [0; 4] }
    }

    pub fn one(size: FieldSize) -> Self {
        Self::from_u64(size, 1)
    }

    pub fn from_u64(size: FieldSize, v: u64) -> Self {
        let mut limbs = [v, 0, 0, 0];
        mask(size, &mut limbs);
        Self { size, limbs }
    }

    /// Little-endian limbs; bits at or above `n` are cleared.
    pub fn from_limbs(size: FieldSize, mut limbs: [u64; 4]) -> Self {
        mask(size, &mut limbs);
        Self { size, limbs }
    }

    /// Big-endian encoding of exactly `n/8` bytes.
    pub fn from_be_bytes(size: FieldSize, bytes: &[u8]) -> Result<Self, GfError> {
        if bytes.len() != size.bytes() {
            return Err(GfError::ByteLength { expected: size.bytes(), got: bytes.len() });
        }
        Ok(Self::from_be_bytes_padded(size, bytes))
    }

    /// Big-endian encoding of up to `n/8` bytes, zero-padded on the right.
    pub(crate) fn from_be_bytes_padded(size: FieldSize, bytes: &[u8]) -> Self {
        let nb = size.bytes();
        debug_assert!(bytes.len() <= nb);
        let mut limbs = [0u64; 4];
        for (i, &b) in bytes.iter().enumerate() {
            let bit = (nb - 1 - i) * 8;
            limbs[bit / 64] |= (b as u64) << (bit % 64);
        }
        Self { size, limbs }
    }

    pub fn to_be_bytes(&self) -> Vec<u8> {
        let nb = self.size.bytes();
        (0..nb)
            .map(|i| {
                let bit = (nb - 1 - i) * 8;
                (self.limbs[bit / 64] >> (bit % 64)) as u8
            })
            .collect()
    }

    pub fn random<R: RngCore + ?Sized>(size: FieldSize, rng: &mut R) -> Self {
        let mut limbs = [0u64; 4];
        for l in limbs.iter_mut().take(size.limbs()) {
            *l = rng.next_u64();
        }
        Self::from_limbs(size, limbs)
    }

    pub fn size(&self) -> FieldSize {
        self.size
    }

    pub fn limbs(&self) -> [u64; 4] {
        self.limbs
    }

    pub fn is_zero(&self) -> bool {
        self.limbs == [0; 4]
    }

    pub fn bit(&self, i: u32) -> bool {
        i < self.size.bits() && (self.limbs[i as usize / 64] >> (i % 64)) & 1 == 1
    }

    fn same(&self, other: &Self) -> Result<(), GfError> {
        if self.size == other.size {
            Ok(())
        } else {
            Err(GfError::SizeMismatch(self.size.bits(), other.size.bits()))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, GfError> {
        self.same(other)?;
        Ok(self.xor(other))
    }

    pub(crate) fn xor(&self, other: &Self) -> Self {
        let mut limbs = self.limbs;
        for (a, b) in limbs.iter_mut().zip(other.limbs) {
            *a ^= b;
        }
        Self { size: self.size, limbs }
    }

    pub fn mul(&self, other: &Self) -> Result<Self, GfError> {
        self.same(other)?;
        Ok(self.mul_unchecked(other))
    }

    pub(crate) fn mul_unchecked(&self, other: &Self) -> Self {
        Self { size: self.size, limbs: mul_limbs(self.size, &self.limbs, &other.limbs) }
    }

    pub fn square(&self) -> Self {
        self.mul_unchecked(self)
    }

    pub fn pow(&self, mut e: u64) -> Self {
        let mut base = *self;
        let mut acc = Self::one(self.size);
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.mul_unchecked(&base);
            }
            base = base.square();
            e >>= 1;
        }
        acc
    }

    /// `self^(2^n − 2)`, the multiplicative inverse; `None` for zero.
    pub fn inverse(&self) -> Option<Self> {
        if self.is_zero() {
            return None;
        }
        // 2^n − 2 = 2 + 4 + ... + 2^(n−1)
        let mut acc = Self::one(self.size);
        let mut sq = *self;
        for _ in 1..self.size.bits() {
            sq = sq.square();
            acc = acc.mul_unchecked(&sq);
        }
        Some(acc)
    }
}

fn mask(size: FieldSize, limbs: &mut [u64; 4]) {
    let n = size.bits() as usize;
    for (i, l) in limbs.iter_mut().enumerate() {
        let lo = i * 64;
        if lo >= n {
            *l = 0;
        } else if n - lo < 64 {
            *l &= (1u64 << (n - lo)) - 1;
        }
    }
}

fn clmul64_soft(a: u64, b: u64) -> (u64, u64) {
    // 4-bit windowed shift-and-add
    let mut table = [0u128; 16];
    for i in 1..16 {
        table[i] = if i & 1 == 1 { table[i ^ 1] ^ a as u128 } else { table[i >> 1] << 1 };
    }
    let mut r = 0u128;
    for k in (0..16).rev() {
        r = (r << 4) ^ table[((b >> (4 * k)) & 0xf) as usize];
    }
    (r as u64, (r >> 64) as u64)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "pclmulqdq,sse4.1")]
unsafe fn clmul64_hw(a: u64, b: u64) -> (u64, u64) {
    use std::arch::x86_64::*;
    let r = _mm_clmulepi64_si128(_mm_set_epi64x(0, a as i64), _mm_set_epi64x(0, b as i64), 0);
    (_mm_cvtsi128_si64(r) as u64, _mm_extract_epi64::<1>(r) as u64)
}

#[inline]
fn clmul64(a: u64, b: u64) -> (u64, u64) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("pclmulqdq") && std::is_x86_feature_detected!("sse4.1") {
            // SAFETY: the required CPU features were detected above.
            return unsafe { clmul64_hw(a, b) };
        }
    }
    clmul64_soft(a, b)
}

fn mul_limbs(size: FieldSize, a: &[u64; 4], b: &[u64; 4]) -> [u64; 4] {
    let nl = size.limbs();
    if nl == 1 {
        return [mul_single(size, a[0], b[0]), 0, 0, 0];
    }
    let mut p = [0u64; 8];
    for i in 0..nl {
        if a[i] == 0 {
            continue;
        }
        for j in 0..nl {
            let (lo, hi) = clmul64(a[i], b[j]);
            p[i + j] ^= lo;
            p[i + j + 1] ^= hi;
        }
    }
    reduce(size, p)
}

/// Fields of at most 64 bits: the product fits a `u128`.
fn mul_single(size: FieldSize, a: u64, b: u64) -> u64 {
    let n = size.bits();
    let r = size.reduction_poly();
    let (lo, hi) = clmul64(a, b);
    let mut p = (hi as u128) << 64 | lo as u128;
    for _ in 0..2 {
        let high = (p >> n) as u64;
        if high == 0 {
            break;
        }
        let (flo, fhi) = clmul64(high, r);
        p = (p & ((1u128 << n) - 1)) ^ ((fhi as u128) << 64 | flo as u128);
    }
    p as u64
}

/// Reduces a product of degree < 2n modulo `x^n + r(x)`.
fn reduce(size: FieldSize, mut p: [u64; 8]) -> [u64; 4] {
    let n = size.bits() as usize;
    let r = size.reduction_poly();
    // deg r ≤ 10, so two folds bring the degree below n
    for _ in 0..2 {
        let high = shr(&p, n);
        if high.iter().all(|&w| w == 0) {
            break;
        }
        clear_from(&mut p, n);
        let mut bit = 0;
        let mut rr = r;
        while rr != 0 {
            if rr & 1 == 1 {
                xor_shl(&mut p, &high, bit);
            }
            rr >>= 1;
            bit += 1;
        }
    }
    [p[0], p[1], p[2], p[3]]
}

fn shr(p: &[u64; 8], s: usize) -> [u64; 8] {
    let (w, b) = (s / 64, s % 64);
    let mut out = [0u64; 8];
    for i in 0..8 - w {
        let lo = p[i + w] >> b;
        let hi = if b > 0 && i + w + 1 < 8 { p[i + w + 1] << (64 - b) } else { 0 };
        out[i] = lo | hi;
    }
    out
}

fn clear_from(p: &mut [u64; 8], n: usize) {
    for (i, w) in p.iter_mut().enumerate() {
        let lo = i * 64;
        if lo >= n {
            *w = 0;
        } else if n - lo < 64 {
            *w &= (1u64 << (n - lo)) - 1;
        }
    }
}

fn xor_shl(p: &mut [u64; 8], v: &[u64; 8], s: usize) {
    for i in (0..8).rev() {
        let mut w = v[i] << s;
        if s > 0 && i > 0 {
            w |= v[i - 1] >> (64 - s);
        }
        p[i] ^= w;
    }
}
