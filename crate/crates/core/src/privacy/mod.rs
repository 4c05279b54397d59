//! Correction confirmation, final key length and privacy amplification.
//!
//! The final key length follows
//!
//! ```text
//! N_fin = max(floor(N_in · τ(e)) − N_dis − N_mar, 0)
//! τ(e)  = 1 for e = 0,  1 − h(e) for 0 < e ≤ 1/2,  0 for e > 1/2
//! ```
//!
//! with `h` the binary entropy. Compression multiplies the reconciled key
//! by a random binary Toeplitz matrix; the product is computed as a
//! convolution through [`ntt`] and reduced mod 2.

pub mod ntt;

use crate::auth::{FieldSize, GfElement};
use crate::bits::BitBlock;
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub const DEFAULT_N_MAR: usize = 100;
/// Width of the confirmation hash; these bits count as disclosed.
pub const CONFIRM_BITS: usize = 96;
pub const CONFIRM_FIELD: FieldSize = FieldSize::N96;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PrivacyError {
    #[error("output length {n_fin} exceeds input length {n_in}")]
    OutputTooLong { n_fin: usize, n_in: usize },
    #[error("seed holds {got} bits, {expected} required")]
    SeedLength { expected: usize, got: usize },
    #[error("key holds {got} bits, seed was built for {expected}")]
    KeyLength { expected: usize, got: usize },
    #[error("input too long for the transform")]
    TooLong,
}

pub fn binary_entropy(e: f64) -> f64 {
    if e <= 0.0 || e >= 1.0 {
        0.0
    } else {
        -e * e.log2() - (1.0 - e) * (1.0 - e).log2()
    }
}

pub fn tau(e: f64) -> f64 {
    if e.is_nan() || e > 0.5 {
        0.0
    } else if e <= 0.0 {
        1.0
    } else {
        (1.0 - binary_entropy(e)).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalKeyParams {
    pub n_in: usize,
    pub e: f64,
    pub n_dis: usize,
    pub n_mar: usize,
}

pub fn final_length(p: &FinalKeyParams) -> usize {
    let kept = (p.n_in as f64 * tau(p.e)).floor() as i128;
    (kept - p.n_dis as i128 - p.n_mar as i128).max(0) as usize
}

/// Polynomial hash of a key over GF(2^96) keyed by `r`: 96-bit blocks of
/// the packed key bytes, then a block holding the key's bit length.
pub fn confirm_hash(key: &BitBlock, r: &GfElement) -> GfElement {
    let size = r.size();
    let mut t = GfElement::zero(size);
    for chunk in key.to_bytes().chunks(size.bytes()) {
        t = t.xor(&GfElement::from_be_bytes_padded(size, chunk)).mul_unchecked(r);
    }
    t.xor(&GfElement::from_u64(size, key.len() as u64)).mul_unchecked(r)
}

/// Toeplitz matrix diagonals for an `n_in → n_fin` compression.
///
/// Entry `(i, j)` of the matrix is `bits[n_fin − 1 − i + j]`, so the first
/// row is `bits[n_fin−1..]` and the first column, read bottom-up, is
/// `bits[0..n_fin]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaSeed {
    bits: BitBlock,
    n_in: usize,
    n_fin: usize,
}

pub fn seed_length(n_in: usize, n_fin: usize) -> usize {
    (n_in + n_fin).saturating_sub(1)
}

impl PaSeed {
    pub fn new(bits: BitBlock, n_in: usize, n_fin: usize) -> Result<Self, PrivacyError> {
        if n_fin > n_in {
            return Err(PrivacyError::OutputTooLong { n_fin, n_in });
        }
        let expected = seed_length(n_in, n_fin);
        if bits.len() != expected {
            return Err(PrivacyError::SeedLength { expected, got: bits.len() });
        }
        Ok(Self { bits, n_in, n_fin })
    }

    pub fn random<R: RngCore + ?Sized>(n_in: usize, n_fin: usize, rng: &mut R) -> Result<Self, PrivacyError> {
        Self::new(BitBlock::random(seed_length(n_in, n_fin), rng), n_in, n_fin)
    }

    pub fn bits(&self) -> &BitBlock {
        &self.bits
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_fin(&self) -> usize {
        self.n_fin
    }

    fn check_key(&self, key: &BitBlock) -> Result<(), PrivacyError> {
        if key.len() != self.n_in {
            return Err(PrivacyError::KeyLength { expected: self.n_in, got: key.len() });
        }
        Ok(())
    }
}

/// `T·key` over GF(2) via an NTT convolution.
pub fn toeplitz_pa(key: &BitBlock, seed: &PaSeed) -> Result<BitBlock, PrivacyError> {
    seed.check_key(key)?;
    let (n_in, n_fin) = (seed.n_in, seed.n_fin);
    if n_fin == 0 {
        return Ok(BitBlock::new());
    }
    // y_i = Σ_j s[n_fin−1−i+j]·x_j = (s ∗ rev(x))[n_fin+n_in−2−i].
    // Wrapped terms of a cyclic convolution of length ≥ |s| land below
    // index n_in − 1, outside the range read back.
    let n = seed.bits.len().next_power_of_two();
    if n.trailing_zeros() > ntt::MAX_LOG_LEN {
        return Err(PrivacyError::TooLong);
    }
    let s: Vec<u64> = seed.bits.iter().map(u64::from).collect();
    let x: Vec<u64> = (0..n_in).map(|j| key.get(n_in - 1 - j) as u64).collect();
    let c = ntt::cyclic_convolution(&s, &x, n);
    Ok((0..n_fin).map(|i| c[n_fin + n_in - 2 - i] & 1 == 1).collect())
}

/// Row-by-row GF(2) product; reference for [`toeplitz_pa`].
pub fn toeplitz_naive(key: &BitBlock, seed: &PaSeed) -> Result<BitBlock, PrivacyError> {
    seed.check_key(key)?;
    let (n_in, n_fin) = (seed.n_in, seed.n_fin);
    Ok((0..n_fin)
        .map(|i| (0..n_in).fold(false, |acc, j| acc ^ (seed.bits.get(n_fin - 1 - i + j) & key.get(j))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn tau_branches() {
        assert_eq!(tau(0.0), 1.0);
        assert_eq!(tau(0.6), 0.0);
        assert!(tau(0.5).abs() < 1e-15);
        assert!((tau(0.02) - 0.858_559_457_458_179_4).abs() < 1e-12);
        assert!((tau(1e-12) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn final_length_examples() {
        let p = FinalKeyParams { n_in: 10_000, e: 0.02, n_dis: 1500, n_mar: 500 };
        assert_eq!(final_length(&p), 6585);
        assert_eq!(final_length(&FinalKeyParams { e: 0.51, ..p }), 0);
        assert_eq!(final_length(&FinalKeyParams { n_dis: 10_000, ..p }), 0);
        assert_eq!(final_length(&FinalKeyParams { n_in: 0, ..p }), 0);
    }

    #[test]
    fn explicit_small_matrix() {
        // n_in = 5, n_fin = 3: seed s0..s6, rows are s[2-i..7-i]
        let seed = PaSeed::new(BitBlock::from_bit_str("1011001"), 5, 3).unwrap();
        let key = BitBlock::from_bit_str("11010");
        // row 0: s2..s6 = 1 1 0 0 1 -> 1+1 = 0
        // row 1: s1..s5 = 0 1 1 0 0 -> 1
        // row 2: s0..s4 = 1 0 1 1 0 -> 1+1 = 0
        assert_eq!(toeplitz_naive(&key, &seed).unwrap(), BitBlock::from_bit_str("010"));
        assert_eq!(toeplitz_pa(&key, &seed).unwrap(), BitBlock::from_bit_str("010"));
    }

    #[test]
    fn degenerate_and_invalid_shapes() {
        let key = BitBlock::from_bit_str("101");
        let zero_out = PaSeed::new(BitBlock::from_bit_str("10"), 3, 0).unwrap();
        assert!(toeplitz_pa(&key, &zero_out).unwrap().is_empty());
        assert_eq!(
            PaSeed::new(BitBlock::zeros(6), 3, 4),
            Err(PrivacyError::OutputTooLong { n_fin: 4, n_in: 3 })
        );
        assert!(matches!(PaSeed::new(BitBlock::zeros(4), 3, 3), Err(PrivacyError::SeedLength { .. })));
        let zeros = PaSeed::new(BitBlock::zeros(5), 3, 3).unwrap();
        assert_eq!(toeplitz_pa(&key, &zeros).unwrap(), BitBlock::zeros(3));
        assert!(toeplitz_pa(&BitBlock::zeros(4), &zeros).is_err());
        let empty = PaSeed::new(BitBlock::new(), 0, 0).unwrap();
        assert!(toeplitz_pa(&BitBlock::new(), &empty).unwrap().is_empty());
    }

    #[test]
    fn confirm_detects_single_bit_differences() {
        let mut rng = seeded(6);
        let key = BitBlock::random(4000, &mut rng);
        let mut other = key.clone();
        other.flip(1234);
        let mut collisions = 0;
        for _ in 0..1000 {
            let r = GfElement::random(CONFIRM_FIELD, &mut rng);
            assert_eq!(confirm_hash(&key, &r), confirm_hash(&key.clone(), &r));
            if confirm_hash(&key, &r) == confirm_hash(&other, &r) {
                collisions += 1;
            }
        }
        assert!(collisions <= 1);
        let r = GfElement::random(CONFIRM_FIELD, &mut rng);
        assert_eq!(confirm_hash(&BitBlock::new(), &r), confirm_hash(&BitBlock::new(), &r));
        // trailing zero bits change the length block
        assert_ne!(confirm_hash(&BitBlock::zeros(3), &r), confirm_hash(&BitBlock::zeros(4), &r));
    }

    proptest! {
        #[test]
        fn fast_path_equals_naive(n_in in 1usize..300, frac in 0.0f64..=1.0, s in any::<u64>()) {
            let mut rng = seeded(s);
            let n_fin = (n_in as f64 * frac) as usize;
            let seed = PaSeed::random(n_in, n_fin, &mut rng).unwrap();
            let key = BitBlock::random(n_in, &mut rng);
            prop_assert_eq!(toeplitz_pa(&key, &seed).unwrap(), toeplitz_naive(&key, &seed).unwrap());
        }

        #[test]
        fn linear_over_gf2(n_in in 1usize..200, s in any::<u64>()) {
            let mut rng = seeded(s);
            let n_fin = rng.random_range(0..=n_in);
            let seed = PaSeed::random(n_in, n_fin, &mut rng).unwrap();
            let x = BitBlock::random(n_in, &mut rng);
            let y = BitBlock::random(n_in, &mut rng);
            let lhs = toeplitz_pa(&x.xor(&y).unwrap(), &seed).unwrap();
            let rhs = toeplitz_pa(&x, &seed).unwrap().xor(&toeplitz_pa(&y, &seed).unwrap()).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn final_length_is_monotone(n_in in 0usize..100_000, e1 in 0.0f64..0.5, e2 in 0.0f64..0.5, d in 0usize..5000, m in 0usize..500) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let p = FinalKeyParams { n_in, e: lo, n_dis: d, n_mar: m };
            let base = final_length(&p);
            let worse = [
                FinalKeyParams { e: hi, ..p },
                FinalKeyParams { n_dis: d + 1, ..p },
                FinalKeyParams { n_mar: m + 1, ..p },
            ];
            for w in &worse {
                prop_assert!(base >= final_length(w), "{:?}", w);
            }
        }
    }
}
