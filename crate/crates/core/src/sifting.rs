//! Basis sifting and sampled error estimation.
//!
//! The source state is anti-correlated in HV and correlated in DA, so Bob
//! inverts his HV bits; after that both raw keys agree wherever the
//! photons were not disturbed.

use crate::bits::BitBlock;
use crate::rng::derive_rng;
use crate::sync::Coincidence;
use crate::tags::{Basis, Party, TagStream};
use rand::seq::index;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SiftError {
    #[error("insufficient key")]
    InsufficientKey,
    #[error("disclosure fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("coincidence {index} refers to a tag outside the stream")]
    BadIndex { index: usize },
    #[error("{0} peer bases for {1} coincidences")]
    BasisCount(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftResult {
    pub key_a: BitBlock,
    pub key_b: BitBlock,
    pub n_coinc_total: usize,
    pub n_sifted: usize,
    /// Basis of each sifted bit.
    pub bases: Vec<Basis>,
}

impl SiftResult {
    /// Fraction of positions where the keys disagree.
    pub fn error_rate(&self) -> f64 {
        if self.n_sifted == 0 {
            return 0.0;
        }
        self.key_a.hamming_distance(&self.key_b).unwrap_or(0) as f64 / self.n_sifted as f64
    }
}

/// Key bit of `party` for a detection in `basis` reporting `bit`.
pub fn key_bit(party: Party, basis: Basis, bit: bool) -> bool {
    match (party, basis) {
        (Party::Bob, Basis::HV) => !bit,
        _ => bit,
    }
}

/// Both parties' sifted keys from matched coincidences.
pub fn sift(coinc: &[Coincidence], a: &TagStream, b: &TagStream) -> Result<SiftResult, SiftError> {
    let mut key_a = BitBlock::with_capacity(coinc.len() / 2 + 1);
    let mut key_b = BitBlock::with_capacity(coinc.len() / 2 + 1);
    let mut bases = Vec::with_capacity(coinc.len() / 2 + 1);
    for (index, c) in coinc.iter().enumerate() {
        let (ia, ib) = (c.idx_a as usize, c.idx_b as usize);
        if ia >= a.len() || ib >= b.len() {
            return Err(SiftError::BadIndex { index });
        }
        let (ch_a, ch_b) = (a.channels()[ia], b.channels()[ib]);
        if ch_a.basis() != ch_b.basis() {
            continue;
        }
        key_a.push(key_bit(Party::Alice, ch_a.basis(), ch_a.bit()));
        key_b.push(key_bit(Party::Bob, ch_b.basis(), ch_b.bit()));
        bases.push(ch_a.basis());
    }
    Ok(SiftResult {
        n_coinc_total: coinc.len(),
        n_sifted: key_a.len(),
        key_a,
        key_b,
        bases,
    })
}

/// One party's half of sifting: keeps the coincidences (given as indices
/// into the party's own stream) whose basis matches the peer's.
///
/// Returns the party's sifted key and the positions kept.
pub fn sift_side(
    party: Party,
    own: &TagStream,
    own_indices: &[u32],
    peer_bases: &[Basis],
) -> Result<(BitBlock, Vec<usize>), SiftError> {
    if own_indices.len() != peer_bases.len() {
        return Err(SiftError::BasisCount(peer_bases.len(), own_indices.len()));
    }
    let mut key = BitBlock::with_capacity(own_indices.len() / 2 + 1);
    let mut kept = Vec::with_capacity(own_indices.len() / 2 + 1);
    for (pos, (&i, &peer)) in own_indices.iter().zip(peer_bases).enumerate() {
        let ch = *own
            .channels()
            .get(i as usize)
            .ok_or(SiftError::BadIndex { index: pos })?;
        if ch.basis() == peer {
            key.push(key_bit(party, ch.basis(), ch.bit()));
            kept.push(pos);
        }
    }
    Ok((key, kept))
}

/// Positions disclosed for error estimation: `round(fraction·n)` distinct
/// indices drawn by a PRF keyed with the shared `seed`, ascending.
pub fn sample_positions(n: usize, fraction: f64, seed: &[u8]) -> Result<Vec<usize>, SiftError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SiftError::Fraction(fraction));
    }
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut rng = derive_rng("qber-sample", &[seed, &(n as u64).to_be_bytes()]);
    let mut pos = index::sample(&mut rng, n, k).into_vec();
    pos.sort_unstable();
    Ok(pos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QberEstimate {
    pub e: f64,
    pub n_disclosed: usize,
    pub mismatches: usize,
}

/// Error rate from disclosed bit pairs.
pub fn qber_from_samples(own: &BitBlock, peer: &BitBlock) -> Result<QberEstimate, SiftError> {
    let mismatches = own
        .hamming_distance(peer)
        .map_err(|_| SiftError::BasisCount(peer.len(), own.len()))?;
    let n = own.len();
    Ok(QberEstimate {
        e: if n == 0 { 0.0 } else { mismatches as f64 / n as f64 },
        n_disclosed: n,
        mismatches,
    })
}

/// Picks bits at `positions` out of `key`.
pub fn gather(key: &BitBlock, positions: &[usize]) -> BitBlock {
    BitBlock::from_bools(positions.iter().map(|&p| key.get(p)))
}

/// Estimates the QBER on a sample of both keys and removes the sample.
pub fn estimate_qber(s: &SiftResult, fraction: f64, seed: &[u8]) -> Result<(QberEstimate, SiftResult), SiftError> {
    if s.n_sifted == 0 {
        return Err(SiftError::InsufficientKey);
    }
    let pos = sample_positions(s.n_sifted, fraction, seed)?;
    let est = qber_from_samples(&gather(&s.key_a, &pos), &gather(&s.key_b, &pos))?;
    let mut bases = Vec::with_capacity(s.n_sifted - pos.len());
    let mut skip = pos.iter().peekable();
    for (i, &b) in s.bases.iter().enumerate() {
        if skip.peek() == Some(&&i) {
            skip.next();
        } else {
            bases.push(b);
        }
    }
    let remaining = SiftResult {
        key_a: s.key_a.remove_positions(&pos),
        key_b: s.key_b.remove_positions(&pos),
        n_coinc_total: s.n_coinc_total,
        n_sifted: s.n_sifted - pos.len(),
        bases,
    };
    Ok((est, remaining))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tags::{DetectorChannel, TimeTag};
    use proptest::prelude::*;
    use rand::Rng;

    fn streams(pairs: &[(DetectorChannel, DetectorChannel)]) -> (TagStream, TagStream, Vec<Coincidence>) {
        let a = TagStream::from_tags(
            Party::Alice,
            "t",
            pairs.iter().enumerate().map(|(i, p)| TimeTag::new(i as u64 * 10, p.0)),
        )
        .unwrap();
        let b = TagStream::from_tags(
            Party::Bob,
            "t",
            pairs.iter().enumerate().map(|(i, p)| TimeTag::new(i as u64 * 10, p.1)),
        )
        .unwrap();
        let c = (0..pairs.len() as u32)
            .map(|i| Coincidence { idx_a: i, idx_b: i, delta: 0 })
            .collect();
        (a, b, c)
    }

    #[test]
    fn anti_correlated_hv_gives_equal_keys() {
        use DetectorChannel::*;
        let (a, b, c) = streams(&[(H, V), (V, H), (D, D), (A, A), (H, V)]);
        let s = sift(&c, &a, &b).unwrap();
        assert_eq!(s.n_sifted, 5);
        assert_eq!(s.key_a, s.key_b);
        assert_eq!(s.key_a, BitBlock::from_bit_str("01010"));
    }

    #[test]
    fn mixed_bases_only_is_empty() {
        use DetectorChannel::*;
        let (a, b, c) = streams(&[(H, D), (V, A), (D, H), (A, V)]);
        let s = sift(&c, &a, &b).unwrap();
        assert_eq!((s.n_coinc_total, s.n_sifted), (4, 0));
        assert!(s.key_a.is_empty());
        assert_eq!(
            estimate_qber(&s, 0.05, b"x").unwrap_err(),
            SiftError::InsufficientKey
        );
    }

    #[test]
    fn side_local_sifting_matches_joint() {
        let mut rng = seeded(5);
        let pairs: Vec<_> = (0..500)
            .map(|_| {
                (
                    DetectorChannel::ALL[rng.random_range(0..4)],
                    DetectorChannel::ALL[rng.random_range(0..4)],
                )
            })
            .collect();
        let (a, b, c) = streams(&pairs);
        let joint = sift(&c, &a, &b).unwrap();
        let ia: Vec<u32> = c.iter().map(|x| x.idx_a).collect();
        let ib: Vec<u32> = c.iter().map(|x| x.idx_b).collect();
        let bases_a: Vec<Basis> = ia.iter().map(|&i| a.channels()[i as usize].basis()).collect();
        let bases_b: Vec<Basis> = ib.iter().map(|&i| b.channels()[i as usize].basis()).collect();
        let (ka, kept_a) = sift_side(Party::Alice, &a, &ia, &bases_b).unwrap();
        let (kb, kept_b) = sift_side(Party::Bob, &b, &ib, &bases_a).unwrap();
        assert_eq!(kept_a, kept_b);
        assert_eq!(ka, joint.key_a);
        assert_eq!(kb, joint.key_b);
        assert!(sift_side(Party::Bob, &b, &ib[1..], &bases_a).is_err());
    }

    #[test]
    fn full_disclosure_is_exact() {
        let mut rng = seeded(2);
        let key_a = BitBlock::random(1000, &mut rng);
        let mut key_b = key_a.clone();
        for i in [3, 77, 500, 999] {
            key_b.flip(i);
        }
        let s = SiftResult {
            n_coinc_total: 2000,
            n_sifted: 1000,
            bases: vec![Basis::HV; 1000],
            key_a,
            key_b,
        };
        let (est, rest) = estimate_qber(&s, 1.0, b"seed").unwrap();
        assert_eq!(est.e, 0.004);
        assert_eq!(est.n_disclosed, 1000);
        assert_eq!(rest.n_sifted, 0);
        assert!(rest.key_a.is_empty());
    }

    #[test]
    fn sample_positions_round_and_invalid_fraction() {
        assert_eq!(sample_positions(1000, 0.05, b"s").unwrap().len(), 50);
        assert_eq!(sample_positions(30, 0.05, b"s").unwrap().len(), 2);
        assert_eq!(sample_positions(1000, 0.05, b"s"), sample_positions(1000, 0.05, b"s"));
        assert_ne!(sample_positions(1000, 0.05, b"s"), sample_positions(1000, 0.05, b"t"));
        assert!(sample_positions(10, 0.0, b"s").is_err());
        assert!(sample_positions(10, 1.5, b"s").is_err());
    }

    proptest! {
        #[test]
        fn disclosure_partitions_the_key(n in 1usize..600, frac in 0.01f64..1.0, seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let key_a = BitBlock::random(n, &mut rng);
            let key_b = BitBlock::bernoulli(n, 0.1, &mut rng).xor(&key_a).unwrap();
            let s = SiftResult {
                n_coinc_total: 2 * n,
                n_sifted: n,
                bases: (0..n).map(|i| if i % 3 == 0 { Basis::DA } else { Basis::HV }).collect(),
                key_a: key_a.clone(),
                key_b,
            };
            let seed_bytes = seed.to_be_bytes();
            let pos = sample_positions(n, frac, &seed_bytes).unwrap();
            let (est, rest) = estimate_qber(&s, frac, &seed_bytes).unwrap();
            prop_assert_eq!(est.n_disclosed, (frac * n as f64).round() as usize);
            prop_assert_eq!(est.n_disclosed + rest.n_sifted, n);
            prop_assert_eq!(rest.bases.len(), rest.n_sifted);
            // re-interleave disclosed and remaining bits to recover the key
            let mut rebuilt = BitBlock::new();
            let (mut d, mut r) = (0, 0);
            let disclosed = gather(&key_a, &pos);
            for i in 0..n {
                if d < pos.len() && pos[d] == i {
                    rebuilt.push(disclosed.get(d));
                    d += 1;
                } else {
                    rebuilt.push(rest.key_a.get(r));
                    r += 1;
                }
            }
            prop_assert_eq!(rebuilt, key_a);
        }
    }
}
