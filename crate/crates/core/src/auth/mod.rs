//! Delayed authentication of the classical channel.
//!
//! Every message sent or received is folded into a per-direction
//! [`Transcript`] with the polynomial update `t ← (t ⊕ m)·k` over GF(2^n),
//! one n-bit block at a time. At the end of a session each transcript is
//! one-time-padded with fresh pre-shared key material ([`finalize_mac`]) and
//! the tags are exchanged and compared.
//!
//! Message chunking: a message is split into n/8-byte blocks read
//! big-endian, the last block zero-padded on the right, followed by one
//! block holding the message byte length. An empty message therefore
//! contributes only its length block.

pub mod gf;

pub use gf::{FieldSize, GfElement, GfError};

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum AuthError {
    #[error("insufficient pre-shared key: need {needed} bytes, {available} left")]
    InsufficientKey { needed: usize, available: usize },
    #[error("key ledger: {0}")]
    Ledger(String),
    #[error(transparent)]
    Gf(#[from] GfError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Running polynomial hash of one direction of the conversation.
#[derive(Debug, Clone)]
pub struct Transcript {
    k: GfElement,
    t: GfElement,
    n_blocks: u64,
}

impl Transcript {
    pub fn new(k: GfElement) -> Self {
        Self { k, t: GfElement::zero(k.size()), n_blocks: 0 }
    }

    pub fn size(&self) -> FieldSize {
        self.k.size()
    }

    pub fn state(&self) -> GfElement {
        self.t
    }

    pub fn n_blocks(&self) -> u64 {
        self.n_blocks
    }

    /// One step of `t ← (t ⊕ m)·k`.
    pub fn absorb_block(&mut self, m: &GfElement) -> Result<(), GfError> {
        self.t = self.t.add(m)?.mul(&self.k)?;
        self.n_blocks += 1;
        Ok(())
    }

    pub fn update(&mut self, msg: &[u8]) {
        let size = self.size();
        for chunk in msg.chunks(size.bytes()) {
            let m = GfElement::from_be_bytes_padded(size, chunk);
            self.t = self.t.xor(&m).mul_unchecked(&self.k);
        }
        let len = GfElement::from_u64(size, msg.len() as u64);
        self.t = self.t.xor(&len).mul_unchecked(&self.k);
        self.n_blocks += msg.len().div_ceil(size.bytes()) as u64 + 1;
    }
}

/// One consumption (or replenishment) of pre-shared key material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub offset: u64,
    pub length: u64,
    pub purpose: String,
}

pub const REPLENISH: &str = "replenish";

/// Pre-shared key material with an append-only usage ledger.
///
/// Material is consumed strictly front to back, so two endpoints holding
/// the same key file and taking the same sequence of requests read the
/// same bytes. A file-backed ledger is one `offset length purpose` line per
/// entry; reopening resumes after the last consumed byte.
#[derive(Debug)]
pub struct AuthKeys {
    material: Vec<u8>,
    cursor: usize,
    ledger: Vec<LedgerEntry>,
    ledger_file: Option<File>,
    key_path: Option<PathBuf>,
}

impl AuthKeys {
    pub fn from_bytes(material: Vec<u8>) -> Self {
        Self { material, cursor: 0, ledger: Vec::new(), ledger_file: None, key_path: None }
    }

    /// Opens a raw key file and its ledger (created if missing).
    pub fn open(key_path: impl AsRef<Path>, ledger_path: impl AsRef<Path>) -> Result<Self, AuthError> {
        let material = std::fs::read(key_path.as_ref())?;
        let mut ledger = Vec::new();
        if ledger_path.as_ref().exists() {
            for (i, line) in BufReader::new(File::open(ledger_path.as_ref())?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                ledger.push(parse_entry(&line).ok_or_else(|| AuthError::Ledger(format!("line {}: {line:?}", i + 1)))?);
            }
        }
        let cursor = ledger
            .iter()
            .filter(|e| e.purpose != REPLENISH)
            .map(|e| (e.offset + e.length) as usize)
            .max()
            .unwrap_or(0);
        if cursor > material.len() {
            return Err(AuthError::Ledger(format!("ledger consumed {cursor} bytes but key file holds {}", material.len())));
        }
        let ledger_file = OpenOptions::new().create(true).append(true).open(ledger_path.as_ref())?;
        Ok(Self {
            material,
            cursor,
            ledger,
            ledger_file: Some(ledger_file),
            key_path: Some(key_path.as_ref().to_path_buf()),
        })
    }

    pub fn remaining(&self) -> usize {
        self.material.len() - self.cursor
    }

    pub fn consumed(&self) -> usize {
        self.cursor
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    fn record(&mut self, entry: LedgerEntry) -> Result<(), AuthError> {
        if let Some(f) = self.ledger_file.as_mut() {
            writeln!(f, "{} {} {}", entry.offset, entry.length, entry.purpose)?;
            f.flush()?;
        }
        self.ledger.push(entry);
        Ok(())
    }

    /// Takes the next `len` unused bytes.
    pub fn take(&mut self, len: usize, purpose: &str) -> Result<Vec<u8>, AuthError> {
        if len > self.remaining() {
            return Err(AuthError::InsufficientKey { needed: len, available: self.remaining() });
        }
        let out = self.material[self.cursor..self.cursor + len].to_vec();
        let entry = LedgerEntry { offset: self.cursor as u64, length: len as u64, purpose: sanitize(purpose) };
        self.record(entry)?;
        self.cursor += len;
        Ok(out)
    }

    pub fn take_element(&mut self, size: FieldSize, purpose: &str) -> Result<GfElement, AuthError> {
        let bytes = self.take(size.bytes(), purpose)?;
        Ok(GfElement::from_be_bytes(size, &bytes)?)
    }

    /// Appends fresh material, e.g. from a produced final key.
    pub fn replenish(&mut self, bytes: &[u8]) -> Result<(), AuthError> {
        if let Some(path) = &self.key_path {
            let mut f = OpenOptions::new().append(true).open(path)?;
            f.write_all(bytes)?;
            f.flush()?;
        }
        let entry = LedgerEntry { offset: self.material.len() as u64, length: bytes.len() as u64, purpose: REPLENISH.into() };
        self.material.extend_from_slice(bytes);
        self.record(entry)
    }
}

fn sanitize(purpose: &str) -> String {
    purpose.split_whitespace().collect::<Vec<_>>().join("_")
}

fn parse_entry(line: &str) -> Option<LedgerEntry> {
    let mut it = line.split_whitespace();
    let offset = it.next()?.parse().ok()?;
    let length = it.next()?.parse().ok()?;
    let purpose = it.next()?.to_string();
    if it.next().is_some() {
        return None;
    }
    Some(LedgerEntry { offset, length, purpose })
}

/// `tag = t ⊕ k_otp` with a fresh one-time pad from the key store.
pub fn finalize_mac(tr: &Transcript, keys: &mut AuthKeys, purpose: &str) -> Result<GfElement, AuthError> {
    let otp = keys.take_element(tr.size(), purpose)?;
    Ok(tr.state().xor(&otp))
}

/// Tags for both directions as seen from one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectionTags {
    pub outgoing: GfElement,
    pub incoming: GfElement,
}

impl DirectionTags {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.outgoing.to_be_bytes();
        out.extend(self.incoming.to_be_bytes());
        out
    }

    pub fn from_bytes(size: FieldSize, bytes: &[u8]) -> Result<Self, GfError> {
        let nb = size.bytes();
        if bytes.len() != 2 * nb {
            return Err(GfError::ByteLength { expected: 2 * nb, got: bytes.len() });
        }
        Ok(Self {
            outgoing: GfElement::from_be_bytes(size, &bytes[..nb])?,
            incoming: GfElement::from_be_bytes(size, &bytes[nb..])?,
        })
    }
}

/// True iff the peer's outgoing tag equals our incoming tag and vice versa.
pub fn tags_agree(local: &DirectionTags, peer: &DirectionTags) -> bool {
    let diff = |a: &GfElement, b: &GfElement| {
        a.to_be_bytes().iter().zip(b.to_be_bytes()).fold(0u8, |acc, (x, y)| acc | (x ^ y))
    };
    (diff(&local.outgoing, &peer.incoming) | diff(&local.incoming, &peer.outgoing)) == 0
        && local.outgoing.size() == peer.incoming.size()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::{Rng, RngCore};

    /// Σ m_i·k^(L−i) over the padded blocks, computed by explicit powers.
    fn horner_oracle(k: &GfElement, msgs: &[Vec<u8>]) -> GfElement {
        let size = k.size();
        let mut blocks = Vec::new();
        for m in msgs {
            for c in m.chunks(size.bytes()) {
                let mut b = c.to_vec();
                b.resize(size.bytes(), 0);
                blocks.push(GfElement::from_be_bytes(size, &b).unwrap());
            }
            blocks.push(GfElement::from_u64(size, m.len() as u64));
        }
        let l = blocks.len() as u64;
        blocks.iter().enumerate().fold(GfElement::zero(size), |acc, (i, b)| {
            acc.add(&b.mul(&k.pow(l - i as u64)).unwrap()).unwrap()
        })
    }

    #[test]
    fn single_block_step() {
        let mut rng = seeded(4);
        let k = GfElement::random(FieldSize::N64, &mut rng);
        let m = GfElement::random(FieldSize::N64, &mut rng);
        let mut tr = Transcript::new(k);
        tr.absorb_block(&m).unwrap();
        assert_eq!(tr.state(), m.mul(&k).unwrap());
    }

    #[test]
    fn empty_message_is_only_a_length_block() {
        let k = GfElement::from_u64(FieldSize::N32, 0x1234_5678);
        let mut a = Transcript::new(k);
        a.update(b"");
        assert_eq!(a.n_blocks(), 1);
        assert_eq!(a.state(), GfElement::zero(FieldSize::N32));
        a.update(b"");
        // (0 ⊕ 0)·k stays zero: the length block of an empty message is zero
        assert!(a.state().is_zero());
        let mut b = Transcript::new(k);
        b.update(b"x");
        assert!(!b.state().is_zero());
    }

    #[test]
    fn matches_polynomial_oracle() {
        let mut rng = seeded(9);
        for size in FieldSize::ALL {
            for _ in 0..20 {
                let k = GfElement::random(size, &mut rng);
                let msgs: Vec<Vec<u8>> = (0..rng.random_range(1..4))
                    .map(|_| {
                        let mut m = vec![0u8; rng.random_range(0..100)];
                        rng.fill_bytes(&mut m);
                        m
                    })
                    .collect();
                let mut tr = Transcript::new(k);
                for m in &msgs {
                    tr.update(m);
                }
                assert_eq!(tr.state(), horner_oracle(&k, &msgs), "{size}");
            }
        }
    }

    #[test]
    fn chunking_is_message_aware() {
        let k = GfElement::from_u64(FieldSize::N32, 0xdead_beef);
        let mut one = Transcript::new(k);
        one.update(b"abcdef");
        let mut two = Transcript::new(k);
        two.update(b"abc");
        two.update(b"def");
        assert_ne!(one.state(), two.state());
    }

    #[test]
    fn mac_round_trip_and_fresh_pads() {
        let mut rng = seeded(11);
        let mut material = vec![0u8; 48];
        rng.fill_bytes(&mut material);
        let mut keys = AuthKeys::from_bytes(material.clone());
        let k = keys.take_element(FieldSize::N128, "hash").unwrap();
        let mut tr = Transcript::new(k);
        tr.update(b"sifting bases");
        let t1 = finalize_mac(&tr, &mut keys, "otp").unwrap();
        let t2 = finalize_mac(&tr, &mut keys, "otp").unwrap();
        assert_ne!(t1, t2);
        let otp1 = GfElement::from_be_bytes(FieldSize::N128, &material[16..32]).unwrap();
        assert_eq!(t1.xor(&otp1), tr.state());
        assert!(matches!(
            finalize_mac(&tr, &mut keys, "otp"),
            Err(AuthError::InsufficientKey { needed: 16, available: 0 })
        ));
        assert_eq!(keys.ledger().len(), 3);
        assert_eq!(keys.consumed(), 48);
        let zero = Transcript::new(GfElement::zero(FieldSize::N32));
        let mut zeros = AuthKeys::from_bytes(vec![0; 4]);
        assert!(finalize_mac(&zero, &mut zeros, "otp").unwrap().is_zero());
    }

    #[test]
    fn insufficient_key_message() {
        let mut keys = AuthKeys::from_bytes(vec![1, 2, 3]);
        let e = keys.take(4, "otp").unwrap_err();
        assert!(e.to_string().starts_with("insufficient pre-shared key"));
        assert_eq!(keys.remaining(), 3);
    }

    #[test]
    fn file_ledger_resumes_and_replenishes() {
        let dir = tempfile::tempdir().unwrap();
        let key = dir.path().join("psk.bin");
        let ledger = dir.path().join("psk.ledger");
        std::fs::write(&key, (0u8..40).collect::<Vec<_>>()).unwrap();
        {
            let mut keys = AuthKeys::open(&key, &ledger).unwrap();
            assert_eq!(keys.take(16, "hash key").unwrap()[0], 0);
            keys.replenish(&[0xaa; 8]).unwrap();
        }
        let mut keys = AuthKeys::open(&key, &ledger).unwrap();
        assert_eq!(keys.consumed(), 16);
        assert_eq!(keys.remaining(), 32);
        assert_eq!(keys.take(4, "otp").unwrap(), vec![16, 17, 18, 19]);
        let text = std::fs::read_to_string(&ledger).unwrap();
        assert_eq!(text, "0 16 hash_key\n40 8 replenish\n16 4 otp\n");
        std::fs::write(&ledger, "garbage\n").unwrap();
        assert!(matches!(AuthKeys::open(&key, &ledger), Err(AuthError::Ledger(_))));
    }

    #[test]
    fn tags_compare_crosswise() {
        let mut rng = seeded(3);
        let x = GfElement::random(FieldSize::N64, &mut rng);
        let y = GfElement::random(FieldSize::N64, &mut rng);
        let alice = DirectionTags { outgoing: x, incoming: y };
        let bob = DirectionTags { outgoing: y, incoming: x };
        assert!(tags_agree(&alice, &bob));
        assert!(!tags_agree(&alice, &alice));
        let back = DirectionTags::from_bytes(FieldSize::N64, &alice.to_bytes()).unwrap();
        assert_eq!(back, alice);
    }

    #[test]
    fn single_bit_tamper_changes_the_tag() {
        let mut rng = seeded(21);
        for _ in 0..2000 {
            let k = GfElement::random(FieldSize::N32, &mut rng);
            let mut msg = vec![0u8; rng.random_range(1..64)];
            rng.fill_bytes(&mut msg);
            let mut honest = Transcript::new(k);
            honest.update(&msg);
            let bit = rng.random_range(0..msg.len() * 8);
            msg[bit / 8] ^= 1 << (bit % 8);
            let mut tampered = Transcript::new(k);
            tampered.update(&msg);
            assert_ne!(honest.state(), tampered.state());
        }
    }

    #[test]
    fn wrong_hash_key_disagrees() {
        let mut rng = seeded(8);
        let k1 = GfElement::random(FieldSize::N128, &mut rng);
        let k2 = GfElement::random(FieldSize::N128, &mut rng);
        let (mut a, mut b) = (Transcript::new(k1), Transcript::new(k2));
        a.update(b"parities");
        b.update(b"parities");
        assert_ne!(a.state(), b.state());
    }
}
