//! Synchronized key buffer with a reduced ETSI GS QKD 004 style interface.
//!
//! Each endpoint pushes the same final keys in the same order, so the
//! buffers on both sides hold identical bit streams. Applications pull key
//! segments with [`KeyStore::get_key`]; the peer application fetches the
//! matching segment with [`KeyStore::get_key_with_id`]. One link, one
//! session and one client are supported at a time.
//!
//! The buffer is a bit stream split into three consecutive regions:
//! consumed, reserved for the open session, and available.

pub mod server;

use crate::bits::BitBlock;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub type KeyId = [u8; 16];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KmsError {
    #[error("busy: a session is already open on this link")]
    Busy,
    #[error("unknown link {from} -> {to}")]
    UnknownLink { from: String, to: String },
    #[error("unknown ksid {0}")]
    UnknownKsid(String),
    #[error("key starvation: requested {requested} bits, {available} available")]
    Starvation { requested: usize, available: usize },
    #[error("unknown key id {0}")]
    UnknownKeyId(String),
    #[error("duplicate key id {0}")]
    DuplicateKeyId(String),
    #[error("requested key length must be positive")]
    ZeroLength,
    #[error("snapshot: {0}")]
    Snapshot(String),
}

impl KmsError {
    /// Status string used on the socket API.
    pub fn status(&self) -> &'static str {
        match self {
            KmsError::Busy => "busy",
            KmsError::UnknownLink { .. } => "unknown_link",
            KmsError::UnknownKsid(_) => "unknown_ksid",
            KmsError::Starvation { .. } => "starvation",
            KmsError::UnknownKeyId(_) => "unknown_key_id",
            KmsError::DuplicateKeyId(_) => "duplicate_key_id",
            KmsError::ZeroLength => "bad_request",
            KmsError::Snapshot(_) => "error",
        }
    }
}

pub fn key_id_hex(id: &KeyId) -> String {
    id.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_key_id(s: &str) -> Option<KeyId> {
    if s.len() != 32 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 16];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

fn digest16(label: &str, parts: &[&[u8]]) -> KeyId {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p);
    }
    let full = h.finalize();
    let mut id = [0u8; 16];
    id.copy_from_slice(&full[..16]);
    id
}

/// Id of the `index`-th key produced by the session with `nonce`.
pub fn session_key_id(nonce: &[u8], index: u64) -> KeyId {
    digest16("eqkd-kms-key", &[nonce, &index.to_be_bytes()])
}

fn segment_id(stored: &KeyId, offset: usize, length: usize) -> KeyId {
    digest16("eqkd-kms-segment", &[stored, &(offset as u64).to_be_bytes(), &(length as u64).to_be_bytes()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyStatus {
    Available,
    Reserved,
    Consumed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredKey {
    pub key_id: KeyId,
    pub bits: BitBlock,
    /// Milliseconds since the Unix epoch.
    pub created: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qos {
    /// Bits set aside for the session at open time.
    #[serde(default)]
    pub reserve_bits: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KmsSession {
    pub ksid: String,
    pub source: String,
    pub destination: String,
    pub qos: Qos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveredKey {
    pub key_id: KeyId,
    pub length: usize,
    /// `ceil(length / 8)` bytes, trailing bits zero.
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub available: usize,
    pub reserved: usize,
    pub consumed: usize,
    pub pushed: usize,
}

#[derive(Debug, Clone)]
pub struct KeyStore {
    local: String,
    remote: String,
    keys: Vec<StoredKey>,
    /// Global bit offset where each stored key starts.
    starts: Vec<usize>,
    total: usize,
    consumed_end: usize,
    reserved_end: usize,
    session: Option<KmsSession>,
    ksid_counter: u64,
}

impl KeyStore {
    /// A store serving the link between `local` and `remote` (either
    /// direction).
    pub fn new(local: impl Into<String>, remote: impl Into<String>) -> Self {
        Self {
            local: local.into(),
            remote: remote.into(),
            keys: Vec::new(),
            starts: Vec::new(),
            total: 0,
            consumed_end: 0,
            reserved_end: 0,
            session: None,
            ksid_counter: 0,
        }
    }

    pub fn push(&mut self, key_id: KeyId, bits: BitBlock) -> Result<(), KmsError> {
        if self.keys.iter().any(|k| k.key_id == key_id) {
            return Err(KmsError::DuplicateKeyId(key_id_hex(&key_id)));
        }
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        self.starts.push(self.total);
        self.total += bits.len();
        self.keys.push(StoredKey { key_id, bits, created });
        Ok(())
    }

    pub fn keys(&self) -> &[StoredKey] {
        &self.keys
    }

    /// Status of stored key `i`; a partly consumed key reports the state of
    /// its unconsumed remainder.
    pub fn status(&self, i: usize) -> KeyStatus {
        let (s, e) = (self.starts[i], self.starts[i] + self.keys[i].bits.len());
        if e <= self.consumed_end {
            KeyStatus::Consumed
        } else if s < self.reserved_end && self.consumed_end < self.reserved_end {
            KeyStatus::Reserved
        } else {
            KeyStatus::Available
        }
    }

    pub fn totals(&self) -> Totals {
        Totals {
            available: self.total - self.reserved_end,
            reserved: self.reserved_end - self.consumed_end,
            consumed: self.consumed_end,
            pushed: self.keys.iter().map(|k| k.bits.len()).sum(),
        }
    }

    pub fn session(&self) -> Option<&KmsSession> {
        self.session.as_ref()
    }

    fn link_known(&self, source: &str, destination: &str) -> bool {
        (source == self.local && destination == self.remote) || (source == self.remote && destination == self.local)
    }

    pub fn open_connect(&mut self, source: &str, destination: &str, qos: Qos) -> Result<String, KmsError> {
        if !self.link_known(source, destination) {
            return Err(KmsError::UnknownLink { from: source.into(), to: destination.into() });
        }
        if self.session.is_some() {
            return Err(KmsError::Busy);
        }
        self.ksid_counter += 1;
        let ksid = key_id_hex(&digest16(
            "eqkd-kms-ksid",
            &[source.as_bytes(), destination.as_bytes(), &self.ksid_counter.to_be_bytes()],
        ));
        let reserve = qos.reserve_bits.min(self.total - self.reserved_end);
        self.reserved_end += reserve;
        self.session = Some(KmsSession { ksid: ksid.clone(), source: source.into(), destination: destination.into(), qos });
        Ok(ksid)
    }

    fn check(&self, ksid: &str) -> Result<(), KmsError> {
        match &self.session {
            Some(s) if s.ksid == ksid => Ok(()),
            _ => Err(KmsError::UnknownKsid(ksid.into())),
        }
    }

    /// The segment that the next request of `length` bits would return.
    fn next_segment(&self, length: usize) -> Result<(KeyId, BitBlock), KmsError> {
        if length == 0 {
            return Err(KmsError::ZeroLength);
        }
        let available = self.total - self.consumed_end;
        if length > available {
            return Err(KmsError::Starvation { requested: length, available });
        }
        let first = self.starts.partition_point(|&s| s <= self.consumed_end) - 1;
        let first = (first..self.keys.len()).find(|&i| self.starts[i] + self.keys[i].bits.len() > self.consumed_end).unwrap_or(first);
        let mut bits = BitBlock::with_capacity(length);
        let mut i = first;
        let mut pos = self.consumed_end;
        while bits.len() < length {
            let k = &self.keys[i];
            let off = pos - self.starts[i];
            let take = (k.bits.len() - off).min(length - bits.len());
            bits.extend_from(&k.bits.slice(off, off + take));
            pos += take;
            i += 1;
        }
        let id = segment_id(&self.keys[first].key_id, self.consumed_end - self.starts[first], length);
        Ok((id, bits))
    }

    fn deliver(&mut self, id: KeyId, bits: BitBlock) -> DeliveredKey {
        self.consumed_end += bits.len();
        self.reserved_end = self.reserved_end.max(self.consumed_end);
        DeliveredKey { key_id: id, length: bits.len(), bytes: bits.to_bytes() }
    }

    /// Next `length` bits; starvation leaves the buffer unchanged.
    pub fn get_key(&mut self, ksid: &str, length: usize) -> Result<DeliveredKey, KmsError> {
        self.check(ksid)?;
        let (id, bits) = self.next_segment(length)?;
        Ok(self.deliver(id, bits))
    }

    /// The peer's side of [`get_key`](Self::get_key): returns the segment
    /// only if it is the one identified by `key_id`.
    pub fn get_key_with_id(&mut self, ksid: &str, key_id: &KeyId, length: usize) -> Result<DeliveredKey, KmsError> {
        self.check(ksid)?;
        let (id, bits) = self.next_segment(length)?;
        if &id != key_id {
            return Err(KmsError::UnknownKeyId(key_id_hex(key_id)));
        }
        Ok(self.deliver(id, bits))
    }

    pub fn close(&mut self, ksid: &str) -> Result<(), KmsError> {
        self.check(ksid)?;
        self.session = None;
        self.reserved_end = self.consumed_end;
        Ok(())
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<(), KmsError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let snap = Snapshot {
            local: self.local.clone(),
            remote: self.remote.clone(),
            consumed: self.consumed_end,
            keys: self
                .keys
                .iter()
                .map(|k| SnapshotKey {
                    key_id: key_id_hex(&k.key_id),
                    bits: k.bits.len(),
                    data_b64: b64.encode(k.bits.to_bytes()),
                    created: k.created,
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&snap).map_err(|e| KmsError::Snapshot(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| KmsError::Snapshot(e.to_string()))
    }

    pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Self, KmsError> {
        let text = std::fs::read_to_string(path).map_err(|e| KmsError::Snapshot(e.to_string()))?;
        let snap: Snapshot = serde_json::from_str(&text).map_err(|e| KmsError::Snapshot(e.to_string()))?;
        let b64 = base64::engine::general_purpose::STANDARD;
        let mut store = KeyStore::new(snap.local, snap.remote);
        for k in snap.keys {
            let id = parse_key_id(&k.key_id).ok_or_else(|| KmsError::Snapshot(format!("bad key id {}", k.key_id)))?;
            let data = b64.decode(&k.data_b64).map_err(|e| KmsError::Snapshot(e.to_string()))?;
            if data.len() != k.bits.div_ceil(8) {
                return Err(KmsError::Snapshot(format!("key {} length mismatch", k.key_id)));
            }
            store.push(id, BitBlock::from_bytes(&data, k.bits))?;
            store.keys.last_mut().expect("just pushed").created = k.created;
        }
        if snap.consumed > store.total {
            return Err(KmsError::Snapshot("consumed beyond stored bits".into()));
        }
        store.consumed_end = snap.consumed;
        store.reserved_end = snap.consumed;
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    local: String,
    remote: String,
    consumed: usize,
    keys: Vec<SnapshotKey>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotKey {
    key_id: String,
    bits: usize,
    data_b64: String,
    created: u64,
}
