//! The two-party post-processing dialogue.
//!
//! One call to [`run_session`] walks an endpoint through
//!
//! ```text
//! INIT → SYNCED → SIFTED → ESTIMATED → RECONCILED → CONFIRMED → AMPLIFIED → AUTHENTICATED
//! ```
//!
//! with a transition to ABORTED from any stage. Every frame except
//! `AUTH_TAG` is folded into the per-direction transcript before it is
//! used; the final key is released only after both tags agree.
//!
//! Message flow (B = Bob, A = Alice):
//!
//! | stage     | frames |
//! |-----------|--------|
//! | sync      | B→A `SYNC_DATA`×k (quantised tag times), A→B `SYNC_DATA` (nonce, matched Bob indices, bin table) |
//! | sift      | B→A, A→B `SIFT_BASES` |
//! | estimate  | A→B `ERR_SAMPLE` (seed, Alice sample), B→A `ERR_SAMPLE` |
//! | reconcile | B→A `CASCADE_ACK` (query), A→B `CASCADE_PARITY`, … , B→A empty `CASCADE_ACK` |
//! | confirm   | A→B `CONFIRM_HASH` (r, hash), B→A `CONFIRM_HASH` |
//! | amplify   | A→B, B→A `DISCLOSE_COUNT`; A→B `PA_SEED` |
//! | auth      | A→B `AUTH_TAG`, B→A `AUTH_TAG` once A's verifies; A then closes the channel |

pub mod channel;
pub mod frame;
pub mod stats;
mod wire;

pub use channel::{loopback_pair, Channel, ChannelError, Interceptor, LoopbackChannel, TcpChannel};
pub use frame::{Frame, FrameError, MsgType};
pub use stats::{BinCounts, StatsRow};

use crate::auth::{finalize_mac, tags_agree, AuthError, AuthKeys, DirectionTags, FieldSize, GfElement, Transcript};
use crate::bits::BitBlock;
use crate::cascade::{decode_parities, encode_parities, CascadeAlice, CascadeBob, CascadeConfig, CascadeError, Query};
use crate::kms::{session_key_id, KeyId, KeyStore};
use crate::privacy::{
    confirm_hash, final_length, toeplitz_pa, FinalKeyParams, PaSeed, PrivacyError, CONFIRM_BITS, CONFIRM_FIELD,
    DEFAULT_N_MAR,
};
use crate::rng::{derive_seed, DetRng};
use crate::sifting::{gather, qber_from_samples, sample_positions, sift_side, SiftError};
use crate::sync::{coarse_offset, fine_sync, match_coincidences, CoarseConfig, FineConfig, SyncError, PS_PER_S};
use crate::tags::{Basis, Party, TagStream};
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant};
use wire::{put_bits, put_u32, put_u64, put_varint, Malformed, Reader};

/// Tags per `SYNC_DATA` chunk.
pub const SYNC_CHUNK: usize = 400_000;
pub const NONCE_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    #[serde(alias = "sync")]
    Synced,
    #[serde(alias = "sift")]
    Sifted,
    #[serde(alias = "estimate")]
    Estimated,
    #[serde(alias = "reconcile")]
    Reconciled,
    #[serde(alias = "confirm")]
    Confirmed,
    #[serde(alias = "amplify")]
    Amplified,
    #[serde(alias = "auth", alias = "authenticate")]
    Authenticated,
    Aborted,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Init,
        Stage::Synced,
        Stage::Sifted,
        Stage::Estimated,
        Stage::Reconciled,
        Stage::Confirmed,
        Stage::Amplified,
        Stage::Authenticated,
        Stage::Aborted,
    ];

    /// The successor on the success path.
    pub fn next(self) -> Option<Stage> {
        match self {
            Stage::Init => Some(Stage::Synced),
            Stage::Synced => Some(Stage::Sifted),
            Stage::Sifted => Some(Stage::Estimated),
            Stage::Estimated => Some(Stage::Reconciled),
            Stage::Reconciled => Some(Stage::Confirmed),
            Stage::Confirmed => Some(Stage::Amplified),
            Stage::Amplified => Some(Stage::Authenticated),
            Stage::Authenticated | Stage::Aborted => None,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::Authenticated | Stage::Aborted)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Synced => "synced",
            Stage::Sifted => "sifted",
            Stage::Estimated => "estimated",
            Stage::Reconciled => "reconciled",
            Stage::Confirmed => "confirmed",
            Stage::Amplified => "amplified",
            Stage::Authenticated => "authenticated",
            Stage::Aborted => "aborted",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    /// Accepts stage names and the step verbs (`sync`, `sift`, `estimate`,
    /// `reconcile`, `confirm`, `amplify`, `auth`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase();
        let verb = match s.as_str() {
            "sync" => Some(Stage::Synced),
            "sift" => Some(Stage::Sifted),
            "estimate" => Some(Stage::Estimated),
            "reconcile" => Some(Stage::Reconciled),
            "confirm" => Some(Stage::Confirmed),
            "amplify" => Some(Stage::Amplified),
            "auth" | "authenticate" => Some(Stage::Authenticated),
            _ => None,
        };
        verb.or_else(|| Stage::ALL.into_iter().find(|st| st.name() == s))
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    role: Party,
    stage: Stage,
    n_dis: usize,
    history: Vec<Stage>,
}

impl SessionState {
    pub fn new(role: Party) -> Self {
        Self { role, stage: Stage::Init, n_dis: 0, history: vec![Stage::Init] }
    }

    pub fn role(&self) -> Party {
        self.role
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Bits revealed on the public channel so far.
    pub fn n_dis(&self) -> usize {
        self.n_dis
    }

    pub fn history(&self) -> &[Stage] {
        &self.history
    }

    /// Moves to `to`, which must be the successor of the current stage.
    pub fn advance(&mut self, to: Stage) {
        assert_eq!(self.stage.next(), Some(to), "illegal transition {} -> {to}", self.stage);
        self.stage = to;
        self.history.push(to);
    }

    pub fn abort(&mut self) {
        if !self.stage.is_terminal() {
            self.stage = Stage::Aborted;
            self.history.push(Stage::Aborted);
        }
    }

    fn disclose(&mut self, bits: usize) {
        self.n_dis += bits;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    /// Full coincidence window, ps.
    pub window_ps: u64,
    /// Resolution Bob's tag times are quantised to for transmission, ps.
    pub sync_quantum_ps: u64,
    pub sample_fraction: f64,
    /// Estimated QBER above which the session aborts.
    pub max_qber: f64,
    pub cascade: CascadeConfig,
    pub n_mar: usize,
    pub auth_bits: FieldSize,
    /// Per-message receive timeout, seconds.
    pub timeout_s: f64,
    pub stats_bin_s: f64,
    /// Seed for the local random choices; fresh entropy when absent.
    pub seed: Option<u64>,
    /// Test hook: abort right after reaching this stage.
    pub abort_after: Option<Stage>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            coarse: CoarseConfig::default(),
            fine: FineConfig::default(),
            window_ps: 1000,
            sync_quantum_ps: 16,
            sample_fraction: 0.05,
            max_qber: 0.11,
            cascade: CascadeConfig::default(),
            n_mar: DEFAULT_N_MAR,
            auth_bits: FieldSize::N128,
            timeout_s: 30.0,
            stats_bin_s: 300.0,
            seed: None,
            abort_after: None,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: &str| Err(SessionError::Config(m.into()));
        if self.window_ps == 0 {
            return bad("window_ps must be positive");
        }
        if self.sync_quantum_ps == 0 {
            return bad("sync_quantum_ps must be positive");
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad("sample_fraction must lie in (0, 1]");
        }
        if !(0.0..=0.5).contains(&self.max_qber) {
            return bad("max_qber must lie in [0, 0.5]");
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return bad("timeout_s must be positive");
        }
        if !(self.stats_bin_s > 0.0 && self.stats_bin_s.is_finite()) {
            return bad("stats_bin_s must be positive");
        }
        self.cascade.validate()?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Sift(#[from] SiftError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("peer aborted: {0}")]
    PeerAbort(String),
    #[error("expected {expected}, received {got}")]
    Unexpected { expected: MsgType, got: MsgType },
    #[error("malformed {0} message: {1}")]
    Malformed(MsgType, Malformed),
    #[error("QBER {e:.4} above threshold {max}")]
    QberTooHigh { e: f64, max: f64 },
    #[error("key confirmation failed")]
    ConfirmationFailed,
    #[error("disclosure counts disagree: local {local}, peer {peer}")]
    DisclosureMismatch { local: u64, peer: u64 },
    #[error("final key parameters disagree: local {local:?}, peer {peer:?}")]
    ParameterMismatch { local: (u64, u64), peer: (u64, u64) },
    #[error("insufficient key: final length is zero")]
    NoFinalKey,
    #[error("authentication failed")]
    AuthenticationFailed,
    #[error("peer did not close after authentication")]
    Unconfirmed,
    #[error("aborted after {0} on request")]
    Hook(Stage),
    #[error("invalid session configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    /// Last stage reached before the abort.
    pub stage: Stage,
    pub reason: String,
    pub by_peer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalKey {
    pub key_id: KeyId,
    pub bits: BitBlock,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub n_tags_local: usize,
    pub singles_a: u64,
    pub singles_b: u64,
    pub span_s: f64,
    pub coarse_offset_ps: i64,
    pub sync_resolution_ps: u64,
    pub drift: f64,
    pub flagged_blocks: u32,
    pub n_coinc: usize,
    pub n_sifted: usize,
    pub sample_n: usize,
    pub sample_err: usize,
    pub qber: f64,
    pub n_in: usize,
    pub n_dis_cascade: usize,
    pub n_dis: usize,
    pub n_fin: usize,
    pub n_corrected: usize,
    pub cascade_rounds: usize,
    pub frames_sent: usize,
    pub frames_received: usize,
    pub bytes_sent: usize,
    pub bytes_received: usize,
    /// Wall-clock seconds spent reaching each stage.
    pub stage_times: Vec<(Stage, f64)>,
    pub elapsed_s: f64,
}

impl SessionMetrics {
    /// Final key bits per second of acquisition.
    pub fn skr_bps(&self) -> f64 {
        if self.span_s > 0.0 {
            self.n_fin as f64 / self.span_s
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub state: SessionState,
    pub metrics: SessionMetrics,
    pub bins: Vec<BinCounts>,
    pub key: Option<FinalKey>,
    pub abort: Option<AbortInfo>,
    /// Set when the authenticated key could not be stored.
    pub kms_error: Option<String>,
}

impl SessionOutcome {
    pub fn is_authenticated(&self) -> bool {
        self.state.stage() == Stage::Authenticated
    }

    /// Per-bin rows; SKR is non-zero only for authenticated sessions.
    pub fn stats_rows(&self) -> Vec<StatsRow> {
        let n_fin = if self.is_authenticated() { self.metrics.n_fin } else { 0 };
        stats::rows(&self.bins, n_fin)
    }
}

/// Runs one session as `role` over `channel`.
///
/// Takes three `auth_bits` blocks of pre-shared key per session: the hash
/// key and both one-time pads are taken up front, so the two ledgers stay
/// aligned whichever way the session ends. On success the final key is pushed to
/// `kms` under [`session_key_id`]`(nonce, 0)`.
///
/// Bob keeps the key only once Alice closes the channel after the tag
/// exchange, so Alice's caller must drop its channel when this returns.
pub fn run_session<C: Channel>(
    role: Party,
    tags: &TagStream,
    cfg: &SessionConfig,
    channel: &mut C,
    keys: &mut AuthKeys,
    kms: Option<&Mutex<KeyStore>>,
) -> SessionOutcome {
    let started = Instant::now();
    let mut ep = Endpoint {
        role,
        cfg,
        ch: channel,
        tr: None,
        timeout: Duration::from_secs_f64(cfg.timeout_s.clamp(1e-3, 1e9)),
        state: SessionState::new(role),
        m: SessionMetrics { n_tags_local: tags.len(), ..SessionMetrics::default() },
        bins: Vec::new(),
        started,
    };
    let result = ep.run(tags, keys);
    ep.m.elapsed_s = started.elapsed().as_secs_f64();
    let mut out = SessionOutcome {
        state: ep.state.clone(),
        metrics: ep.m.clone(),
        bins: ep.bins.clone(),
        key: None,
        abort: None,
        kms_error: None,
    };
    match result {
        Ok(key) => {
            if let Some(store) = kms {
                let mut store = store.lock().unwrap_or_else(|p| p.into_inner());
                if let Err(e) = store.push(key.key_id, key.bits.clone()) {
                    out.kms_error = Some(e.to_string());
                }
            }
            out.key = Some(key);
        }
        Err(e) => {
            let by_peer = matches!(e, SessionError::PeerAbort(_));
            let reason = match &e {
                SessionError::PeerAbort(r) => r.clone(),
                other => other.to_string(),
            };
            // Best effort; the peer may already be gone.
            if let Ok(bytes) = Frame::new(MsgType::Abort, reason.clone().into_bytes()).encode() {
                let _ = ep.ch.send_bytes(bytes);
            }
            out.abort = Some(AbortInfo { stage: ep.state.stage(), reason, by_peer });
            ep.state.abort();
            out.state = ep.state;
        }
    }
    out
}

struct Transcripts {
    out: Transcript,
    inc: Transcript,
    pads: AuthKeys,
}

struct Endpoint<'a, C: Channel> {
    role: Party,
    cfg: &'a SessionConfig,
    ch: &'a mut C,
    tr: Option<Transcripts>,
    timeout: Duration,
    state: SessionState,
    m: SessionMetrics,
    bins: Vec<BinCounts>,
    started: Instant,
}

struct Synced {
    nonce: [u8; NONCE_LEN],
    own_idx: Vec<u32>,
    cuts: Vec<u32>,
}

impl<C: Channel> Endpoint<'_, C> {
    fn send(&mut self, kind: MsgType, payload: Vec<u8>) -> Result<(), SessionError> {
        let bytes = Frame::new(kind, payload).encode()?;
        if kind != MsgType::AuthTag {
            if let Some(tr) = &mut self.tr {
                tr.out.update(&bytes);
            }
        }
        self.m.frames_sent += 1;
        self.m.bytes_sent += bytes.len();
        match self.ch.send_bytes(bytes) {
            Ok(()) => Ok(()),
            Err(ChannelError::Closed) => Err(self.pending_abort().unwrap_or(ChannelError::Closed.into())),
            Err(e) => Err(e.into()),
        }
    }

    /// The peer's ABORT, if one is already waiting.
    fn pending_abort(&mut self) -> Option<SessionError> {
        while let Ok(bytes) = self.ch.recv_bytes(Duration::from_millis(50)) {
            if let Ok(f) = Frame::decode(&bytes) {
                if f.kind == MsgType::Abort {
                    return Some(SessionError::PeerAbort(String::from_utf8_lossy(&f.payload).into_owned()));
                }
            }
        }
        None
    }

    fn recv(&mut self, expected: MsgType) -> Result<Vec<u8>, SessionError> {
        let bytes = self.ch.recv_bytes(self.timeout)?;
        let frame = Frame::decode(&bytes)?;
        if frame.kind != MsgType::AuthTag {
            if let Some(tr) = &mut self.tr {
                tr.inc.update(&bytes);
            }
        }
        self.m.frames_received += 1;
        self.m.bytes_received += bytes.len();
        match frame.kind {
            MsgType::Abort => Err(SessionError::PeerAbort(String::from_utf8_lossy(&frame.payload).into_owned())),
            k if k != expected => Err(SessionError::Unexpected { expected, got: k }),
            _ => Ok(frame.payload),
        }
    }

    fn advance(&mut self, to: Stage) -> Result<(), SessionError> {
        self.state.advance(to);
        self.m.stage_times.push((to, self.started.elapsed().as_secs_f64()));
        if self.cfg.abort_after == Some(to) && !to.is_terminal() {
            return Err(SessionError::Hook(to));
        }
        Ok(())
    }

    fn run(&mut self, tags: &TagStream, keys: &mut AuthKeys) -> Result<FinalKey, SessionError> {
        self.cfg.validate()?;
        if tags.party() != self.role {
            return Err(SessionError::Config(format!("{} tag stream given to {}", tags.party(), self.role)));
        }
        let size = self.cfg.auth_bits;
        let k = keys.take_element(size, "hash_key")?;
        let pads = AuthKeys::from_bytes(keys.take(2 * size.bytes(), "otp")?);
        self.tr = Some(Transcripts { out: Transcript::new(k), inc: Transcript::new(k), pads });
        let mut rng = match self.cfg.seed {
            Some(s) => DetRng::seed_from_u64(s),
            None => DetRng::from_os_rng(),
        };

        let synced = match self.role {
            Party::Alice => self.sync_alice(tags, &mut rng)?,
            Party::Bob => self.sync_bob(tags)?,
        };
        self.advance(Stage::Synced)?;

        let (key, kept) = self.sift(tags, &synced)?;
        self.advance(Stage::Sifted)?;

        let (key, e) = self.estimate(key, &kept, &synced, &mut rng)?;
        self.advance(Stage::Estimated)?;

        let key = self.reconcile(key, e, &synced.nonce)?;
        self.advance(Stage::Reconciled)?;

        self.confirm(&key, &mut rng)?;
        self.advance(Stage::Confirmed)?;

        let final_bits = self.amplify(&key, e, &mut rng)?;
        self.advance(Stage::Amplified)?;

        self.authenticate()?;
        self.advance(Stage::Authenticated)?;
        Ok(FinalKey { key_id: session_key_id(&synced.nonce, 0), bits: final_bits })
    }

    fn sync_bob(&mut self, tags: &TagStream) -> Result<Synced, SessionError> {
        let q = self.cfg.sync_quantum_ps;
        let times = tags.times();
        let mut chunks = times.chunks(SYNC_CHUNK).peekable();
        if times.is_empty() {
            let mut p = vec![1];
            put_u32(&mut p, q as u32);
            put_u32(&mut p, 0);
            self.send(MsgType::SyncData, p)?;
        }
        while let Some(chunk) = chunks.next() {
            let mut p = Vec::with_capacity(17 + chunk.len() * 3);
            p.push(chunks.peek().is_none() as u8);
            put_u32(&mut p, q as u32);
            put_u32(&mut p, chunk.len() as u32);
            let mut prev = chunk[0] / q;
            put_u64(&mut p, prev);
            for &t in &chunk[1..] {
                put_varint(&mut p, t / q - prev);
                prev = t / q;
            }
            self.send(MsgType::SyncData, p)?;
        }

        let reply = self.recv(MsgType::SyncData)?;
        let bad = |m| SessionError::Malformed(MsgType::SyncData, m);
        let mut r = Reader::new(&reply);
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(r.bytes(NONCE_LEN).map_err(bad)?);
        self.m.coarse_offset_ps = r.u64().map_err(bad)? as i64;
        self.m.sync_resolution_ps = r.u64().map_err(bad)?;
        self.m.drift = f64::from_bits(r.u64().map_err(bad)?);
        self.m.flagged_blocks = r.u32().map_err(bad)?;
        let n = r.u32().map_err(bad)? as usize;
        if n > reply.len() {
            return Err(bad(Malformed("coincidence count")));
        }
        let mut own_idx = Vec::with_capacity(n);
        let mut at = 0u64;
        for i in 0..n {
            let d = r.varint().map_err(bad)?;
            at = if i == 0 { d } else { at.checked_add(d).ok_or(bad(Malformed("index overflow")))? };
            if at >= times.len() as u64 {
                return Err(bad(Malformed("index outside the stream")));
            }
            own_idx.push(at as u32);
        }
        self.m.n_coinc = n;
        let cuts = self.read_bins(&mut r).map_err(bad)?;
        r.finish().map_err(bad)?;
        Ok(Synced { nonce, own_idx, cuts })
    }

    fn sync_alice(&mut self, tags: &TagStream, rng: &mut DetRng) -> Result<Synced, SessionError> {
        let mut b: Vec<u64> = Vec::new();
        loop {
            let p = self.recv(MsgType::SyncData)?;
            let bad = |m| SessionError::Malformed(MsgType::SyncData, m);
            let mut r = Reader::new(&p);
            let last = r.u8().map_err(bad)?;
            let q = r.u32().map_err(bad)? as u64;
            let n = r.u32().map_err(bad)? as usize;
            if q == 0 || n > p.len() {
                return Err(bad(Malformed("chunk header")));
            }
            if n > 0 {
                let mut prev = r.u64().map_err(bad)?;
                if b.last().is_some_and(|&t| t > prev.saturating_mul(q).saturating_add(q / 2)) {
                    return Err(bad(Malformed("unsorted times")));
                }
                b.reserve(n);
                b.push(prev.saturating_mul(q).saturating_add(q / 2));
                for _ in 1..n {
                    prev = prev.checked_add(r.varint().map_err(bad)?).ok_or(bad(Malformed("time overflow")))?;
                    b.push(prev.saturating_mul(q).saturating_add(q / 2));
                }
            }
            r.finish().map_err(bad)?;
            if last != 0 {
                break;
            }
        }
        let a = tags.times();
        if a.is_empty() || b.is_empty() {
            return Err(SyncError::NoSync.into());
        }
        let coarse = coarse_offset(a, &b, &self.cfg.coarse)?;
        let model = fine_sync(a, &b, &coarse, &self.cfg.fine)?;
        let coinc = match_coincidences(a, &b, &model, self.cfg.window_ps);
        if coinc.is_empty() {
            return Err(SyncError::NoSync.into());
        }
        self.m.coarse_offset_ps = coarse.offset_ps;
        self.m.sync_resolution_ps = coarse.resolution_ps;
        self.m.drift = coarse.drift;
        self.m.flagged_blocks = model.blocks.iter().filter(|b| b.flagged).count() as u32;
        self.m.n_coinc = coinc.len();

        // Bin table on Alice's time axis.
        let start = a[0];
        let span = a[a.len() - 1] - start + 1;
        let bin_ps = ((self.cfg.stats_bin_s * PS_PER_S as f64) as u64).max(1);
        let n_bins = span.div_ceil(bin_ps).max(1) as usize;
        let clamp = |i: i128| i.clamp(0, n_bins as i128 - 1) as usize;
        let mut singles_a = vec![0u64; n_bins];
        for &t in a {
            singles_a[clamp(((t - start) / bin_ps) as i128)] += 1;
        }
        let mut singles_b = vec![0u64; n_bins];
        for &t in &b {
            let ta = t as i128 - model.offset_at(t) as i128;
            singles_b[clamp((ta - start as i128).div_euclid(bin_ps as i128))] += 1;
        }
        let mut cuts = vec![0u32];
        for k in 1..n_bins as u64 {
            let edge = start + k * bin_ps;
            cuts.push(coinc.partition_point(|c| a[c.idx_a as usize] < edge) as u32);
        }
        cuts.push(coinc.len() as u32);

        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let mut p = Vec::with_capacity(64 + coinc.len() * 2 + n_bins * 20);
        p.extend_from_slice(&nonce);
        put_u64(&mut p, coarse.offset_ps as u64);
        put_u64(&mut p, coarse.resolution_ps);
        put_u64(&mut p, coarse.drift.to_bits());
        put_u32(&mut p, self.m.flagged_blocks);
        put_u32(&mut p, coinc.len() as u32);
        let mut prev = 0u32;
        for (i, c) in coinc.iter().enumerate() {
            put_varint(&mut p, if i == 0 { c.idx_b as u64 } else { (c.idx_b - prev) as u64 });
            prev = c.idx_b;
        }
        put_u64(&mut p, bin_ps);
        put_u64(&mut p, span);
        put_u32(&mut p, n_bins as u32);
        for k in 0..n_bins {
            put_u64(&mut p, singles_a[k]);
            put_u64(&mut p, singles_b[k]);
            put_u32(&mut p, cuts[k + 1]);
        }
        self.send(MsgType::SyncData, p.clone())?;
        // Parse our own table so both sides derive the bins identically.
        let mut r = Reader::new(&p);
        r.bytes(NONCE_LEN + 32).expect("own header");
        for _ in 0..coinc.len() {
            r.varint().expect("own index");
        }
        let cuts = self.read_bins(&mut r).expect("own bin table");
        Ok(Synced { nonce, own_idx: coinc.iter().map(|c| c.idx_a).collect(), cuts })
    }

    /// Reads the bin table into `self.bins`; returns the coincidence cut
    /// points (`n_bins + 1` of them).
    fn read_bins(&mut self, r: &mut Reader<'_>) -> Result<Vec<u32>, Malformed> {
        let bin_ps = r.u64()?;
        let span = r.u64()?;
        let n_bins = r.u32()? as usize;
        if bin_ps == 0 || n_bins == 0 || n_bins as u64 != span.div_ceil(bin_ps).max(1) {
            return Err(Malformed("bin table header"));
        }
        let n_coinc = self.m.n_coinc as u32;
        let mut cuts = vec![0u32];
        let mut bins = Vec::with_capacity(n_bins.min(1 << 20));
        for k in 0..n_bins {
            let singles_a = r.u64()?;
            let singles_b = r.u64()?;
            let cut = r.u32()?;
            if cut < cuts[k] || cut > n_coinc || (k == n_bins - 1 && cut != n_coinc) {
                return Err(Malformed("bin cut points"));
            }
            let lo = k as u64 * bin_ps;
            bins.push(BinCounts {
                start_s: lo as f64 / PS_PER_S as f64,
                width_s: (bin_ps.min(span - lo)) as f64 / PS_PER_S as f64,
                singles_a,
                singles_b,
                coinc: (cut - cuts[k]) as u64,
                ..BinCounts::default()
            });
            cuts.push(cut);
        }
        self.m.singles_a = bins.iter().map(|b| b.singles_a).sum();
        self.m.singles_b = bins.iter().map(|b| b.singles_b).sum();
        self.m.span_s = span as f64 / PS_PER_S as f64;
        self.bins = bins;
        Ok(cuts)
    }

    fn sift(&mut self, tags: &TagStream, s: &Synced) -> Result<(BitBlock, Vec<usize>), SessionError> {
        let ch = tags.channels();
        let mine = BitBlock::from_bools(s.own_idx.iter().map(|&i| ch[i as usize].basis() == Basis::DA));
        let mut payload = Vec::new();
        put_bits(&mut payload, &mine);
        let peer = match self.role {
            Party::Bob => {
                self.send(MsgType::SiftBases, payload)?;
                self.recv(MsgType::SiftBases)?
            }
            Party::Alice => {
                let peer = self.recv(MsgType::SiftBases)?;
                self.send(MsgType::SiftBases, payload)?;
                peer
            }
        };
        let bad = |m| SessionError::Malformed(MsgType::SiftBases, m);
        let mut r = Reader::new(&peer);
        let peer = r.bits().map_err(bad)?;
        r.finish().map_err(bad)?;
        let peer: Vec<Basis> = peer.iter().map(|da| if da { Basis::DA } else { Basis::HV }).collect();
        let (key, kept) = sift_side(self.role, tags, &s.own_idx, &peer)?;
        self.m.n_sifted = key.len();
        Ok((key, kept))
    }

    fn estimate(
        &mut self,
        key: BitBlock,
        kept: &[usize],
        s: &Synced,
        rng: &mut DetRng,
    ) -> Result<(BitBlock, f64), SessionError> {
        let bad = |m| SessionError::Malformed(MsgType::ErrSample, m);
        let n = key.len();
        let (pos, mine, peer) = match self.role {
            Party::Alice => {
                let mut seed = [0u8; 32];
                rng.fill_bytes(&mut seed);
                let pos = sample_positions(n, self.cfg.sample_fraction, &seed)?;
                let mine = gather(&key, &pos);
                let mut p = seed.to_vec();
                put_bits(&mut p, &mine);
                self.send(MsgType::ErrSample, p)?;
                let reply = self.recv(MsgType::ErrSample)?;
                let mut r = Reader::new(&reply);
                let peer = r.bits().map_err(bad)?;
                r.finish().map_err(bad)?;
                (pos, mine, peer)
            }
            Party::Bob => {
                let msg = self.recv(MsgType::ErrSample)?;
                let mut r = Reader::new(&msg);
                let seed = r.bytes(32).map_err(bad)?;
                let pos = sample_positions(n, self.cfg.sample_fraction, seed)?;
                let peer = r.bits().map_err(bad)?;
                r.finish().map_err(bad)?;
                let mine = gather(&key, &pos);
                let mut p = Vec::new();
                put_bits(&mut p, &mine);
                self.send(MsgType::ErrSample, p)?;
                (pos, mine, peer)
            }
        };
        let est = qber_from_samples(&mine, &peer)?;

        let n_bins = self.bins.len();
        let bin_of = |coinc_pos: usize| s.cuts.partition_point(|&c| c as usize <= coinc_pos).clamp(1, n_bins) - 1;
        for &k in kept {
            self.bins[bin_of(k)].n_in += 1;
        }
        for (j, &p) in pos.iter().enumerate() {
            let b = bin_of(kept[p]);
            self.bins[b].n_in -= 1;
            self.bins[b].sample_n += 1;
            self.bins[b].sample_err += (mine.get(j) != peer.get(j)) as u64;
        }
        self.m.sample_n = est.n_disclosed;
        self.m.sample_err = est.mismatches;
        self.m.qber = est.e;

        let key = key.remove_positions(&pos);
        self.m.n_in = key.len();
        if key.is_empty() {
            return Err(SiftError::InsufficientKey.into());
        }
        if est.e > self.cfg.max_qber {
            return Err(SessionError::QberTooHigh { e: est.e, max: self.cfg.max_qber });
        }
        Ok((key, est.e))
    }

    fn reconcile(&mut self, key: BitBlock, e: f64, nonce: &[u8]) -> Result<BitBlock, SessionError> {
        let seed = derive_seed("cascade-shuffle", &[nonce]);
        let (key, disclosed) = match self.role {
            Party::Alice => {
                let mut alice = CascadeAlice::new(key, e, &self.cfg.cascade, &seed)?;
                loop {
                    let q = self.recv(MsgType::CascadeAck)?;
                    if q.is_empty() {
                        break;
                    }
                    let answer = alice.answer(&Query::from_bytes(&q)?)?;
                    self.send(MsgType::CascadeParity, encode_parities(&answer))?;
                    self.m.cascade_rounds += 1;
                }
                (alice.key().clone(), alice.n_disclosed())
            }
            Party::Bob => {
                let mut bob = CascadeBob::new(key, e, &self.cfg.cascade, &seed)?;
                while let Some(q) = bob.next_query()? {
                    self.send(MsgType::CascadeAck, q.to_bytes())?;
                    let answer = self.recv(MsgType::CascadeParity)?;
                    bob.absorb(&decode_parities(&answer)?)?;
                }
                self.send(MsgType::CascadeAck, Vec::new())?;
                let out = bob.finish();
                self.m.n_corrected = out.n_corrected;
                self.m.cascade_rounds = out.rounds;
                (out.key, out.n_disclosed)
            }
        };
        self.m.n_dis_cascade = disclosed;
        self.state.disclose(disclosed);
        Ok(key)
    }

    fn confirm(&mut self, key: &BitBlock, rng: &mut DetRng) -> Result<(), SessionError> {
        let bad = |m| SessionError::Malformed(MsgType::ConfirmHash, m);
        let nb = CONFIRM_FIELD.bytes();
        let agree = match self.role {
            Party::Alice => {
                let r = GfElement::random(CONFIRM_FIELD, rng);
                let h = confirm_hash(key, &r);
                let mut p = r.to_be_bytes();
                p.extend(h.to_be_bytes());
                self.send(MsgType::ConfirmHash, p)?;
                let reply = self.recv(MsgType::ConfirmHash)?;
                reply == h.to_be_bytes()
            }
            Party::Bob => {
                let msg = self.recv(MsgType::ConfirmHash)?;
                if msg.len() != 2 * nb {
                    return Err(bad(Malformed("hash length")));
                }
                let r = GfElement::from_be_bytes(CONFIRM_FIELD, &msg[..nb]).map_err(|_| bad(Malformed("seed")))?;
                let h = confirm_hash(key, &r).to_be_bytes();
                self.send(MsgType::ConfirmHash, h.clone())?;
                msg[nb..] == h[..]
            }
        };
        self.state.disclose(CONFIRM_BITS);
        if !agree {
            return Err(SessionError::ConfirmationFailed);
        }
        Ok(())
    }

    fn amplify(&mut self, key: &BitBlock, e: f64, rng: &mut DetRng) -> Result<BitBlock, SessionError> {
        let n_dis = self.state.n_dis() as u64;
        let peer_dis = match self.role {
            Party::Alice => {
                self.send(MsgType::DiscloseCount, n_dis.to_be_bytes().to_vec())?;
                self.recv(MsgType::DiscloseCount)?
            }
            Party::Bob => {
                let p = self.recv(MsgType::DiscloseCount)?;
                self.send(MsgType::DiscloseCount, n_dis.to_be_bytes().to_vec())?;
                p
            }
        };
        let peer_dis = u64::from_be_bytes(
            peer_dis
                .try_into()
                .map_err(|_| SessionError::Malformed(MsgType::DiscloseCount, Malformed("count length")))?,
        );
        if peer_dis != n_dis {
            return Err(SessionError::DisclosureMismatch { local: n_dis, peer: peer_dis });
        }
        self.m.n_dis = n_dis as usize;

        let n_in = key.len();
        let n_fin = final_length(&FinalKeyParams { n_in, e, n_dis: n_dis as usize, n_mar: self.cfg.n_mar });
        self.m.n_fin = n_fin;
        if n_fin == 0 {
            return Err(SessionError::NoFinalKey);
        }
        let seed = match self.role {
            Party::Alice => {
                let seed = PaSeed::random(n_in, n_fin, rng)?;
                let mut p = Vec::new();
                put_u64(&mut p, n_in as u64);
                put_u64(&mut p, n_fin as u64);
                put_bits(&mut p, seed.bits());
                self.send(MsgType::PaSeed, p)?;
                seed
            }
            Party::Bob => {
                let bad = |m| SessionError::Malformed(MsgType::PaSeed, m);
                let msg = self.recv(MsgType::PaSeed)?;
                let mut r = Reader::new(&msg);
                let peer = (r.u64().map_err(bad)?, r.u64().map_err(bad)?);
                if peer != (n_in as u64, n_fin as u64) {
                    return Err(SessionError::ParameterMismatch { local: (n_in as u64, n_fin as u64), peer });
                }
                let bits = r.bits().map_err(bad)?;
                r.finish().map_err(bad)?;
                PaSeed::new(bits, n_in, n_fin)?
            }
        };
        Ok(toeplitz_pa(key, &seed)?)
    }

    fn authenticate(&mut self) -> Result<(), SessionError> {
        let size = self.cfg.auth_bits;
        let tr = self.tr.as_mut().expect("transcripts initialised");
        // Pads are used in a fixed order: Alice→Bob first, then Bob→Alice.
        let local = match self.role {
            Party::Alice => {
                let outgoing = finalize_mac(&tr.out, &mut tr.pads, "otp-a2b")?;
                let incoming = finalize_mac(&tr.inc, &mut tr.pads, "otp-b2a")?;
                DirectionTags { outgoing, incoming }
            }
            Party::Bob => {
                let incoming = finalize_mac(&tr.inc, &mut tr.pads, "otp-a2b")?;
                let outgoing = finalize_mac(&tr.out, &mut tr.pads, "otp-b2a")?;
                DirectionTags { outgoing, incoming }
            }
        };
        let check = |peer: Vec<u8>| {
            let peer = DirectionTags::from_bytes(size, &peer)
                .map_err(|_| SessionError::Malformed(MsgType::AuthTag, Malformed("tag length")))?;
            if tags_agree(&local, &peer) {
                Ok(())
            } else {
                Err(SessionError::AuthenticationFailed)
            }
        };
        match self.role {
            Party::Alice => {
                self.send(MsgType::AuthTag, local.to_bytes())?;
                check(self.recv(MsgType::AuthTag)?)
            }
            Party::Bob => {
                // Bob answers only a valid tag, then holds the key until
                // Alice hangs up without objecting.
                check(self.recv(MsgType::AuthTag)?)?;
                self.send(MsgType::AuthTag, local.to_bytes())?;
                self.await_close()
            }
        }
    }

    fn await_close(&mut self) -> Result<(), SessionError> {
        match self.ch.recv_bytes(self.timeout) {
            Err(ChannelError::Closed) => Ok(()),
            Err(e) => Err(e.into()),
            Ok(bytes) => {
                self.m.frames_received += 1;
                self.m.bytes_received += bytes.len();
                match Frame::decode(&bytes) {
                    Ok(f) if f.kind == MsgType::Abort => {
                        Err(SessionError::PeerAbort(String::from_utf8_lossy(&f.payload).into_owned()))
                    }
                    _ => Err(SessionError::Unconfirmed),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_follow_the_success_path() {
        let mut st = SessionState::new(Party::Bob);
        let mut s = Stage::Init;
        while let Some(n) = s.next() {
            st.advance(n);
            s = n;
        }
        assert_eq!(st.stage(), Stage::Authenticated);
        assert_eq!(st.history().len(), 8);
        st.abort();
        assert_eq!(st.stage(), Stage::Authenticated);
    }

    #[test]
    #[should_panic(expected = "illegal transition")]
    fn skipping_a_stage_panics() {
        SessionState::new(Party::Alice).advance(Stage::Sifted);
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("Reconciled".parse::<Stage>().unwrap(), Stage::Reconciled);
        assert_eq!("sift".parse::<Stage>().unwrap(), Stage::Sifted);
        assert!("done".parse::<Stage>().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: SessionConfig = serde_json::from_str(r#"{"max_qber": 0.08, "abort_after": "sifted"}"#).unwrap();
        assert_eq!(cfg.max_qber, 0.08);
        assert_eq!(cfg.abort_after, Some(Stage::Sifted));
        assert_eq!(cfg.window_ps, 1000);
        assert!(cfg.validate().is_ok());
        for bad in [
            SessionConfig { sample_fraction: 0.0, ..SessionConfig::default() },
            SessionConfig { max_qber: 0.6, ..SessionConfig::default() },
            SessionConfig { window_ps: 0, ..SessionConfig::default() },
            SessionConfig { timeout_s: -1.0, ..SessionConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(SessionError::Config(_))));
        }
    }
}
