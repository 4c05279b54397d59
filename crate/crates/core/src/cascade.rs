//! Cascade information reconciliation.
//!
//! Alice is the reference: she only answers parity queries, and Bob flips
//! his bits until every queried parity agrees. Each pass applies a shared
//! pseudo-random permutation and splits the key into blocks of size
//! `k1·2^(pass)`; blocks whose parities differ are bisected, and every
//! corrected bit re-opens the blocks containing it in earlier passes.
//!
//! Bob drives the dialogue. Each round he sends one [`Query`] holding every
//! parity he needs at that point, and Alice answers with one packed
//! parity vector, so the number of messages grows with the bisection depth
//! rather than with the number of errors.

use crate::bits::BitBlock;
use crate::rng::derive_rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum CascadeError {
    #[error("key length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("estimated error rate {0} outside [0, 0.5)")]
    ErrorRate(f64),
    #[error("invalid cascade configuration: {0}")]
    Config(&'static str),
    #[error("malformed cascade message: {0}")]
    Malformed(&'static str),
    #[error("answer holds {got} parities, {expected} expected")]
    AnswerLength { expected: usize, got: usize },
    #[error("query refers to pass {pass} range {start}..{end} outside the key")]
    BadRange { pass: u8, start: u32, end: u32 },
    #[error("reconciliation did not converge")]
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub passes: u8,
    /// Lower clamp on the first-pass block size.
    pub min_block: usize,
    /// First-pass block size used when the error estimate is zero.
    pub zero_error_block: usize,
    /// Upper bound on query rounds before giving up.
    pub max_rounds: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            passes: 4,
            min_block: 8,
            zero_error_block: 1 << 16,
            max_rounds: 10_000,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), CascadeError> {
        if self.passes == 0 {
            return Err(CascadeError::Config("passes must be at least 1"));
        }
        if self.min_block < 2 {
            return Err(CascadeError::Config("min_block must be at least 2"));
        }
        Ok(())
    }

    /// Block size of pass `p` (0-based) for an `n`-bit key.
    pub fn block_size(&self, p: u8, e_est: f64, n: usize) -> usize {
        let n = n.max(1);
        let k1 = if e_est <= 0.0 {
            self.zero_error_block.min(n)
        } else {
            ((0.73 / e_est).ceil() as usize).clamp(self.min_block.min(n), n)
        };
        k1.saturating_mul(1usize << p.min(62)).min(n).max(1)
    }
}

/// A batch of parity requests, each naming a run of positions in one
/// pass's permuted order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Query {
    pub items: Vec<QueryItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryItem {
    /// Parities of every block of a pass, in block order.
    Blocks { pass: u8 },
    /// Parity of permuted positions `start..end` of a pass.
    Range { pass: u8, start: u32, end: u32 },
}

impl Query {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.items.len() * 10);
        out.extend_from_slice(&(self.items.len() as u32).to_be_bytes());
        for it in &self.items {
            match *it {
                QueryItem::Blocks { pass } => out.extend_from_slice(&[0, pass]),
                QueryItem::Range { pass, start, end } => {
                    out.extend_from_slice(&[1, pass]);
                    out.extend_from_slice(&start.to_be_bytes());
                    out.extend_from_slice(&end.to_be_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CascadeError> {
        let short = CascadeError::Malformed("truncated query");
        let count = u32::from_be_bytes(bytes.get(..4).ok_or(short.clone())?.try_into().unwrap()) as usize;
        let mut items = Vec::with_capacity(count.min(bytes.len() / 2));
        let mut at = 4;
        for _ in 0..count {
            let head = bytes.get(at..at + 2).ok_or(short.clone())?;
            at += 2;
            items.push(match head[0] {
                0 => QueryItem::Blocks { pass: head[1] },
                1 => {
                    let body = bytes.get(at..at + 8).ok_or(short.clone())?;
                    at += 8;
                    QueryItem::Range {
                        pass: head[1],
                        start: u32::from_be_bytes(body[..4].try_into().unwrap()),
                        end: u32::from_be_bytes(body[4..].try_into().unwrap()),
                    }
                }
                _ => return Err(CascadeError::Malformed("unknown query item")),
            });
        }
        if at != bytes.len() {
            return Err(CascadeError::Malformed("trailing bytes"));
        }
        Ok(Self { items })
    }
}

/// Packs parity bits for the wire: 4-byte count, then LSB-first bytes.
pub fn encode_parities(p: &BitBlock) -> Vec<u8> {
    let mut out = (p.len() as u32).to_be_bytes().to_vec();
    out.extend(p.to_bytes());
    out
}

pub fn decode_parities(bytes: &[u8]) -> Result<BitBlock, CascadeError> {
    let head = bytes.get(..4).ok_or(CascadeError::Malformed("truncated parities"))?;
    let n = u32::from_be_bytes(head.try_into().unwrap()) as usize;
    if bytes.len() - 4 != n.div_ceil(8) {
        return Err(CascadeError::Malformed("parity length"));
    }
    Ok(BitBlock::from_bytes(&bytes[4..], n))
}

/// The permutation and block layout of every pass, derived identically on
/// both sides from the shared seed.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    /// perm[p][i]: key index at permuted position i
    perm: Vec<Vec<u32>>,
    /// pos[p][x]: permuted position of key index x
    pos: Vec<Vec<u32>>,
    block: Vec<usize>,
}

impl Layout {
    fn new(n: usize, e_est: f64, cfg: &CascadeConfig, seed: &[u8]) -> Self {
        let mut perm = Vec::with_capacity(cfg.passes as usize);
        let mut pos = Vec::with_capacity(cfg.passes as usize);
        let mut block = Vec::with_capacity(cfg.passes as usize);
        for p in 0..cfg.passes {
            let mut rng = derive_rng("cascade-shuffle", &[seed, &[p], &(n as u64).to_be_bytes()]);
            let mut pm: Vec<u32> = (0..n as u32).collect();
            pm.shuffle(&mut rng);
            let mut inv = vec![0u32; n];
            for (i, &x) in pm.iter().enumerate() {
                inv[x as usize] = i as u32;
            }
            perm.push(pm);
            pos.push(inv);
            block.push(cfg.block_size(p, e_est, n));
        }
        Self { n, perm, pos, block }
    }

    fn n_blocks(&self, p: u8) -> usize {
        self.n.div_ceil(self.block[p as usize])
    }

    fn block_range(&self, p: u8, b: usize) -> (usize, usize) {
        let k = self.block[p as usize];
        (b * k, ((b + 1) * k).min(self.n))
    }

    fn parity(&self, key: &BitBlock, p: u8, start: usize, end: usize) -> bool {
        self.perm[p as usize][start..end]
            .iter()
            .fold(false, |acc, &x| acc ^ key.get(x as usize))
    }

    fn check(&self, it: &QueryItem) -> Result<(), CascadeError> {
        match *it {
            QueryItem::Blocks { pass } if (pass as usize) < self.perm.len() => Ok(()),
            QueryItem::Range { pass, start, end }
                if (pass as usize) < self.perm.len() && start < end && end as usize <= self.n =>
            {
                Ok(())
            }
            QueryItem::Blocks { pass } => Err(CascadeError::BadRange { pass, start: 0, end: 0 }),
            QueryItem::Range { pass, start, end } => Err(CascadeError::BadRange { pass, start, end }),
        }
    }
}

/// Alice's side: answers parity queries on her fixed key.
#[derive(Debug, Clone)]
pub struct CascadeAlice {
    key: BitBlock,
    layout: Layout,
    n_disclosed: usize,
    messages: usize,
}

impl CascadeAlice {
    pub fn new(key: BitBlock, e_est: f64, cfg: &CascadeConfig, seed: &[u8]) -> Result<Self, CascadeError> {
        cfg.validate()?;
        check_rate(e_est)?;
        let layout = Layout::new(key.len(), e_est, cfg, seed);
        Ok(Self { key, layout, n_disclosed: 0, messages: 0 })
    }

    pub fn answer(&mut self, q: &Query) -> Result<BitBlock, CascadeError> {
        let mut out = BitBlock::new();
        for it in &q.items {
            self.layout.check(it)?;
            match *it {
                QueryItem::Blocks { pass } => {
                    for b in 0..self.layout.n_blocks(pass) {
                        let (s, e) = self.layout.block_range(pass, b);
                        out.push(self.layout.parity(&self.key, pass, s, e));
                    }
                }
                QueryItem::Range { pass, start, end } => {
                    out.push(self.layout.parity(&self.key, pass, start as usize, end as usize));
                }
            }
        }
        self.n_disclosed += out.len();
        self.messages += 2;
        Ok(out)
    }

    pub fn n_disclosed(&self) -> usize {
        self.n_disclosed
    }

    pub fn messages(&self) -> usize {
        self.messages
    }

    pub fn key(&self) -> &BitBlock {
        &self.key
    }
}

fn check_rate(e: f64) -> Result<(), CascadeError> {
    if (0.0..0.5).contains(&e) {
        Ok(())
    } else {
        Err(CascadeError::ErrorRate(e))
    }
}

/// An open bisection: permuted range `start..end` of `pass` is known to
/// hold an odd number of errors.
#[derive(Debug, Clone, Copy)]
struct Search {
    pass: u8,
    block: usize,
    start: usize,
    end: usize,
}

impl Search {
    fn left(&self) -> (usize, usize) {
        (self.start, self.start + (self.end - self.start).div_ceil(2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconcileOutcome {
    pub key: BitBlock,
    pub n_disclosed: usize,
    pub n_corrected: usize,
    pub transcript_msgs: usize,
    pub rounds: usize,
}

/// Bob's side: decides what to ask and corrects his key.
#[derive(Debug, Clone)]
pub struct CascadeBob {
    key: BitBlock,
    layout: Layout,
    passes: u8,
    max_rounds: usize,
    /// Passes whose block parities are known.
    opened: u8,
    /// Alice's block parities per opened pass.
    alice_blocks: Vec<BitBlock>,
    /// Bob's current block parities per opened pass.
    bob_blocks: Vec<BitBlock>,
    /// Alice parities already disclosed, by (pass, start, end).
    known: HashMap<(u8, usize, usize), bool>,
    searches: Vec<Search>,
    searching: HashSet<(u8, usize)>,
    pending: Option<Vec<Pending>>,
    n_disclosed: usize,
    n_corrected: usize,
    messages: usize,
    rounds: usize,
}

#[derive(Debug, Clone, Copy)]
enum Pending {
    Blocks(u8),
    Left(usize),
}

impl CascadeBob {
    pub fn new(key: BitBlock, e_est: f64, cfg: &CascadeConfig, seed: &[u8]) -> Result<Self, CascadeError> {
        cfg.validate()?;
        check_rate(e_est)?;
        let layout = Layout::new(key.len(), e_est, cfg, seed);
        Ok(Self {
            key,
            layout,
            passes: cfg.passes,
            max_rounds: cfg.max_rounds,
            opened: 0,
            alice_blocks: Vec::new(),
            bob_blocks: Vec::new(),
            known: HashMap::new(),
            searches: Vec::new(),
            searching: HashSet::new(),
            pending: None,
            n_disclosed: 0,
            n_corrected: 0,
            messages: 0,
            rounds: 0,
        })
    }

    /// Next batch to send, or `None` once reconciliation is complete.
    ///
    /// Bisection steps whose parity is already known are resolved locally
    /// before the batch is assembled.
    pub fn next_query(&mut self) -> Result<Option<Query>, CascadeError> {
        if self.pending.is_some() {
            return Err(CascadeError::Malformed("previous query unanswered"));
        }
        if self.layout.n == 0 {
            return Ok(None);
        }
        loop {
            let mut progressed = false;
            let mut i = 0;
            while i < self.searches.len() {
                let s = self.searches[i];
                let (ls, le) = s.left();
                if let Some(&alice) = self.known.get(&(s.pass, ls, le)) {
                    self.step(i, alice);
                    progressed = true;
                    // Consistent parities never flip more bits than the key
                    // holds; anything beyond that is a flip cycle.
                    if self.n_corrected > self.layout.n {
                        return Err(CascadeError::Diverged);
                    }
                } else {
                    i += 1;
                }
            }
            self.retire_finished();
            if !progressed {
                break;
            }
        }
        if self.searches.is_empty() {
            if self.opened == self.passes {
                return Ok(None);
            }
            self.rounds += 1;
            self.pending = Some(vec![Pending::Blocks(self.opened)]);
            return Ok(Some(Query { items: vec![QueryItem::Blocks { pass: self.opened }] }));
        }
        if self.rounds >= self.max_rounds {
            return Err(CascadeError::Diverged);
        }
        self.rounds += 1;
        let mut items = Vec::with_capacity(self.searches.len());
        let mut pending = Vec::with_capacity(self.searches.len());
        for (i, s) in self.searches.iter().enumerate() {
            let (ls, le) = s.left();
            items.push(QueryItem::Range { pass: s.pass, start: ls as u32, end: le as u32 });
            pending.push(Pending::Left(i));
        }
        self.pending = Some(pending);
        Ok(Some(Query { items }))
    }

    /// Applies Alice's answer to the last query.
    pub fn absorb(&mut self, answer: &BitBlock) -> Result<(), CascadeError> {
        let pending = self.pending.take().ok_or(CascadeError::Malformed("answer without query"))?;
        let expected: usize = pending
            .iter()
            .map(|p| match p {
                Pending::Blocks(pass) => self.layout.n_blocks(*pass),
                Pending::Left(_) => 1,
            })
            .sum();
        if answer.len() != expected {
            return Err(CascadeError::AnswerLength { expected, got: answer.len() });
        }
        self.messages += 2;
        self.n_disclosed += answer.len();
        let mut bit = 0;
        for p in pending {
            match p {
                Pending::Blocks(pass) => {
                    let nb = self.layout.n_blocks(pass);
                    let alice = answer.slice(bit, bit + nb);
                    bit += nb;
                    self.open_pass(pass, alice);
                }
                Pending::Left(i) => {
                    let s = self.searches[i];
                    let (ls, le) = s.left();
                    self.known.insert((s.pass, ls, le), answer.get(bit));
                    bit += 1;
                }
            }
        }
        Ok(())
    }

    fn open_pass(&mut self, pass: u8, alice: BitBlock) {
        let nb = self.layout.n_blocks(pass);
        let mut bob = BitBlock::zeros(nb);
        for b in 0..nb {
            let (s, e) = self.layout.block_range(pass, b);
            bob.set(b, self.layout.parity(&self.key, pass, s, e));
            self.known.insert((pass, s, e), alice.get(b));
        }
        self.alice_blocks.push(alice);
        self.bob_blocks.push(bob);
        self.opened = pass + 1;
        for b in 0..nb {
            self.reopen(pass, b);
        }
    }

    /// Starts a bisection of block `b` of `pass` if its parities differ.
    fn reopen(&mut self, pass: u8, b: usize) {
        let p = pass as usize;
        if self.alice_blocks[p].get(b) != self.bob_blocks[p].get(b) && !self.searching.contains(&(pass, b)) {
            let (start, end) = self.layout.block_range(pass, b);
            self.searching.insert((pass, b));
            self.searches.push(Search { pass, block: b, start, end });
        }
    }

    /// Advances search `i` with Alice's parity of its left half.
    fn step(&mut self, i: usize, alice_left: bool) {
        let s = self.searches[i];
        let (ls, le) = s.left();
        let bob_left = self.layout.parity(&self.key, s.pass, ls, le);
        let next = if bob_left != alice_left {
            Search { end: le, ..s }
        } else {
            Search { start: le, ..s }
        };
        self.searches[i] = next;
        if next.end - next.start == 1 {
            let x = self.layout.perm[s.pass as usize][next.start] as usize;
            self.correct(x);
        }
    }

    fn correct(&mut self, x: usize) {
        self.key.flip(x);
        self.n_corrected += 1;
        // Searches whose current range holds x now see an even error count.
        let mut touched = Vec::new();
        for s in &mut self.searches {
            let px = self.layout.pos[s.pass as usize][x] as usize;
            if s.start <= px && px < s.end {
                s.end = s.start;
            }
        }
        for q in 0..self.opened {
            let b = self.layout.pos[q as usize][x] as usize / self.layout.block[q as usize];
            self.bob_blocks[q as usize].flip(b);
            touched.push((q, b));
        }
        self.retire_finished();
        for (q, b) in touched {
            self.reopen(q, b);
        }
    }

    fn retire_finished(&mut self) {
        let searching = &mut self.searching;
        self.searches.retain(|s| {
            let live = s.end - s.start > 1;
            if !live {
                searching.remove(&(s.pass, s.block));
            }
            live
        });
    }

    pub fn n_disclosed(&self) -> usize {
        self.n_disclosed
    }

    pub fn finish(self) -> ReconcileOutcome {
        ReconcileOutcome {
            key: self.key,
            n_disclosed: self.n_disclosed,
            n_corrected: self.n_corrected,
            transcript_msgs: self.messages,
            rounds: self.rounds,
        }
    }
}

/// Runs both sides in process; returns Bob's outcome and Alice's count of
/// disclosed parities.
pub fn reconcile_local(
    key_a: &BitBlock,
    key_b: &BitBlock,
    e_est: f64,
    cfg: &CascadeConfig,
    seed: &[u8],
) -> Result<(ReconcileOutcome, usize), CascadeError> {
    if key_a.len() != key_b.len() {
        return Err(CascadeError::LengthMismatch(key_a.len(), key_b.len()));
    }
    let mut alice = CascadeAlice::new(key_a.clone(), e_est, cfg, seed)?;
    let mut bob = CascadeBob::new(key_b.clone(), e_est, cfg, seed)?;
    while let Some(q) = bob.next_query()? {
        // exercise the wire form as the session does
        let q = Query::from_bytes(&q.to_bytes())?;
        let ans = decode_parities(&encode_parities(&alice.answer(&q)?))?;
        bob.absorb(&ans)?;
    }
    Ok((bob.finish(), alice.n_disclosed()))
}

/// Locates one error in a block with an odd number of errors by bisection.
///
/// `alice_parity` reveals the reference parity of a set of positions; it is
/// asked at most `ceil(log2(len))` times. Returns the corrected position
/// (already flipped in `key`) and the number of parity exchanges.
pub fn binary_search_block(
    key: &mut BitBlock,
    positions: &[usize],
    mut alice_parity: impl FnMut(&[usize]) -> bool,
) -> (usize, usize) {
    assert!(!positions.is_empty(), "empty block");
    let (mut lo, mut hi) = (0, positions.len());
    let mut exchanges = 0;
    while hi - lo > 1 {
        let mid = lo + (hi - lo).div_ceil(2);
        let left = &positions[lo..mid];
        let bob = left.iter().fold(false, |acc, &x| acc ^ key.get(x));
        exchanges += 1;
        if bob != alice_parity(left) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    key.flip(positions[lo]);
    (positions[lo], exchanges)
}
