//! Detector channels, bases and time-ordered tag streams.

use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

/// Measurement basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    HV,
    DA,
}

/// One of the four polarization detectors of a receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum DetectorChannel {
    H = 0,
    V = 1,
    D = 2,
    A = 3,
}

impl DetectorChannel {
    pub const ALL: [DetectorChannel; 4] = [Self::H, Self::V, Self::D, Self::A];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// The channel that reports `bit` in `basis`.
    pub fn from_basis_bit(basis: Basis, bit: bool) -> Self {
        match (basis, bit) {
            (Basis::HV, false) => Self::H,
            (Basis::HV, true) => Self::V,
            (Basis::DA, false) => Self::D,
            (Basis::DA, true) => Self::A,
        }
    }

    pub fn basis(self) -> Basis {
        channel_map(self).0
    }

    pub fn bit(self) -> bool {
        channel_map(self).1
    }
}

/// Fixed detector convention: H→(HV,0), V→(HV,1), D→(DA,0), A→(DA,1).
pub fn channel_map(ch: DetectorChannel) -> (Basis, bool) {
    match ch {
        DetectorChannel::H => (Basis::HV, false),
        DetectorChannel::V => (Basis::HV, true),
        DetectorChannel::D => (Basis::DA, false),
        DetectorChannel::A => (Basis::DA, true),
    }
}

impl fmt::Display for DetectorChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::H => "H",
            Self::V => "V",
            Self::D => "D",
            Self::A => "A",
        };
        f.write_str(s)
    }
}

impl FromStr for DetectorChannel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "H" | "h" | "0" => Ok(Self::H),
            "V" | "v" | "1" => Ok(Self::V),
            "D" | "d" | "2" => Ok(Self::D),
            "A" | "a" | "3" => Ok(Self::A),
            other => Err(format!("unknown detector channel {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    Alice,
    Bob,
}

impl Party {
    pub fn peer(self) -> Party {
        match self {
            Party::Alice => Party::Bob,
            Party::Bob => Party::Alice,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::Alice => "alice",
            Party::Bob => "bob",
        })
    }
}

impl FromStr for Party {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "alice" | "a" => Ok(Party::Alice),
            "bob" | "b" => Ok(Party::Bob),
            other => Err(format!("unknown party {other:?}")),
        }
    }
}

/// A single detection: picoseconds on the local clock plus the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeTag {
    pub t: u64,
    pub ch: DetectorChannel,
}

impl TimeTag {
    pub fn new(t: u64, ch: DetectorChannel) -> Self {
        Self { t, ch }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TagError {
    #[error("tag {index} at {t} ps breaks time order")]
    Unsorted { index: usize, t: u64 },
    #[error("cannot merge streams of different parties ({0} and {1})")]
    MixedParties(Party, Party),
    #[error("nothing to merge")]
    NoStreams,
}

/// Time-ordered detections of one party.
///
/// Stored column-wise: a minute of detections at megacount rates is tens of
/// millions of tags, and the timestamps alone are what sync works on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    party: Party,
    pub epoch: String,
    times: Vec<u64>,
    channels: Vec<DetectorChannel>,
}

impl TagStream {
    pub fn new(party: Party, epoch: impl Into<String>) -> Self {
        Self {
            party,
            epoch: epoch.into(),
            times: Vec::new(),
            channels: Vec::new(),
        }
    }

    pub fn with_capacity(party: Party, epoch: impl Into<String>, n: usize) -> Self {
        Self {
            party,
            epoch: epoch.into(),
            times: Vec::with_capacity(n),
            channels: Vec::with_capacity(n),
        }
    }

    pub fn from_tags(
        party: Party,
        epoch: impl Into<String>,
        tags: impl IntoIterator<Item = TimeTag>,
    ) -> Result<Self, TagError> {
        let mut s = Self::new(party, epoch);
        for tag in tags {
            s.push(tag)?;
        }
        Ok(s)
    }

    /// Builds a stream from parallel columns, checking the order invariant.
    pub fn from_columns(
        party: Party,
        epoch: impl Into<String>,
        times: Vec<u64>,
        channels: Vec<DetectorChannel>,
    ) -> Result<Self, TagError> {
        assert_eq!(times.len(), channels.len(), "column length mismatch");
        for i in 1..times.len() {
            if (times[i], channels[i]) < (times[i - 1], channels[i - 1]) {
                return Err(TagError::Unsorted { index: i, t: times[i] });
            }
        }
        Ok(Self {
            party,
            epoch: epoch.into(),
            times,
            channels,
        })
    }

    pub fn push(&mut self, tag: TimeTag) -> Result<(), TagError> {
        if let (Some(&t), Some(&ch)) = (self.times.last(), self.channels.last()) {
            if (tag.t, tag.ch) < (t, ch) {
                return Err(TagError::Unsorted {
                    index: self.times.len(),
                    t: tag.t,
                });
            }
        }
        self.times.push(tag.t);
        self.channels.push(tag.ch);
        Ok(())
    }

    pub fn party(&self) -> Party {
        self.party
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn get(&self, i: usize) -> TimeTag {
        TimeTag::new(self.times[i], self.channels[i])
    }

    pub fn times(&self) -> &[u64] {
        &self.times
    }

    pub fn channels(&self) -> &[DetectorChannel] {
        &self.channels
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = TimeTag> + '_ {
        self.times
            .iter()
            .zip(&self.channels)
            .map(|(&t, &ch)| TimeTag::new(t, ch))
    }

    /// Time between first and last tag, in picoseconds.
    pub fn span_ps(&self) -> u64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        }
    }
}

/// K-way merge of sorted streams of the same party.
pub fn merge_sorted(streams: &[TagStream]) -> Result<TagStream, TagError> {
    let first = streams.first().ok_or(TagError::NoStreams)?;
    if let Some(other) = streams.iter().find(|s| s.party != first.party) {
        return Err(TagError::MixedParties(first.party, other.party));
    }
    let total = streams.iter().map(TagStream::len).sum();
    let mut out = TagStream::with_capacity(first.party, first.epoch.clone(), total);
    let mut heap: BinaryHeap<Reverse<(u64, DetectorChannel, usize, usize)>> = streams
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(k, s)| Reverse((s.times[0], s.channels[0], k, 0)))
        .collect();
    while let Some(Reverse((t, ch, k, i))) = heap.pop() {
        out.times.push(t);
        out.channels.push(ch);
        let s = &streams[k];
        if i + 1 < s.len() {
            heap.push(Reverse((s.times[i + 1], s.channels[i + 1], k, i + 1)));
        }
    }
    Ok(out)
}
