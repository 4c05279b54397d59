//! Wire frames: 4-byte big-endian payload length, 1-byte type, payload.

use std::fmt;
use std::io::{self, Read, Write};

pub const HEADER_LEN: usize = 5;
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    SyncData = 1,
    SiftBases = 2,
    ErrSample = 3,
    CascadeParity = 4,
    CascadeAck = 5,
    ConfirmHash = 6,
    PaSeed = 7,
    DiscloseCount = 8,
    AuthTag = 9,
    Abort = 10,
}

impl MsgType {
    pub const ALL: [MsgType; 10] = [
        MsgType::SyncData,
        MsgType::SiftBases,
        MsgType::ErrSample,
        MsgType::CascadeParity,
        MsgType::CascadeAck,
        MsgType::ConfirmHash,
        MsgType::PaSeed,
        MsgType::DiscloseCount,
        MsgType::AuthTag,
        MsgType::Abort,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::SyncData => "SYNC_DATA",
            MsgType::SiftBases => "SIFT_BASES",
            MsgType::ErrSample => "ERR_SAMPLE",
            MsgType::CascadeParity => "CASCADE_PARITY",
            MsgType::CascadeAck => "CASCADE_ACK",
            MsgType::ConfirmHash => "CONFIRM_HASH",
            MsgType::PaSeed => "PA_SEED",
            MsgType::DiscloseCount => "DISCLOSE_COUNT",
            MsgType::AuthTag => "AUTH_TAG",
            MsgType::Abort => "ABORT",
        }
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 64 MiB limit")]
    TooLong(usize),
    #[error("declared payload length {declared} but {actual} bytes follow")]
    LengthMismatch { declared: usize, actual: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: MsgType, payload: Vec<u8>) -> Self {
        Self { kind, payload }
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(FrameError::TooLong(self.payload.len()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Decodes one frame from the front of `bytes`; returns it with the
    /// number of bytes used.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
        if bytes.len() < HEADER_LEN {
            return Err(FrameError::Truncated { needed: HEADER_LEN, have: bytes.len() });
        }
        let (len, kind) = parse_header(bytes[..HEADER_LEN].try_into().expect("header length"))?;
        let total = HEADER_LEN + len;
        if bytes.len() < total {
            return Err(FrameError::Truncated { needed: total, have: bytes.len() });
        }
        Ok((Frame { kind, payload: bytes[HEADER_LEN..total].to_vec() }, total))
    }

    /// Decodes a buffer holding exactly one frame.
    pub fn decode(bytes: &[u8]) -> Result<Frame, FrameError> {
        if bytes.len() >= HEADER_LEN {
            let declared = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
            let actual = bytes.len() - HEADER_LEN;
            if declared <= MAX_PAYLOAD && declared != actual {
                return Err(FrameError::LengthMismatch { declared, actual });
            }
        }
        Frame::decode_prefix(bytes).map(|(f, _)| f)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame, FrameError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let (len, kind) = parse_header(&header)?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Ok(Frame { kind, payload })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FrameError> {
        w.write_all(&self.encode()?)?;
        w.flush()?;
        Ok(())
    }
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(usize, MsgType), FrameError> {
    let len = u32::from_be_bytes([h[0], h[1], h[2], h[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::TooLong(len));
    }
    let kind = MsgType::from_code(h[4]).ok_or(FrameError::UnknownType(h[4]))?;
    Ok((len, kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_payload_is_five_bytes() {
        let bytes = Frame::new(MsgType::CascadeAck, vec![]).encode().unwrap();
        assert_eq!(bytes, vec![0, 0, 0, 0, 5]);
        assert_eq!(Frame::decode(&bytes).unwrap().kind, MsgType::CascadeAck);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Frame::decode(&[0, 0, 0, 0, 99]), Err(FrameError::UnknownType(99))));
        assert!(matches!(Frame::decode(&[0, 0, 0, 3, 1, 7]), Err(FrameError::LengthMismatch { declared: 3, actual: 1 })));
        assert!(matches!(Frame::decode(&[0, 0, 0, 1, 1]), Err(FrameError::LengthMismatch { .. })));
        assert!(matches!(Frame::decode(&[0, 0]), Err(FrameError::Truncated { .. })));
        assert!(matches!(Frame::decode_prefix(&[0, 0, 0, 2, 1, 7]), Err(FrameError::Truncated { needed: 7, have: 6 })));
        assert!(matches!(Frame::decode(&[0x10, 0, 0, 0, 1]), Err(FrameError::TooLong(_))));
        let mut short: &[u8] = &[0, 0, 0, 4, 2, 1];
        assert!(Frame::read_from(&mut short).is_err());
        assert!(Frame::new(MsgType::SyncData, vec![0; MAX_PAYLOAD + 1]).encode().is_err());
    }

    #[test]
    fn codes_are_stable() {
        let names: Vec<(u8, &str)> = MsgType::ALL.iter().map(|t| (t.code(), t.name())).collect();
        assert_eq!(names[0], (1, "SYNC_DATA"));
        assert_eq!(names[9], (10, "ABORT"));
        for t in MsgType::ALL {
            assert_eq!(MsgType::from_code(t.code()), Some(t));
        }
        assert_eq!(MsgType::from_code(0), None);
    }

    proptest! {
        #[test]
        fn round_trip(code in 1u8..=10, payload in prop::collection::vec(any::<u8>(), 0..2000)) {
            let f = Frame::new(MsgType::from_code(code).unwrap(), payload);
            let bytes = f.encode().unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + f.payload.len());
            prop_assert_eq!(&Frame::decode(&bytes).unwrap(), &f);
            let mut stream = bytes.clone();
            stream.extend_from_slice(&bytes);
            let (first, used) = Frame::decode_prefix(&stream).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(&first, &f);
            prop_assert_eq!(&Frame::read_from(&mut stream.as_slice()).unwrap(), &f);
        }
    }
}
