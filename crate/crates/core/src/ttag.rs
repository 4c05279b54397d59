//! `TTAG1` tag-stream files.
//!
//! Layout: 8-byte magic `TTAG1\0\0\0`, little-endian `u64` record count,
//! then per record a little-endian `u64` picosecond timestamp followed by
//! one channel byte (0=H, 1=V, 2=D, 3=A).
//!
//! A text form with one `timestamp,channel` pair per line is also read and
//! written for debugging; `#` starts a comment.

use crate::tags::{DetectorChannel, Party, TagError, TagStream, TimeTag};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 8] = *b"TTAG1\0\0\0";
const RECORD_LEN: usize = 9;

#[derive(Debug, thiserror::Error)]
pub enum TtagError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: not a TTAG1 file")]
    BadMagic,
    #[error("record {index}: invalid channel code {code}")]
    BadChannel { index: u64, code: u8 },
    #[error("line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error(transparent)]
    Order(#[from] TagError),
}

pub fn write_stream(stream: &TagStream, path: impl AsRef<Path>) -> Result<(), TtagError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(stream, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_to<W: Write>(stream: &TagStream, w: &mut W) -> Result<(), TtagError> {
    w.write_all(&MAGIC)?;
    w.write_all(&(stream.len() as u64).to_le_bytes())?;
    let mut rec = [0u8; RECORD_LEN];
    for tag in stream.iter() {
        rec[..8].copy_from_slice(&tag.t.to_le_bytes());
        rec[8] = tag.ch.code();
        w.write_all(&rec)?;
    }
    Ok(())
}

/// Reads a `TTAG1` file. The format carries no party label, so the caller
/// supplies it.
pub fn read_stream(path: impl AsRef<Path>, party: Party) -> Result<TagStream, TtagError> {
    let path = path.as_ref();
    let epoch = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_from(&mut BufReader::new(File::open(path)?), party, epoch)
}

pub fn read_from<R: Read>(
    r: &mut R,
    party: Party,
    epoch: impl Into<String>,
) -> Result<TagStream, TtagError> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TtagError::BadMagic,
        _ => e.into(),
    })?;
    if head[..8] != MAGIC {
        return Err(TtagError::BadMagic);
    }
    let count = u64::from_le_bytes(head[8..].try_into().unwrap());
    // Cap the preallocation; a corrupt count should fail on read, not OOM.
    let mut s = TagStream::with_capacity(party, epoch, count.min(1 << 24) as usize);
    let mut rec = [0u8; RECORD_LEN];
    for index in 0..count {
        r.read_exact(&mut rec)?;
        let t = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let ch = DetectorChannel::from_code(rec[8])
            .ok_or(TtagError::BadChannel { index, code: rec[8] })?;
        s.push(TimeTag::new(t, ch))?;
    }
    Ok(s)
}

pub fn read_text<R: BufRead>(
    r: R,
    party: Party,
    epoch: impl Into<String>,
) -> Result<TagStream, TtagError> {
    let mut s = TagStream::new(party, epoch);
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let bad = |msg: String| TtagError::BadLine { line: n + 1, msg };
        let (t, ch) = body
            .split_once(',')
            .ok_or_else(|| bad("expected `timestamp,channel`".into()))?;
        let t: u64 = t.trim().parse().map_err(|e| bad(format!("timestamp: {e}")))?;
        let ch: DetectorChannel = ch.parse().map_err(bad)?;
        s.push(TimeTag::new(t, ch))?;
    }
    Ok(s)
}

pub fn write_text<W: Write>(stream: &TagStream, w: &mut W) -> io::Result<()> {
    for tag in stream.iter() {
        writeln!(w, "{},{}", tag.t, tag.ch)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stream(n: usize, seed: u64) -> TagStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = 0u64;
        let mut s = TagStream::new(Party::Bob, "rand");
        for _ in 0..n {
            t += rng.random_range(0..5_000_000);
            let ch = DetectorChannel::from_code(rng.random_range(0..4)).unwrap();
            if s.push(TimeTag::new(t, ch)).is_err() {
                t += 1;
                s.push(TimeTag::new(t, ch)).unwrap();
            }
        }
        s
    }

    #[test]
    fn empty_stream_is_sixteen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ttag");
        write_stream(&TagStream::new(Party::Alice, ""), &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16);
        assert!(read_stream(&path, Party::Alice).unwrap().is_empty());
    }

    #[test]
    fn ten_thousand_tags_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ttag");
        let s = random_stream(10_000, 3);
        write_stream(&s, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 9 * 10_000);
        let back = read_stream(&path, Party::Bob).unwrap();
        assert_eq!(back.times(), s.times());
        assert_eq!(back.channels(), s.channels());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut buf = Vec::new();
        write_to(&random_stream(3, 1), &mut buf).unwrap();
        buf[0] ^= 0x20;
        assert!(matches!(
            read_from(&mut buf.as_slice(), Party::Alice, ""),
            Err(TtagError::BadMagic)
        ));
        assert!(matches!(
            read_from(&mut &b"TTAG"[..], Party::Alice, ""),
            Err(TtagError::BadMagic)
        ));
    }

    #[test]
    fn bad_channel_and_truncation() {
        let mut buf = Vec::new();
        write_to(&random_stream(2, 5), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[16 + 8] = 7;
        assert!(matches!(
            read_from(&mut bad.as_slice(), Party::Alice, ""),
            Err(TtagError::BadChannel { index: 0, code: 7 })
        ));
        buf.pop();
        assert!(matches!(
            read_from(&mut buf.as_slice(), Party::Alice, ""),
            Err(TtagError::Io(_))
        ));
    }

    #[test]
    fn text_form() {
        let text = "# debug dump\n100,H\n250, A\n\n250,3 # same as A\n900,v\n";
        let s = read_text(text.as_bytes(), Party::Alice, "t").unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.get(1), TimeTag::new(250, DetectorChannel::A));
        let mut out = Vec::new();
        write_text(&s, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "100,H\n250,A\n250,A\n900,V\n");
        assert!(matches!(
            read_text("12;H\n".as_bytes(), Party::Alice, ""),
            Err(TtagError::BadLine { line: 1, .. })
        ));
        assert!(matches!(
            read_text("5,H\n4,H\n".as_bytes(), Party::Alice, ""),
            Err(TtagError::Order(_))
        ));
    }
}
