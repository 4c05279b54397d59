//! Reliable ordered duplex transports for frames.

use super::frame::{Frame, FrameError, HEADER_LEN};
use crate::tags::Party;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub const PROTOCOL_MAGIC: &[u8; 4] = b"EQKD";
pub const PROTOCOL_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error("channel closed by the peer")]
    Closed,
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for ChannelError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ChannelError::Timeout,
            io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset | io::ErrorKind::BrokenPipe => {
                ChannelError::Closed
            }
            _ => ChannelError::Io(e),
        }
    }
}

pub trait Channel {
    /// Sends one encoded frame.
    fn send_bytes(&mut self, bytes: Vec<u8>) -> Result<(), ChannelError>;
    /// Receives one encoded frame.
    fn recv_bytes(&mut self, timeout: Duration) -> Result<Vec<u8>, ChannelError>;
}

/// Sees every frame in transit (as encoded bytes, with its sender) and may
/// alter it.
pub type Interceptor = Arc<Mutex<dyn FnMut(Party, &mut Vec<u8>) + Send>>;

/// In-memory channel end.
pub struct LoopbackChannel {
    me: Party,
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    tap: Option<Interceptor>,
}

pub fn loopback_pair(tap: Option<Interceptor>) -> (LoopbackChannel, LoopbackChannel) {
    let (tx_ab, rx_ab) = mpsc::channel();
    let (tx_ba, rx_ba) = mpsc::channel();
    (
        LoopbackChannel { me: Party::Alice, tx: tx_ab, rx: rx_ba, tap: tap.clone() },
        LoopbackChannel { me: Party::Bob, tx: tx_ba, rx: rx_ab, tap },
    )
}

impl Channel for LoopbackChannel {
    fn send_bytes(&mut self, mut bytes: Vec<u8>) -> Result<(), ChannelError> {
        if let Some(tap) = &self.tap {
            (tap.lock().unwrap_or_else(|p| p.into_inner()))(self.me, &mut bytes);
        }
        self.tx.send(bytes).map_err(|_| ChannelError::Closed)
    }

    fn recv_bytes(&mut self, timeout: Duration) -> Result<Vec<u8>, ChannelError> {
        match self.rx.recv_timeout(timeout) {
            Ok(b) => Ok(b),
            Err(RecvTimeoutError::Timeout) => Err(ChannelError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(ChannelError::Closed),
        }
    }
}

/// Stream-socket channel.
pub struct TcpChannel {
    stream: TcpStream,
}

impl TcpChannel {
    /// Connects, retrying until `timeout` elapses, then runs the HELLO
    /// prologue.
    pub fn connect(addr: SocketAddr, me: Party, timeout: Duration) -> Result<Self, ChannelError> {
        let deadline = Instant::now() + timeout;
        let stream = loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(ChannelError::Timeout);
            }
            match TcpStream::connect_timeout(&addr, left.min(Duration::from_secs(1))) {
                Ok(s) => break s,
                Err(_) => std::thread::sleep(Duration::from_millis(100).min(left)),
            }
        };
        Self::establish(stream, me, timeout)
    }

    /// Waits for one peer on `listener`.
    pub fn accept(listener: &TcpListener, me: Party, timeout: Duration) -> Result<Self, ChannelError> {
        listener.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        let stream = loop {
            match listener.accept() {
                Ok((s, _)) => break s,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(ChannelError::Timeout);
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_nonblocking(false)?;
        Self::establish(stream, me, timeout)
    }

    fn establish(mut stream: TcpStream, me: Party, timeout: Duration) -> Result<Self, ChannelError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        hello(&mut stream, me)?;
        Ok(Self { stream })
    }
}

/// Exchanges the prologue `EQKD`, version, role and checks the peer's.
pub fn hello<S: Read + Write>(stream: &mut S, me: Party) -> Result<(), ChannelError> {
    let role = |p: Party| if p == Party::Alice { b'A' } else { b'B' };
    let mut mine = PROTOCOL_MAGIC.to_vec();
    mine.extend([PROTOCOL_VERSION, role(me)]);
    stream.write_all(&mine)?;
    stream.flush()?;
    let mut theirs = [0u8; 6];
    stream.read_exact(&mut theirs)?;
    if &theirs[..4] != PROTOCOL_MAGIC {
        return Err(ChannelError::Handshake("peer is not speaking this protocol".into()));
    }
    if theirs[4] != PROTOCOL_VERSION {
        return Err(ChannelError::Handshake(format!(
            "protocol version {} (peer) vs {PROTOCOL_VERSION} (local)",
            theirs[4]
        )));
    }
    if theirs[5] != role(me.peer()) {
        return Err(ChannelError::Handshake(format!("peer also claims the {me} role")));
    }
    Ok(())
}

impl Channel for TcpChannel {
    fn send_bytes(&mut self, bytes: Vec<u8>) -> Result<(), ChannelError> {
        self.stream.write_all(&bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv_bytes(&mut self, timeout: Duration) -> Result<Vec<u8>, ChannelError> {
        self.stream.set_read_timeout(Some(timeout))?;
        let frame = Frame::read_from(&mut self.stream).map_err(|e| match e {
            FrameError::Io(io) => ChannelError::from(io),
            other => ChannelError::Frame(other),
        })?;
        let mut bytes = Vec::with_capacity(HEADER_LEN + frame.payload.len());
        bytes.extend_from_slice(&(frame.payload.len() as u32).to_be_bytes());
        bytes.push(frame.kind.code());
        bytes.extend_from_slice(&frame.payload);
        Ok(bytes)
    }
}
