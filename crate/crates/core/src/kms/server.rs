//! Local socket API: each message is a 4-byte big-endian length followed by
//! a JSON document.
//!
//! ```text
//! {"op":"open_connect","source":"alice","destination":"bob","qos":{"reserve_bits":0}}
//! {"op":"get_key","ksid":"…","length":256}
//! {"op":"get_key","ksid":"…","length":256,"key_id":"<32 hex digits>"}
//! {"op":"close","ksid":"…"}
//! ```
//!
//! Responses carry `status` (`ok`, `busy`, `unknown_link`, `unknown_ksid`,
//! `starvation`, `unknown_key_id`, `bad_request`, `error`) and, where
//! relevant, `ksid`, `key_id`, `key_b64`, `length` and `message`.

use super::{key_id_hex, parse_key_id, KeyStore, KmsError, Qos};
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

const MAX_MESSAGE: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    OpenConnect {
        source: String,
        destination: String,
        #[serde(default)]
        qos: Qos,
    },
    GetKey {
        ksid: String,
        length: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key_id: Option<String>,
    },
    Close {
        ksid: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ksid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Response {
    fn ok() -> Self {
        Self { status: "ok".into(), ..Self::default() }
    }

    fn error(e: &KmsError) -> Self {
        Self { status: e.status().into(), message: Some(e.to_string()), ..Self::default() }
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        Self { status: "bad_request".into(), message: Some(msg.into()), ..Self::default() }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn handle(store: &mut KeyStore, req: &Request) -> Response {
    let result = match req {
        Request::OpenConnect { source, destination, qos } => store
            .open_connect(source, destination, *qos)
            .map(|ksid| Response { ksid: Some(ksid), ..Response::ok() }),
        Request::GetKey { ksid, length, key_id } => {
            let got = match key_id {
                None => store.get_key(ksid, *length),
                Some(s) => match parse_key_id(s) {
                    Some(id) => store.get_key_with_id(ksid, &id, *length),
                    None => return Response::bad_request(format!("malformed key id {s:?}")),
                },
            };
            got.map(|d| Response {
                ksid: Some(ksid.clone()),
                key_id: Some(key_id_hex(&d.key_id)),
                key_b64: Some(base64::engine::general_purpose::STANDARD.encode(&d.bytes)),
                length: Some(d.length),
                ..Response::ok()
            })
        }
        Request::Close { ksid } => store.close(ksid).map(|_| Response::ok()),
    };
    result.unwrap_or_else(|e| Response::error(&e))
}

pub fn write_message<W: Write>(w: &mut W, value: &impl Serialize) -> io::Result<()> {
    let body = serde_json::to_vec(value).map_err(io::Error::other)?;
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

pub fn read_message<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> io::Result<T> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_MESSAGE {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("message of {len} bytes too large")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn serve_connection(mut stream: TcpStream, store: Arc<Mutex<KeyStore>>) {
    loop {
        let req: io::Result<Request> = read_message(&mut stream);
        let resp = match req {
            Ok(req) => handle(&mut store.lock().unwrap_or_else(|p| p.into_inner()), &req),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => Response::bad_request(e.to_string()),
            Err(_) => return,
        };
        if write_message(&mut stream, &resp).is_err() {
            return;
        }
    }
}

/// A running socket server; stopped when dropped.
pub struct KmsServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl KmsServer {
    pub fn spawn(addr: impl ToSocketAddrs, store: Arc<Mutex<KeyStore>>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = conn {
                    let store = store.clone();
                    std::thread::spawn(move || serve_connection(stream, store));
                }
            }
        });
        Ok(Self { addr, stop, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server is stopped from another handle or process.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for KmsServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// A blocking client holding one connection.
pub struct KmsClient {
    stream: TcpStream,
}

impl KmsClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        Ok(Self { stream })
    }

    pub fn call(&mut self, req: &Request) -> io::Result<Response> {
        write_message(&mut self.stream, req)?;
        read_message(&mut self.stream)
    }
}
