use crate::config::{RunConfig, SessionFlags, SourceOverrides};
use crate::{Failure, EXIT_ABORTED, EXIT_CONNECT, EXIT_KMS};
use clap::Args;
use eqkd_core::auth::AuthKeys;
use eqkd_core::kms::server::KmsServer;
use eqkd_core::kms::{key_id_hex, KeyStore};
use eqkd_core::session::{run_session, stats, SessionOutcome, TcpChannel};
use eqkd_core::simulator::generate_session;
use eqkd_core::{ttag, Party, TagStream};
use serde_json::json;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

#[derive(Args)]
pub struct EndpointArgs {
    /// TOML file with `[session]`, `[endpoint]` and `[source]` tables
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Wait for the peer on this address
    #[arg(long, conflicts_with = "connect")]
    pub listen: Option<String>,
    /// Connect to the peer at this address
    #[arg(long)]
    pub connect: Option<String>,
    /// Own time-tag file (TTAG1); without it the source is simulated live
    #[arg(long)]
    pub tags: Option<PathBuf>,
    /// Pre-shared authentication key file
    #[arg(long)]
    pub psk: Option<PathBuf>,
    /// Key consumption ledger (default: <psk>.ledger)
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    /// Write per-bin statistics as CSV
    #[arg(long)]
    pub stats_csv: Option<PathBuf>,
    /// Write per-bin statistics as JSON
    #[arg(long)]
    pub stats_json: Option<PathBuf>,
    /// Key store snapshot: loaded if present, saved after a successful session
    #[arg(long)]
    pub kms_snapshot: Option<PathBuf>,
    /// After the session, serve the key store on this address until killed
    #[arg(long)]
    pub kms_serve: Option<String>,
    #[command(flatten)]
    pub session: SessionFlags,
    #[command(flatten)]
    pub source: SourceOverrides,
}

fn resolve_addr(addr: &str) -> Result<SocketAddr, Failure> {
    addr.to_socket_addrs()
        .map_err(|e| Failure::usage(format!("{addr}: {e}")))?
        .next()
        .ok_or_else(|| Failure::usage(format!("{addr}: no address")))
}

fn load_tags(role: Party, path: Option<&Path>, args: &EndpointArgs, file: &RunConfig) -> Result<TagStream, Failure> {
    if let Some(path) = path {
        return ttag::read_stream(path, role).map_err(|e| Failure::io(format!("{}: {e}", path.display())));
    }
    let p = args.source.resolve(&file.source, file.preset.as_deref())?;
    let (a, b, _) = generate_session(&p).map_err(|e| Failure::usage(e.to_string()))?;
    Ok(if role == Party::Alice { a } else { b })
}

fn open_store(role: Party, path: Option<&Path>) -> Result<KeyStore, Failure> {
    match path {
        Some(p) if p.exists() => KeyStore::load_snapshot(p).map_err(|e| Failure::new(EXIT_KMS, e.to_string())),
        _ => Ok(KeyStore::new(role.to_string(), role.peer().to_string())),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn summary(role: Party, out: &SessionOutcome, psk_left: usize) -> serde_json::Value {
    let m = &out.metrics;
    json!({
        "role": role.to_string(),
        "stage": out.state.stage().to_string(),
        "authenticated": out.is_authenticated(),
        "key_id": out.key.as_ref().map(|k| key_id_hex(&k.key_id)),
        "n_fin": m.n_fin,
        "qber": m.qber,
        "skr_bps": if out.is_authenticated() { m.skr_bps() } else { 0.0 },
        "abort": out.abort.as_ref().map(|a| json!({
            "stage": a.stage.to_string(),
            "reason": a.reason,
            "by_peer": a.by_peer,
        })),
        "kms_error": out.kms_error,
        "psk_bytes_left": psk_left,
        "metrics": m,
    })
}

pub fn run(role: Party, args: &EndpointArgs) -> Result<(), Failure> {
    let file = RunConfig::load(args.config.as_deref())?;
    let ep = &file.endpoint;
    let cfg = args.session.apply(file.session.clone())?;
    let listen = args.listen.clone().or_else(|| if args.connect.is_none() { ep.listen.clone() } else { None });
    let connect = args.connect.clone().or_else(|| if args.listen.is_none() { ep.connect.clone() } else { None });
    let (listen, connect) = match (listen, connect) {
        (Some(_), Some(_)) | (None, None) => return Err(Failure::usage("give exactly one of --listen and --connect")),
        pair => pair,
    };
    let psk = args.psk.clone().or_else(|| ep.psk.clone()).ok_or_else(|| Failure::usage("--psk is required"))?;
    let ledger = args.ledger.clone().or_else(|| ep.ledger.clone()).unwrap_or_else(|| {
        let mut s = psk.clone().into_os_string();
        s.push(".ledger");
        s.into()
    });
    let snapshot = args.kms_snapshot.clone().or_else(|| ep.kms_snapshot.clone());
    let stats_csv = args.stats_csv.clone().or_else(|| ep.stats_csv.clone());
    let stats_json = args.stats_json.clone().or_else(|| ep.stats_json.clone());
    let kms_serve = args.kms_serve.clone().or_else(|| ep.kms_serve.clone());

    let tags_path = args.tags.clone().or_else(|| ep.tags.clone());
    let tags = load_tags(role, tags_path.as_deref(), args, &file)?;
    let mut keys = AuthKeys::open(&psk, &ledger).map_err(|e| Failure::io(format!("{}: {e}", psk.display())))?;
    let store = Arc::new(Mutex::new(open_store(role, snapshot.as_deref())?));

    let timeout = Duration::from_secs_f64(cfg.timeout_s);
    let unreachable = |addr: &str, e: eqkd_core::session::ChannelError| Failure::new(EXIT_CONNECT, format!("{addr}: {e}"));
    let mut channel = if let Some(addr) = listen {
        let listener = TcpListener::bind(resolve_addr(&addr)?).map_err(|e| Failure::new(EXIT_CONNECT, format!("{addr}: {e}")))?;
        TcpChannel::accept(&listener, role, timeout).map_err(|e| unreachable(&addr, e))?
    } else {
        let addr = connect.expect("one of listen/connect");
        TcpChannel::connect(resolve_addr(&addr)?, role, timeout).map_err(|e| unreachable(&addr, e))?
    };

    let out = run_session(role, &tags, &cfg, &mut channel, &mut keys, Some(&store));
    drop(channel);
    let rows = out.stats_rows();
    if let Some(path) = &stats_csv {
        write_file(path, &stats::to_csv(&rows))?;
    }
    if let Some(path) = &stats_json {
        write_file(path, &stats::to_json(&rows))?;
    }
    println!("{}", serde_json::to_string_pretty(&summary(role, &out, keys.remaining())).expect("summary serializes"));

    if let Some(a) = &out.abort {
        let who = if a.by_peer { "by peer " } else { "" };
        return Err(Failure::new(EXIT_ABORTED, format!("session aborted {who}after stage {}: {}", a.stage, a.reason)));
    }
    if let Some(e) = &out.kms_error {
        return Err(Failure::new(EXIT_KMS, e.clone()));
    }
    if let Some(path) = &snapshot {
        store.lock().expect("store lock").save_snapshot(path).map_err(|e| Failure::new(EXIT_KMS, e.to_string()))?;
    }
    if let Some(addr) = kms_serve {
        let server = KmsServer::spawn(addr.as_str(), store).map_err(|e| Failure::new(EXIT_KMS, format!("{addr}: {e}")))?;
        eprintln!("eqkd: key store listening on {}", server.addr());
        server.join();
    }
    Ok(())
}
