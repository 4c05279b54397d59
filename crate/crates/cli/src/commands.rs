use crate::config::{LinkOverrides, RunConfig, SourceOverrides};
use crate::{Failure, EXIT_KMS};
use clap::{Args, ValueEnum};
use eqkd_core::kms::server::{KmsClient, Request};
use eqkd_core::kms::{key_id_hex, parse_key_id, KeyStore, Qos};
use eqkd_core::linkmodel::{extrapolate_skr, sweep_loss};
use eqkd_core::simulator::generate_session;
use eqkd_core::sync::{coarse_offset, fine_sync};
use eqkd_core::{ttag, Party};
use serde_json::json;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Args)]
pub struct SimulateArgs {
    /// TOML file with `preset` and a `[source]` table
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub source: SourceOverrides,
    /// Output directory for alice.ttag, bob.ttag and truth.json
    #[arg(long, short, default_value = ".")]
    pub out: PathBuf,
}

pub fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let file = RunConfig::load(args.config.as_deref())?;
    let p = args.source.resolve(&file.source, file.preset.as_deref())?;
    let (a, b, truth) = generate_session(&p).map_err(|e| Failure::usage(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::io(format!("{}: {e}", args.out.display())))?;
    for (stream, name) in [(&a, "alice.ttag"), (&b, "bob.ttag")] {
        let path = args.out.join(name);
        ttag::write_stream(stream, &path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    }
    let summary = json!({ "params": p, "truth": truth.summary() });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let path = args.out.join("truth.json");
    std::fs::write(&path, &text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    println!("{text}");
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args)]
pub struct LinkbudgetArgs {
    /// TOML file with a `[link]` table
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub link: LinkOverrides,
    /// Link distances, m (default: 100 m to 20 km)
    #[arg(long, value_delimiter = ',')]
    pub distance: Vec<f64>,
    /// Turbulence strengths Cn², m^(-2/3) (default: 1e-14, 1e-15, 1e-16)
    #[arg(long, value_delimiter = ',')]
    pub cn2: Vec<f64>,
    /// Measured SKR to extrapolate, bit/s
    #[arg(long, requires = "loss")]
    pub skr_base: Option<f64>,
    /// Extra loss for the extrapolation, dB
    #[arg(long, requires = "skr_base", allow_hyphen_values = true)]
    pub loss: Option<f64>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

pub fn linkbudget(args: &LinkbudgetArgs) -> Result<(), Failure> {
    let file = RunConfig::load(args.config.as_deref())?;
    if let (Some(base), Some(loss)) = (args.skr_base, args.loss) {
        if !(base.is_finite() && base >= 0.0 && loss.is_finite()) {
            return Err(Failure::usage("--skr-base must be non-negative and --loss finite"));
        }
        let skr = extrapolate_skr(base, loss);
        match args.format {
            Format::Csv => println!("skr_base_bps,extra_loss_db,skr_bps\n{base},{loss},{skr:.2}"),
            Format::Json => println!("{}", json!({ "skr_base_bps": base, "extra_loss_db": loss, "skr_bps": skr })),
        }
        return Ok(());
    }
    let p = args.link.resolve(&file.link);
    let distances = if args.distance.is_empty() {
        (1..=200).map(|i| i as f64 * 100.0).collect()
    } else {
        args.distance.clone()
    };
    let cn2s = if args.cn2.is_empty() { vec![1e-14, 1e-15, 1e-16] } else { args.cn2.clone() };
    let points = sweep_loss(&p, &distances, &cn2s).map_err(|e| Failure::usage(e.to_string()))?;
    match args.format {
        Format::Csv => {
            let mut out = String::from("L_m,cn2,loss_db\n");
            for pt in &points {
                let _ = writeln!(out, "{},{:e},{:.4}", pt.distance, pt.cn2, pt.loss_db);
            }
            print!("{out}");
        }
        Format::Json => println!("{}", serde_json::to_string_pretty(&points).expect("points serialize")),
    }
    Ok(())
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("store").required(true).args(["addr", "snapshot"])))]
pub struct KmsGetArgs {
    /// Address of a running key server
    #[arg(long)]
    pub addr: Option<String>,
    /// Key store snapshot file (updated in place)
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// Key length, bits
    #[arg(long)]
    pub length: usize,
    /// Fetch from this key (hex); otherwise from the oldest unused bits
    #[arg(long)]
    pub key_id: Option<String>,
    #[arg(long, default_value = "alice")]
    pub source: String,
    #[arg(long, default_value = "bob")]
    pub destination: String,
}

pub fn kms_get(args: &KmsGetArgs) -> Result<(), Failure> {
    let kms = |m: String| Failure::new(EXIT_KMS, m);
    if let Some(addr) = &args.addr {
        let mut client = KmsClient::connect(addr.as_str()).map_err(|e| Failure::new(crate::EXIT_CONNECT, format!("{addr}: {e}")))?;
        let mut call = |req: Request| {
            let resp = client.call(&req).map_err(|e| Failure::new(crate::EXIT_CONNECT, format!("{addr}: {e}")))?;
            if resp.is_ok() {
                Ok(resp)
            } else {
                Err(kms(format!("{}: {}", resp.status, resp.message.unwrap_or_default())))
            }
        };
        let open = call(Request::OpenConnect {
            source: args.source.clone(),
            destination: args.destination.clone(),
            qos: Qos::default(),
        })?;
        let ksid = open.ksid.ok_or_else(|| kms("server returned no ksid".into()))?;
        let got = call(Request::GetKey { ksid: ksid.clone(), length: args.length, key_id: args.key_id.clone() });
        let _ = call(Request::Close { ksid });
        let got = got?;
        println!("{}", json!({ "key_id": got.key_id, "length": got.length, "key_b64": got.key_b64 }));
        return Ok(());
    }
    let path = args.snapshot.as_ref().expect("clap enforces addr or snapshot");
    let mut store = KeyStore::load_snapshot(path).map_err(|e| kms(e.to_string()))?;
    let ksid = store.open_connect(&args.source, &args.destination, Qos::default()).map_err(|e| kms(e.to_string()))?;
    let got = match &args.key_id {
        Some(hex) => {
            let id = parse_key_id(hex).ok_or_else(|| Failure::usage(format!("bad key id {hex:?}")))?;
            store.get_key_with_id(&ksid, &id, args.length)
        }
        None => store.get_key(&ksid, args.length),
    }
    .map_err(|e| kms(e.to_string()))?;
    store.close(&ksid).map_err(|e| kms(e.to_string()))?;
    store.save_snapshot(path).map_err(|e| kms(e.to_string()))?;
    use base64::Engine as _;
    let b64 = base64::engine::general_purpose::STANDARD.encode(&got.bytes);
    println!("{}", json!({ "key_id": key_id_hex(&got.key_id), "length": got.length, "key_b64": b64 }));
    Ok(())
}

#[derive(Args)]
pub struct SyncArgs {
    /// Alice's TTAG1 file
    #[arg(long)]
    pub alice: PathBuf,
    /// Bob's TTAG1 file
    #[arg(long)]
    pub bob: PathBuf,
    /// TOML file; `[session.coarse]` and `[session.fine]` apply
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn sync(args: &SyncArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(args.config.as_deref())?.session;
    let read = |path: &PathBuf, party| {
        ttag::read_stream(path, party).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
    };
    let a = read(&args.alice, Party::Alice)?;
    let b = read(&args.bob, Party::Bob)?;
    let sync_err = |e: eqkd_core::sync::SyncError| Failure::new(crate::EXIT_ABORTED, e.to_string());
    let coarse = coarse_offset(a.times(), b.times(), &cfg.coarse).map_err(sync_err)?;
    let model = fine_sync(a.times(), b.times(), &coarse, &cfg.fine).map_err(sync_err)?;
    let out = json!({ "coarse": coarse, "model": model });
    println!("{}", serde_json::to_string_pretty(&out).expect("model serializes"));
    Ok(())
}
