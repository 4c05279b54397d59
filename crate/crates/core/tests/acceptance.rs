//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 3 4`.

use eqkd_core::auth::{AuthKeys, FieldSize, GfElement, Transcript};
use eqkd_core::cascade::{reconcile_local, CascadeConfig};
use eqkd_core::kms::{session_key_id, KeyStore, KmsError, Qos};
use eqkd_core::linkmodel::{beam_spread_loss_db, extrapolate_skr, LinkParams};
use eqkd_core::privacy::{final_length, tau, toeplitz_pa, FinalKeyParams, PaSeed};
use eqkd_core::rng::seeded;
use eqkd_core::session::{loopback_pair, run_session, Interceptor, MsgType, SessionConfig, SessionOutcome, Stage};
use eqkd_core::simulator::{generate_session, SourceParams};
use eqkd_core::sync::{coarse_offset, fine_sync, match_coincidences, CoarseConfig, FineConfig, OffsetModel, PS_PER_S};
use eqkd_core::{BitBlock, Party, TagStream};
use rand::seq::index::sample;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp};
use std::sync::{Arc, Mutex};
use std::time::Instant;

/// Criteria that currently fail; they are still run and reported.
const KNOWN_FAILURES: &[u32] = &[5];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Verdict); 8] = [
        (1, "benchmark end-to-end rate", benchmark_rate),
        (2, "accidental coincidences", accidentals),
        (3, "link budget anchors", link_budget),
        (4, "formula exactness", formulas),
        (5, "oracle equivalences", oracle_equivalences),
        (6, "sync recovery", sync_recovery),
        (7, "security behaviour", security),
        (8, "key management", kms),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let v = run();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {tag}: {name}: {} [{:.1} s]", v.detail, t0.elapsed().as_secs_f64());
        if v.pass == KNOWN_FAILURES.contains(&id) {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected outcome for criteria {unexpected:?} (known failures: {KNOWN_FAILURES:?})");
        std::process::exit(1);
    }
}

struct Pair {
    alice: SessionOutcome,
    bob: SessionOutcome,
    kms_a: KeyStore,
    kms_b: KeyStore,
}

fn psk() -> Vec<u8> {
    let mut rng = seeded(0x5eed);
    let mut out = vec![0u8; 4096];
    rng.fill_bytes(&mut out);
    out
}

fn run_pair(a: &TagStream, b: &TagStream, cfg_a: &SessionConfig, cfg_b: &SessionConfig, tap: Option<Interceptor>) -> Pair {
    let (mut ch_a, mut ch_b) = loopback_pair(tap);
    let (b, cfg_b) = (b.clone(), cfg_b.clone());
    let bob = std::thread::spawn(move || {
        let kms = Mutex::new(KeyStore::new("bob", "alice"));
        let mut keys = AuthKeys::from_bytes(psk());
        let out = run_session(Party::Bob, &b, &cfg_b, &mut ch_b, &mut keys, Some(&kms));
        (out, kms.into_inner().unwrap())
    });
    let kms = Mutex::new(KeyStore::new("alice", "bob"));
    let mut keys = AuthKeys::from_bytes(psk());
    let alice = run_session(Party::Alice, a, cfg_a, &mut ch_a, &mut keys, Some(&kms));
    drop(ch_a);
    let (bob, kms_b) = bob.join().unwrap();
    Pair { alice, bob, kms_a: kms.into_inner().unwrap(), kms_b }
}

fn benchmark_rate() -> Verdict {
    let t0 = Instant::now();
    let p = SourceParams { duration: 60.0, seed: 2024, ..SourceParams::jena_night() };
    let (a, b, _) = generate_session(&p).unwrap();
    let cfg = |s| SessionConfig { seed: Some(s), ..SessionConfig::default() };
    let r = run_pair(&a, &b, &cfg(1), &cfg(2), None);
    let elapsed = t0.elapsed().as_secs_f64();
    let m = &r.alice.metrics;
    let same = r.alice.is_authenticated() && r.bob.is_authenticated() && r.alice.key.is_some() && r.alice.key == r.bob.key;
    let skr = m.skr_bps();
    let pass = same && (4000.0..=7000.0).contains(&skr) && elapsed < 300.0;
    verdict(
        pass,
        format!(
            "SKR {:.2} kbps (band 4.0..7.0), keys identical: {same}, N_fin {}, singles {:.3} Mcps / {:.1} kcps, coincidences {:.2} kcps, QBER {:.2}%, runtime {elapsed:.0} s (< 300 s)",
            skr / 1e3,
            m.n_fin,
            m.singles_a as f64 / m.span_s / 1e6,
            m.singles_b as f64 / m.span_s / 1e3,
            m.n_coinc as f64 / m.span_s / 1e3,
            100.0 * m.qber,
        ),
    )
}

fn poisson_times(rate: f64, duration_s: f64, rng: &mut impl Rng) -> Vec<u64> {
    let gap = Exp::new(rate / PS_PER_S as f64).unwrap();
    let end = duration_s * PS_PER_S as f64;
    let mut t = 0.0;
    let mut out = Vec::with_capacity((rate * duration_s * 1.01) as usize);
    loop {
        t += gap.sample(rng);
        if t >= end {
            return out;
        }
        out.push(t as u64);
    }
}

fn accidentals() -> Verdict {
    let (ra, rb, window_s, duration) = (1.03e6, 190e3, 1e-9, 10.0);
    let oracle = ra * rb * window_s;
    let mut rng = seeded(7);
    let a = poisson_times(ra, duration, &mut rng);
    let b = poisson_times(rb, duration, &mut rng);
    let rate = match_coincidences(&a, &b, &OffsetModel::constant(0), 1000).len() as f64 / duration;
    let rel = (rate - oracle).abs() / oracle;
    verdict(rel <= 0.10, format!("{rate:.1} cps vs {oracle:.1} cps ({:.1}% off, limit 10%)", 100.0 * rel))
}

fn link_budget() -> Verdict {
    let at = |d: f64| beam_spread_loss_db(&LinkParams::default().with_distance(d).with_cn2(1e-15));
    let (near, far) = (at(1700.0), at(10_000.0));
    let skr = extrapolate_skr(5600.0, 2.1);
    let pass = near <= 0.3 && (1.3..=2.9).contains(&far) && (3300.0..=3600.0).contains(&skr);
    verdict(pass, format!("1.7 km {near:.3} dB (<= 0.3), 10 km {far:.3} dB (1.3..2.9), 5.6 kbps at +2.1 dB -> {skr:.1} bps (3300..3600)"))
}

/// Binary entropy through `ln`/`ln_1p`, independent of the library path.
fn h_oracle(e: f64) -> f64 {
    -(e * e.ln() + (1.0 - e) * (-e).ln_1p()) / std::f64::consts::LN_2
}

fn formulas() -> Verdict {
    // 1 - h(0.02) to 50 digits, from decimal-arithmetic logarithms.
    const TAU_002: f64 = 0.858_559_457_458_179_354_845_621;
    let edges = tau(0.0) == 1.0 && [0.5000001, 0.6, 0.75, 1.0].iter().all(|&e| tau(e) == 0.0);
    let dev = (tau(0.02) - TAU_002).abs();
    let mut rng = seeded(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n_in = rng.random_range(0..2_000_000usize);
        let e = rng.random_range(0.0..0.6);
        let n_dis = rng.random_range(0..n_in.max(1));
        let n_mar = rng.random_range(0..1000usize);
        let t = if e > 0.5 { 0.0 } else { 1.0 - h_oracle(e) };
        let expect = ((n_in as f64 * t).floor() - n_dis as f64 - n_mar as f64).max(0.0) as usize;
        if final_length(&FinalKeyParams { n_in, e, n_dis, n_mar }) != expect {
            mismatches += 1;
        }
    }
    verdict(
        edges && dev <= 1e-6 && mismatches == 0,
        format!("tau edges ok: {edges}, |tau(0.02) - {TAU_002:.9}| = {dev:.1e} (<= 1e-6), final_length mismatches {mismatches}/1000"),
    )
}

/// Shift-and-add product of two n-bit polynomials, then long division by
/// `x^n + r`.
fn gf_oracle(n: usize, r: u64, a: &[u64; 4], b: &[u64; 4]) -> [u64; 4] {
    let bit = |w: &[u64], i: usize| (w[i / 64] >> (i % 64)) & 1 == 1;
    let mut p = [0u64; 9];
    for i in (0..n).filter(|&i| bit(a, i)) {
        for j in (0..n).filter(|&j| bit(b, j)) {
            p[(i + j) / 64] ^= 1 << ((i + j) % 64);
        }
    }
    for d in (n..2 * n).rev() {
        if bit(&p, d) {
            p[d / 64] ^= 1 << (d % 64);
            for k in (0..64).filter(|&k| (r >> k) & 1 == 1) {
                let t = d - n + k;
                p[t / 64] ^= 1 << (t % 64);
            }
        }
    }
    [p[0], p[1], p[2], p[3]]
}

fn toeplitz_oracle(key: &BitBlock, seed: &BitBlock, n_fin: usize) -> BitBlock {
    let n_in = key.len();
    BitBlock::from_bools((0..n_fin).map(|i| {
        let row = seed.slice(n_fin - 1 - i, n_fin - 1 - i + n_in);
        row.words().iter().zip(key.words()).map(|(x, y)| (x & y).count_ones()).sum::<u32>() % 2 == 1
    }))
}

fn oracle_equivalences() -> Verdict {
    let mut rng = seeded(5);
    let mut gf_bad = 0;
    for (n, r) in [(32usize, 0x8d), (64, 0x1b), (96, 0x6f), (128, 0x87), (256, 0x425)] {
        let size = FieldSize::try_from(n as u32).unwrap();
        for _ in 0..1000 {
            let (x, y) = (GfElement::random(size, &mut rng), GfElement::random(size, &mut rng));
            if x.mul(&y).unwrap().limbs() != gf_oracle(n, r, &x.limbs(), &y.limbs()) {
                gf_bad += 1;
            }
        }
    }

    let mut tp_bad = 0;
    for _ in 0..1000 {
        let n_in = rng.random_range(1..3000usize);
        let n_fin = rng.random_range(1..=n_in);
        let key = BitBlock::random(n_in, &mut rng);
        let seed = PaSeed::random(n_in, n_fin, &mut rng).unwrap();
        if toeplitz_pa(&key, &seed).unwrap() != toeplitz_oracle(&key, seed.bits(), n_fin) {
            tp_bad += 1;
        }
    }

    // Five independent sets of 1000 cases; each set must be clean.
    let (sets, cases) = (5u64, 1000u64);
    let (mut differ, mut leaky, mut worst_f, mut clean_sets) = (0, 0, 0.0f64, 0);
    let cfg = CascadeConfig::default();
    for set in 0..sets {
        let mut rng = seeded(500 + set);
        let (d0, l0) = (differ, leaky);
        for case in 0..cases {
            let n = (1024.0 * 16f64.powf(rng.random::<f64>())) as usize;
            let e = rng.random_range(0.005..=0.05);
            let a = BitBlock::random(n, &mut rng);
            let mut b = a.clone();
            let n_err = ((e * n as f64).round() as usize).max(1);
            for i in sample(&mut rng, n, n_err).iter() {
                b.flip(i);
            }
            let e_real = n_err as f64 / n as f64;
            let (out, disclosed) = reconcile_local(&a, &b, e_real, &cfg, &case.to_be_bytes()).unwrap();
            if out.key != a {
                differ += 1;
            }
            let f = disclosed as f64 / (n as f64 * h_oracle(e_real));
            worst_f = worst_f.max(f);
            if f > 1.35 {
                leaky += 1;
            }
        }
        if differ == d0 && leaky == l0 {
            clean_sets += 1;
        }
    }
    let total = sets * cases;
    verdict(
        gf_bad == 0 && tp_bad == 0 && clean_sets == sets,
        format!(
            "gf_mul mismatches {gf_bad}/5000, toeplitz mismatches {tp_bad}/1000, cascade (n 1024..16384, e 0.005..0.05): {clean_sets}/{sets} sets clean, keys differ {differ}/{total}, f > 1.35 in {leaky}/{total} (worst {worst_f:.2})"
        ),
    )
}

fn sync_recovery() -> Verdict {
    let mut rng = seeded(6);
    let mut planted = vec![(5.0, 1e-5), (-5.0, -1e-5), (-5.0, 1e-5), (5.0, -1e-5)];
    for _ in 0..4 {
        planted.push((rng.random_range(-5.0..5.0), rng.random_range(-1e-5..1e-5)));
    }
    let (mut worst, mut failed, mut blocks) = (0.0f64, 0, 0);
    for (i, &(offset, drift)) in planted.iter().enumerate() {
        let p = SourceParams {
            duration: 2.0,
            seed: 600 + i as u64,
            clock_offset: offset,
            clock_drift: drift,
            clock_epoch: 6.0,
            ..SourceParams::jena_night()
        };
        let (a, b, truth) = generate_session(&p).unwrap();
        let model = coarse_offset(a.times(), b.times(), &CoarseConfig::default())
            .and_then(|c| fine_sync(a.times(), b.times(), &c, &FineConfig::default()));
        match model {
            Ok(m) => {
                for blk in &m.blocks {
                    let mid = (blk.t_start as f64 + blk.t_end as f64) / 2.0;
                    worst = worst.max((blk.offset_ps as f64 - truth.offset_at_bob_time_ps(mid)).abs());
                    blocks += 1;
                }
            }
            Err(_) => failed += 1,
        }
    }
    let mut silent = 0;
    for s in 0..3u64 {
        let (a, _, _) = generate_session(&SourceParams { duration: 1.0, seed: 700 + s, ..SourceParams::jena_night() }).unwrap();
        let (_, b, _) = generate_session(&SourceParams { duration: 1.0, seed: 800 + s, ..SourceParams::jena_night() }).unwrap();
        match coarse_offset(a.times(), b.times(), &CoarseConfig::default()) {
            Err(e) if e.to_string() == "no sync found" => {}
            _ => silent += 1,
        }
    }
    verdict(
        failed == 0 && worst <= 500.0 && silent == 0,
        format!(
            "{} planted offset/drift pairs (|offset| <= 5 s, |drift| <= 1e-5): {failed} lost, worst block error {worst:.0} ps over {blocks} blocks (<= 500 ps); uncorrelated pairs without \"no sync found\": {silent}/3",
            planted.len()
        ),
    )
}

fn recorder(log: Arc<Mutex<Vec<(Party, Vec<u8>)>>>) -> Interceptor {
    Arc::new(Mutex::new(move |from: Party, bytes: &mut Vec<u8>| log.lock().unwrap().push((from, bytes.clone()))))
}

fn tag(frames: &[&[u8]], k: GfElement, otp: &GfElement) -> GfElement {
    let mut t = Transcript::new(k);
    for f in frames {
        t.update(f);
    }
    t.state().add(otp).unwrap()
}

/// P(X >= k) for X ~ Poisson(mu).
fn poisson_tail(mu: f64, k: u64) -> f64 {
    let (mut term, mut below) = ((-mu).exp(), 0.0);
    for i in 0..k {
        below += term;
        term *= mu / (i + 1) as f64;
    }
    (1.0 - below).max(0.0)
}

fn security() -> Verdict {
    let size = FieldSize::N32;
    let p = SourceParams { duration: 1.0, seed: 31, ..SourceParams::jena_night() };
    let (a, b, _) = generate_session(&p).unwrap();
    let cfg = |s| {
        let mut c = SessionConfig { seed: Some(s), auth_bits: size, timeout_s: 20.0, ..SessionConfig::default() };
        c.coarse.search_range_ps = 2 * PS_PER_S;
        c.coarse.max_drift = 1e-6;
        c
    };

    // Reference run: record every frame, check nothing of the key is on the wire.
    let log = Arc::new(Mutex::new(Vec::new()));
    let clean = run_pair(&a, &b, &cfg(1), &cfg(2), Some(recorder(log.clone())));
    let frames = std::mem::take(&mut *log.lock().unwrap());
    let key_ok = clean.alice.is_authenticated() && clean.alice.key.is_some() && clean.alice.key == clean.bob.key;
    let wire: Vec<u8> = frames.iter().flat_map(|(_, f)| f.iter().copied()).collect();
    let key_bytes = clean.alice.key.as_ref().map(|k| k.bits.to_bytes()).unwrap_or_default();
    let leaked = key_bytes.chunks_exact(16).filter(|w| wire.windows(16).any(|x| x == *w)).count();

    // Transcript-level trials over the recorded frames, fresh hash key and pad each time.
    let mut rng = seeded(77);
    let hashed: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].1[4] != MsgType::AuthTag.code()).collect();
    let (trials, mut undetected, mut mu) = (10_000, 0u64, 0.0);
    for _ in 0..trials {
        let target = hashed[rng.random_range(0..hashed.len())];
        let from = frames[target].0;
        let dir: Vec<usize> = hashed.iter().copied().filter(|&i| frames[i].0 == from).collect();
        let mut tampered = frames[target].1.clone();
        let bit = rng.random_range(0..tampered.len() * 8);
        tampered[bit / 8] ^= 1 << (bit % 8);
        let k = GfElement::random(size, &mut rng);
        let otp = GfElement::random(size, &mut rng);
        let sent: Vec<&[u8]> = dir.iter().map(|&i| frames[i].1.as_slice()).collect();
        let received: Vec<&[u8]> = dir.iter().map(|&i| if i == target { &tampered[..] } else { &frames[i].1[..] }).collect();
        if tag(&sent, k, &otp) == tag(&received, k, &otp) {
            undetected += 1;
        }
        let blocks: usize = sent.iter().map(|f| f.len().div_ceil(size.bytes()) + 1).sum();
        mu += blocks as f64 / 2f64.powi(32);
    }
    let consistent = poisson_tail(mu, undetected) >= 1e-3;

    // Live sessions with one flipped bit in a random frame, AUTH_TAG included.
    let live = 20;
    let (mut released, mut applied) = (0, 0);
    for _ in 0..live {
        let target = rng.random_range(0..frames.len());
        let bit = rng.random_range(0..frames[target].1.len() * 8);
        let seen = Arc::new(Mutex::new((0usize, false)));
        let hits = seen.clone();
        let tap: Interceptor = Arc::new(Mutex::new(move |_: Party, bytes: &mut Vec<u8>| {
            let mut st = seen.lock().unwrap();
            if st.0 == target {
                let bit = bit % (bytes.len() * 8);
                bytes[bit / 8] ^= 1 << (bit % 8);
                st.1 = true;
            }
            st.0 += 1;
        }));
        let r = run_pair(&a, &b, &cfg(1), &cfg(2), Some(tap));
        applied += hits.lock().unwrap().1 as usize;
        let any_key = [&r.alice, &r.bob].iter().any(|o| o.key.is_some() || o.state.stage() != Stage::Aborted);
        if any_key || !r.kms_a.keys().is_empty() || !r.kms_b.keys().is_empty() {
            released += 1;
        }
    }
    verdict(
        key_ok && leaked == 0 && consistent && released == 0 && applied == live,
        format!(
            "untampered run authenticated with equal keys: {key_ok}, key windows seen on the wire {leaked}; {trials} single-bit tampers over {} frames: {undetected} undetected (hash bound {mu:.2e} expected); {applied}/{live} live sessions tampered, releasing a key: {released}",
            hashed.len()
        ),
    )
}

fn kms() -> Verdict {
    let mut rng = seeded(8);
    let (mut broken, mut busy_ok, mut mismatched, mut ops) = (0, 0, 0, 0);
    for seq in 0..1000u64 {
        let mut a = KeyStore::new("alice", "bob");
        let mut b = KeyStore::new("bob", "alice");
        let mut stream = BitBlock::new();
        let (mut delivered, mut session): (usize, Option<(String, String)>) = (0, None);
        for step in 0..40u64 {
            ops += 1;
            match rng.random_range(0..5) {
                0 | 1 => {
                    let bits = BitBlock::random(rng.random_range(1..4000), &mut rng);
                    let id = session_key_id(&[seq.to_be_bytes(), step.to_be_bytes()].concat(), 0);
                    a.push(id, bits.clone()).unwrap();
                    b.push(id, bits.clone()).unwrap();
                    stream.extend_from(&bits);
                }
                2 if session.is_none() => {
                    let qos = Qos { reserve_bits: rng.random_range(0..3000) };
                    let ka = a.open_connect("alice", "bob", qos).unwrap();
                    let kb = b.open_connect("alice", "bob", qos).unwrap();
                    if a.open_connect("alice", "bob", qos) == Err(KmsError::Busy)
                        && b.open_connect("bob", "alice", qos) == Err(KmsError::Busy)
                    {
                        busy_ok += 1;
                    } else {
                        broken += 1;
                    }
                    session = Some((ka, kb));
                }
                2 | 3 => {
                    if let Some((ka, kb)) = &session {
                        let len = rng.random_range(1..3000);
                        let before = a.totals();
                        match a.get_key(ka, len) {
                            Ok(k) => {
                                let peer = b.get_key_with_id(kb, &k.key_id, len).unwrap();
                                let expect = stream.slice(delivered, delivered + len).to_bytes();
                                if peer.bytes != k.bytes || k.bytes != expect {
                                    mismatched += 1;
                                }
                                delivered += len;
                            }
                            Err(KmsError::Starvation { .. }) => {
                                if a.totals() != before {
                                    broken += 1;
                                }
                            }
                            Err(_) => broken += 1,
                        }
                    }
                }
                _ => {
                    if let Some((ka, kb)) = session.take() {
                        a.close(&ka).unwrap();
                        b.close(&kb).unwrap();
                    }
                }
            }
            for s in [&a, &b] {
                let t = s.totals();
                if t.available + t.reserved + t.consumed != t.pushed || t.pushed != stream.len() || t.consumed != delivered {
                    broken += 1;
                }
            }
        }
    }
    verdict(
        broken == 0 && mismatched == 0 && busy_ok > 0,
        format!(
            "1000 random sequences, {ops} ops: conservation violations {broken}, second-session refusals {busy_ok} (all enforced), cross-endpoint byte mismatches {mismatched}"
        ),
    )
}
