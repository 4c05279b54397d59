//! Statistical generator of Alice/Bob detection streams.
//!
//! The source emits polarization-entangled pairs in the state
//! `|H⟩|V⟩ + β·e^{iφ}|V⟩|H⟩` (β = 1, φ = 0 after calibration), which is
//! anti-correlated in the HV basis and correlated in DA. Finite visibility
//! enters as a symmetric flip of the correlated outcome with probability
//! `(1 − V)/2`; β and φ have no role beyond that.
//!
//! Pair emission with independent photon survival is sampled by Poisson
//! thinning: pairs detected on both sides, pairs detected only at Alice and
//! pairs detected only at Bob are three independent Poisson processes. Dark
//! counts and Bob's daylight background are further independent processes,
//! uniform over the four detectors. Multi-pair emissions inside one jitter
//! window and detector dead time are not modeled.
//!
//! For true time `t` Alice's clock reads `t + epoch` and Bob's
//! `t·(1 + drift) + offset + epoch`; a positive epoch keeps Bob's readings
//! non-negative for negative offsets. Every detection additionally gets
//! independent Gaussian timing jitter.

use crate::rng::{seeded, DetRng};
use crate::tags::{Basis, DetectorChannel, Party, TagStream};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

const PS_PER_S: f64 = 1e12;

/// Generation runs in slices of true time to bound memory.
const SLICE_PS: u64 = 250_000_000_000;
/// Events are held back this long before being committed in order; must
/// exceed the largest jitter excursion by a wide margin.
const ORDER_GUARD_PS: i64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceParams {
    /// pairs/s
    pub pair_rate: f64,
    pub v_hv: f64,
    pub v_da: f64,
    /// end-to-end detection probability of Alice's photon
    pub eff_a: f64,
    /// end-to-end detection probability of Bob's photon
    pub eff_b: f64,
    /// counts/s per detector
    pub dark_per_det_a: f64,
    pub dark_per_det_b: f64,
    /// counts/s of daylight background at Bob, over all four detectors
    pub bg_b: f64,
    /// s, per detection
    pub jitter_sigma: f64,
    /// s, Bob minus Alice
    pub clock_offset: f64,
    /// Bob clock rate error
    pub clock_drift: f64,
    /// s, added to both clocks' readings
    pub clock_epoch: f64,
    /// s
    pub duration: f64,
    pub seed: u64,
}

impl Default for SourceParams {
    fn default() -> Self {
        Self {
            pair_rate: 1e6,
            v_hv: 0.995,
            v_da: 0.974,
            eff_a: 0.1,
            eff_b: 0.05,
            dark_per_det_a: 200.0,
            dark_per_det_b: 200.0,
            bg_b: 0.0,
            jitter_sigma: 350e-12 / std::f64::consts::SQRT_2,
            clock_offset: 0.0,
            clock_drift: 0.0,
            clock_epoch: 0.0,
            duration: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("{name} = {value} must lie in [0, 1]")]
    NotProbability { name: &'static str, value: f64 },
    #[error("{name} = {value} must be finite and non-negative")]
    Negative { name: &'static str, value: f64 },
    #[error("duration must be positive (got {0})")]
    Duration(f64),
    #[error("clock drift {0} outside (-0.01, 0.01)")]
    Drift(f64),
    #[error("clock offset must be finite (got {0})")]
    Offset(f64),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

impl SourceParams {
    /// Parameters reproducing the 1.7 km night benchmark: singles of about
    /// 1.03 Mcps (Alice) and 190 kcps (Bob), about 14.3 kcps coincidences in
    /// a 1 ns window and a sifted QBER near 2%.
    pub fn jena_night() -> Self {
        // Coincidences in a ±0.5 ns window catch P(|N(0, 350 ps)| ≤ 500 ps)
        // ≈ 0.847 of detected pairs; accidentals add ≈ 196 cps.
        let dark = 200.0;
        let singles_a = 1.03e6 - 4.0 * dark;
        let singles_b = 1.90e5 - 4.0 * dark;
        let pairs_both = (14.3e3 - 195.7) / 0.8468;
        let pair_rate = singles_a * singles_b / pairs_both;
        Self {
            pair_rate,
            v_hv: 0.98,
            v_da: 0.967,
            eff_a: singles_a / pair_rate,
            eff_b: singles_b / pair_rate,
            dark_per_det_a: dark,
            dark_per_det_b: dark,
            bg_b: 0.0,
            jitter_sigma: 350e-12 / std::f64::consts::SQRT_2,
            clock_offset: 1.234_567_891,
            clock_drift: 2e-9,
            clock_epoch: 0.0,
            duration: 60.0,
            seed: 20220302,
        }
    }

    pub fn preset(name: &str) -> Result<Self, SimError> {
        match name {
            "jena-night" => Ok(Self::jena_night()),
            "default" => Ok(Self::default()),
            other => Err(SimError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, value) in [
            ("v_hv", self.v_hv),
            ("v_da", self.v_da),
            ("eff_a", self.eff_a),
            ("eff_b", self.eff_b),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SimError::NotProbability { name, value });
            }
        }
        for (name, value) in [
            ("pair_rate", self.pair_rate),
            ("dark_per_det_a", self.dark_per_det_a),
            ("dark_per_det_b", self.dark_per_det_b),
            ("bg_b", self.bg_b),
            ("jitter_sigma", self.jitter_sigma),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(SimError::Negative { name, value });
            }
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::Duration(self.duration));
        }
        if !(self.clock_drift.abs() < 0.01) {
            return Err(SimError::Drift(self.clock_drift));
        }
        if !self.clock_epoch.is_finite() || self.clock_epoch < 0.0 {
            return Err(SimError::Negative { name: "clock_epoch", value: self.clock_epoch });
        }
        if !self.clock_offset.is_finite() {
            return Err(SimError::Offset(self.clock_offset));
        }
        Ok(())
    }

    /// Expected singles rate at Alice, counts/s.
    pub fn expected_singles_a(&self) -> f64 {
        self.pair_rate * self.eff_a + 4.0 * self.dark_per_det_a
    }

    /// Expected singles rate at Bob (on his own clock, counts per true s).
    pub fn expected_singles_b(&self) -> f64 {
        self.pair_rate * self.eff_b + 4.0 * self.dark_per_det_b + self.bg_b
    }
}

/// Where a detection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagOrigin {
    /// Member of the numbered pair; the partner may or may not be detected.
    Pair(u32),
    Dark,
    Background,
}

const ORIGIN_DARK: u32 = u32::MAX;
const ORIGIN_BACKGROUND: u32 = u32::MAX - 1;

fn decode_origin(code: u32) -> TagOrigin {
    match code {
        ORIGIN_DARK => TagOrigin::Dark,
        ORIGIN_BACKGROUND => TagOrigin::Background,
        id => TagOrigin::Pair(id),
    }
}

/// Per-tag provenance of a generated session.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// s
    pub clock_offset: f64,
    pub clock_drift: f64,
    /// s
    pub clock_epoch: f64,
    origin_a: Vec<u32>,
    origin_b: Vec<u32>,
    pairs_both: u32,
}

impl GroundTruth {
    /// True Bob-minus-Alice offset at true time `t` (ps).
    pub fn true_offset_ps(&self, t: f64) -> f64 {
        self.clock_offset * PS_PER_S + self.clock_drift * t
    }

    /// True offset at the instant Bob's clock reads `t_bob` (ps).
    pub fn offset_at_bob_time_ps(&self, t_bob: f64) -> f64 {
        let t = (t_bob - (self.clock_offset + self.clock_epoch) * PS_PER_S) / (1.0 + self.clock_drift);
        self.true_offset_ps(t)
    }

    /// True offset at the instant Alice's clock reads `t_alice` (ps).
    pub fn offset_at_alice_time_ps(&self, t_alice: f64) -> f64 {
        self.true_offset_ps(t_alice - self.clock_epoch * PS_PER_S)
    }

    pub fn origin(&self, party: Party, index: usize) -> TagOrigin {
        decode_origin(match party {
            Party::Alice => self.origin_a[index],
            Party::Bob => self.origin_b[index],
        })
    }

    pub fn origins(&self, party: Party) -> impl ExactSizeIterator<Item = TagOrigin> + '_ {
        let v = match party {
            Party::Alice => &self.origin_a,
            Party::Bob => &self.origin_b,
        };
        v.iter().map(|&c| decode_origin(c))
    }

    /// Number of pairs with both photons detected.
    pub fn pairs_detected_both(&self) -> u32 {
        self.pairs_both
    }

    /// Index pairs `(alice, bob)` of tags from the same emitted pair.
    pub fn true_pairs(&self) -> Vec<(usize, usize)> {
        let mut by_pair = std::collections::HashMap::new();
        for (i, &c) in self.origin_a.iter().enumerate() {
            if c < ORIGIN_BACKGROUND {
                by_pair.insert(c, i);
            }
        }
        let mut out: Vec<(usize, usize)> = self
            .origin_b
            .iter()
            .enumerate()
            .filter_map(|(j, c)| by_pair.get(c).map(|&i| (i, j)))
            .collect();
        out.sort_unstable_by_key(|&(_, j)| j);
        out
    }

    /// JSON sidecar: clock parameters and tag-class counts.
    pub fn summary(&self) -> serde_json::Value {
        let count = |v: &[u32]| {
            let dark = v.iter().filter(|&&c| c == ORIGIN_DARK).count();
            let bg = v.iter().filter(|&&c| c == ORIGIN_BACKGROUND).count();
            serde_json::json!({
                "tags": v.len(),
                "pair_members": v.len() - dark - bg,
                "dark": dark,
                "background": bg,
            })
        };
        serde_json::json!({
            "clock_offset_s": self.clock_offset,
            "clock_drift": self.clock_drift,
            "pairs_detected_both": self.pairs_both,
            "alice": count(&self.origin_a),
            "bob": count(&self.origin_b),
        })
    }
}

#[derive(Clone, Copy)]
struct Event {
    t: i64,
    ch: DetectorChannel,
    origin: u32,
}

/// Holds events until they can no longer be overtaken by a later slice.
struct OrderedSink {
    pending: Vec<Event>,
    times: Vec<u64>,
    channels: Vec<DetectorChannel>,
    origins: Vec<u32>,
}

impl OrderedSink {
    fn new(capacity: usize) -> Self {
        Self {
            pending: Vec::new(),
            times: Vec::with_capacity(capacity),
            channels: Vec::with_capacity(capacity),
            origins: Vec::with_capacity(capacity),
        }
    }

    fn commit_before(&mut self, horizon: i64) {
        self.pending
            .sort_unstable_by_key(|e| (e.t, e.ch, e.origin));
        let split = self.pending.partition_point(|e| e.t < horizon);
        for e in self.pending.drain(..split) {
            // tags before the stream epoch are not recorded
            if e.t < 0 {
                continue;
            }
            self.times.push(e.t as u64);
            self.channels.push(e.ch);
            self.origins.push(e.origin);
        }
    }

    fn finish(mut self) -> (Vec<u64>, Vec<DetectorChannel>, Vec<u32>) {
        self.commit_before(i64::MAX);
        (self.times, self.channels, self.origins)
    }
}

fn poisson<R: Rng>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
    }
}

fn random_basis<R: Rng>(rng: &mut R) -> Basis {
    if rng.random_bool(0.5) {
        Basis::HV
    } else {
        Basis::DA
    }
}

fn random_channel<R: Rng>(rng: &mut R) -> DetectorChannel {
    DetectorChannel::ALL[rng.random_range(0..4)]
}

/// Outcomes of a pair detected on both sides.
fn pair_outcome<R: Rng>(p: &SourceParams, rng: &mut R) -> (DetectorChannel, DetectorChannel) {
    let basis_a = random_basis(rng);
    let basis_b = random_basis(rng);
    let bit_a = rng.random_bool(0.5);
    let bit_b = if basis_a != basis_b {
        rng.random_bool(0.5)
    } else {
        let v = match basis_a {
            Basis::HV => p.v_hv,
            Basis::DA => p.v_da,
        };
        let ideal = match basis_a {
            Basis::HV => !bit_a,
            Basis::DA => bit_a,
        };
        if rng.random_bool((1.0 - v) / 2.0) {
            !ideal
        } else {
            ideal
        }
    };
    (
        DetectorChannel::from_basis_bit(basis_a, bit_a),
        DetectorChannel::from_basis_bit(basis_b, bit_b),
    )
}

/// Generates both parties' streams and the per-tag ground truth.
pub fn generate_session(p: &SourceParams) -> Result<(TagStream, TagStream, GroundTruth), SimError> {
    p.validate()?;
    let mut rng: DetRng = seeded(p.seed);
    let jitter_ps = p.jitter_sigma * PS_PER_S;
    let jitter = Normal::new(0.0, jitter_ps).expect("validated jitter");
    let draw_jitter = |rng: &mut DetRng| -> i64 {
        if jitter_ps > 0.0 {
            jitter.sample(rng).round() as i64
        } else {
            0
        }
    };
    let bob_clock = |t: i64| -> i64 {
        (t as f64 * (1.0 + p.clock_drift) + (p.clock_offset + p.clock_epoch) * PS_PER_S).round() as i64
    };
    let epoch_ps = (p.clock_epoch * PS_PER_S).round() as i64;
    let alice_clock = |t: i64| -> i64 { t + epoch_ps };

    let rate_both = p.pair_rate * p.eff_a * p.eff_b;
    let rate_a_only = p.pair_rate * p.eff_a * (1.0 - p.eff_b);
    let rate_b_only = p.pair_rate * (1.0 - p.eff_a) * p.eff_b;
    let total_ps = (p.duration * PS_PER_S).round() as u64;

    let mut sink_a = OrderedSink::new((p.expected_singles_a() * p.duration * 1.01) as usize);
    let mut sink_b = OrderedSink::new((p.expected_singles_b() * p.duration * 1.01) as usize);
    let mut next_pair: u32 = 0;
    let mut pairs_both: u32 = 0;

    let mut slice_start = 0u64;
    while slice_start < total_ps {
        let slice_end = (slice_start + SLICE_PS).min(total_ps);
        let dt_s = (slice_end - slice_start) as f64 / PS_PER_S;
        let uniform_t = |rng: &mut DetRng| rng.random_range(slice_start..slice_end) as i64;

        let n_both = poisson(rate_both * dt_s, &mut rng);
        for _ in 0..n_both {
            let t = uniform_t(&mut rng);
            let (ch_a, ch_b) = pair_outcome(p, &mut rng);
            sink_a.pending.push(Event { t: alice_clock(t) + draw_jitter(&mut rng), ch: ch_a, origin: next_pair });
            sink_b.pending.push(Event {
                t: bob_clock(t) + draw_jitter(&mut rng),
                ch: ch_b,
                origin: next_pair,
            });
            next_pair += 1;
            pairs_both += 1;
        }
        for _ in 0..poisson(rate_a_only * dt_s, &mut rng) {
            let t = alice_clock(uniform_t(&mut rng)) + draw_jitter(&mut rng);
            let ch = random_channel(&mut rng);
            sink_a.pending.push(Event { t, ch, origin: next_pair });
            next_pair += 1;
        }
        for _ in 0..poisson(rate_b_only * dt_s, &mut rng) {
            let t = bob_clock(uniform_t(&mut rng)) + draw_jitter(&mut rng);
            let ch = random_channel(&mut rng);
            sink_b.pending.push(Event { t, ch, origin: next_pair });
            next_pair += 1;
        }
        for _ in 0..poisson(4.0 * p.dark_per_det_a * dt_s, &mut rng) {
            let t = alice_clock(uniform_t(&mut rng)) + draw_jitter(&mut rng);
            let ch = random_channel(&mut rng);
            sink_a.pending.push(Event { t, ch, origin: ORIGIN_DARK });
        }
        for _ in 0..poisson(4.0 * p.dark_per_det_b * dt_s, &mut rng) {
            let t = bob_clock(uniform_t(&mut rng)) + draw_jitter(&mut rng);
            let ch = random_channel(&mut rng);
            sink_b.pending.push(Event { t, ch, origin: ORIGIN_DARK });
        }
        for _ in 0..poisson(p.bg_b * dt_s, &mut rng) {
            let t = bob_clock(uniform_t(&mut rng)) + draw_jitter(&mut rng);
            let ch = random_channel(&mut rng);
            sink_b.pending.push(Event { t, ch, origin: ORIGIN_BACKGROUND });
        }

        sink_a.commit_before(alice_clock(slice_end as i64) - ORDER_GUARD_PS);
        sink_b.commit_before(bob_clock(slice_end as i64) - ORDER_GUARD_PS);
        slice_start = slice_end;
    }

    let epoch = format!("sim-{}", p.seed);
    let (ta, ca, oa) = sink_a.finish();
    let (tb, cb, ob) = sink_b.finish();
    let a = TagStream::from_columns(Party::Alice, epoch.clone(), ta, ca).expect("sorted by construction");
    let b = TagStream::from_columns(Party::Bob, epoch, tb, cb).expect("sorted by construction");
    let truth = GroundTruth {
        clock_offset: p.clock_offset,
        clock_drift: p.clock_drift,
        clock_epoch: p.clock_epoch,
        origin_a: oa,
        origin_b: ob,
        pairs_both,
    };
    Ok((a, b, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> SourceParams {
        SourceParams {
            pair_rate: 200_000.0,
            v_hv: 1.0,
            v_da: 1.0,
            eff_a: 0.3,
            eff_b: 0.3,
            dark_per_det_a: 0.0,
            dark_per_det_b: 0.0,
            bg_b: 0.0,
            jitter_sigma: 0.0,
            clock_offset: 0.0,
            clock_drift: 0.0,
            clock_epoch: 0.0,
            duration: 0.5,
            seed,
        }
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let p = SourceParams { duration: 0.0, ..quiet(1) };
        assert_eq!(generate_session(&p).unwrap_err(), SimError::Duration(0.0));
        let p = SourceParams { v_da: 1.2, ..quiet(1) };
        assert!(matches!(p.validate(), Err(SimError::NotProbability { name: "v_da", .. })));
        let p = SourceParams { bg_b: -1.0, ..quiet(1) };
        assert!(matches!(p.validate(), Err(SimError::Negative { name: "bg_b", .. })));
        assert!(SourceParams::preset("nope").is_err());
        assert!(SourceParams::jena_night().validate().is_ok());
    }

    #[test]
    fn perfect_source_has_no_errors_in_matching_bases() {
        let (a, b, truth) = generate_session(&quiet(11)).unwrap();
        let pairs = truth.true_pairs();
        assert_eq!(pairs.len() as u32, truth.pairs_detected_both());
        let mut same_basis = 0;
        for &(i, j) in &pairs {
            let (ba, xa) = crate::tags::channel_map(a.get(i).ch);
            let (bb, xb) = crate::tags::channel_map(b.get(j).ch);
            if ba == bb {
                same_basis += 1;
                let expected = if ba == Basis::HV { !xa } else { xa };
                assert_eq!(xb, expected);
                // no jitter, no clock error: identical timestamps
                assert_eq!(a.get(i).t, b.get(j).t);
            }
        }
        assert!(same_basis > 1000);
    }

    #[test]
    fn every_tag_is_classified_once() {
        let p = SourceParams { dark_per_det_a: 500.0, bg_b: 3000.0, ..quiet(5) };
        let (a, b, truth) = generate_session(&p).unwrap();
        assert_eq!(truth.origins(Party::Alice).len(), a.len());
        assert_eq!(truth.origins(Party::Bob).len(), b.len());
        let dark_a = truth.origins(Party::Alice).filter(|o| *o == TagOrigin::Dark).count();
        let bg_b = truth.origins(Party::Bob).filter(|o| *o == TagOrigin::Background).count();
        // 1000 and 1500 expected
        assert!((dark_a as f64 - 1000.0).abs() < 5.0 * 1000f64.sqrt());
        assert!((bg_b as f64 - 1500.0).abs() < 5.0 * 1500f64.sqrt());
        assert_eq!(truth.origins(Party::Alice).filter(|o| *o == TagOrigin::Background).count(), 0);
        // pair ids never repeat within one side
        let mut ids: Vec<u32> = truth
            .origins(Party::Bob)
            .filter_map(|o| match o {
                TagOrigin::Pair(id) => Some(id),
                _ => None,
            })
            .collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn singles_rates_within_poisson_bounds() {
        for seed in [1, 2, 3] {
            let p = SourceParams {
                dark_per_det_a: 300.0,
                dark_per_det_b: 100.0,
                bg_b: 2_000.0,
                jitter_sigma: 250e-12,
                ..quiet(seed)
            };
            let (a, b, _) = generate_session(&p).unwrap();
            for (got, rate) in [
                (a.len() as f64, p.expected_singles_a()),
                (b.len() as f64, p.expected_singles_b()),
            ] {
                let mean = rate * p.duration;
                assert!((got - mean).abs() < 4.0 * mean.sqrt(), "{got} vs {mean}");
            }
        }
    }

    #[test]
    fn clock_transform_and_truth() {
        let p = SourceParams { clock_offset: 2.5, clock_drift: 1e-6, ..quiet(3) };
        let (a, b, truth) = generate_session(&p).unwrap();
        for &(i, j) in truth.true_pairs().iter().take(200) {
            let ta = a.get(i).t as f64;
            let tb = b.get(j).t as f64;
            assert!((tb - ta - truth.true_offset_ps(ta)).abs() <= 1.0);
            assert!((tb - ta - truth.offset_at_bob_time_ps(tb)).abs() <= 1.0);
        }
    }

    #[test]
    fn negative_offset_drops_pre_epoch_tags() {
        let p = SourceParams { clock_offset: -0.2, ..quiet(8) };
        let (_, b, truth) = generate_session(&p).unwrap();
        assert!(b.times().iter().all(|&t| t <= 300_000_000_000));
        assert_eq!(truth.origins(Party::Bob).len(), b.len());
        let expected = p.expected_singles_b() * 0.3;
        assert!((b.len() as f64 - expected).abs() < 5.0 * expected.sqrt());
    }

    #[test]
    fn reproducible_from_seed() {
        let (a1, b1, _) = generate_session(&quiet(42)).unwrap();
        let (a2, b2, _) = generate_session(&quiet(42)).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let (a3, _, _) = generate_session(&quiet(43)).unwrap();
        assert_ne!(a1, a3);
    }
}
