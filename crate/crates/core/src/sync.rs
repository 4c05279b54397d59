//! Clock synchronization and coincidence matching.
//!
//! Offsets are always Bob minus Alice, in picoseconds: a photon pair seen by
//! Alice at `t` is seen by Bob at about `t + offset`.
//!
//! Sync runs in two steps. [`coarse_offset`] finds the offset over a range
//! of seconds by cross-correlating binned streams with a fast convolution,
//! then re-correlates around the peak with progressively finer bins.
//! [`fine_sync`] then walks Bob's stream in blocks of at least 2^10
//! detections and tracks the offset with one histogram per block.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

pub const PS_PER_S: u64 = 1_000_000_000_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SyncError {
    #[error("no sync found")]
    NoSync,
    #[error("empty stream")]
    EmptyStream,
    #[error("invalid sync configuration: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarseConfig {
    /// Offsets in `±search_range_ps` are considered.
    pub search_range_ps: u64,
    pub initial_bin_ps: u64,
    /// Refinement stops once the bin is at or below this width.
    pub final_bin_ps: u64,
    /// Bin shrink factor per refinement stage.
    pub stage_factor: u64,
    /// Longest span of Bob's stream correlated in any stage.
    pub max_span_ps: u64,
    /// Largest |clock drift| searched.
    pub max_drift: f64,
    /// Drift hypotheses per side of the current estimate in one stage; the
    /// stage span shrinks until this many cover the drift uncertainty.
    pub drift_steps: u32,
    /// Peak must exceed its expected background by `sigma` standard
    /// deviations, or by the chance maximum over all trials if that is larger.
    pub sigma: f64,
    /// Peak must also hold at least this many counts above the background.
    pub min_peak_counts: f64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            search_range_ps: 10 * PS_PER_S,
            initial_bin_ps: 1_000_000,
            final_bin_ps: 1_000,
            stage_factor: 32,
            max_span_ps: PS_PER_S / 2,
            max_drift: 1e-5,
            drift_steps: 4,
            sigma: 5.0,
            min_peak_counts: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub bin_ps: u64,
    pub span_ps: u64,
    /// Offset at the middle of the span.
    pub offset_ps: i64,
    pub drift: f64,
    pub drift_trials: usize,
    /// Correlation count at the peak, its expected background and the
    /// background's standard deviation.
    pub peak: f64,
    pub mean: f64,
    pub stddev: f64,
    pub significant: bool,
}

/// Result of the coarse search: offset and drift at Bob time
/// `reference_ps`, the offset known to within about `resolution_ps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseOffset {
    pub offset_ps: i64,
    pub resolution_ps: u64,
    pub reference_ps: u64,
    pub drift: f64,
    pub drift_uncertainty: f64,
    pub stages: Vec<StageReport>,
}

/// Overlap-save cross-correlation of one signal against several templates
/// of equal length, sharing the forward transform of each signal chunk.
struct Correlator {
    m: usize,
    fft_len: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    kernels: Vec<Vec<Complex<f64>>>,
}

impl Correlator {
    fn new(templates: &[Vec<f64>]) -> Self {
        let m = templates[0].len();
        let fft_len = (4 * m).next_power_of_two().max(1 << 12);
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(fft_len);
        let inv = planner.plan_fft_inverse(fft_len);
        // Convolution with the reversed template is correlation.
        let kernels = templates
            .iter()
            .map(|t| {
                assert_eq!(t.len(), m, "templates must share one length");
                let mut k = vec![Complex::new(0.0, 0.0); fft_len];
                for (j, &v) in t.iter().enumerate() {
                    k[m - 1 - j] = Complex::new(v, 0.0);
                }
                fwd.process(&mut k);
                k
            })
            .collect();
        Self { m, fft_len, fwd, inv, kernels }
    }

    /// Calls `sink(template, first_lag, values)` over consecutive lag runs.
    fn run(&self, signal: &[f64], mut sink: impl FnMut(usize, usize, &[f64])) {
        let n_out = signal.len() + 1 - self.m;
        let step = self.fft_len - self.m + 1;
        let scale = 1.0 / self.fft_len as f64;
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        let mut prod = buf.clone();
        let mut out = Vec::with_capacity(step);
        let mut start = 0;
        while start < n_out {
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(signal.get(start + k).copied().unwrap_or(0.0), 0.0);
            }
            self.fwd.process(&mut buf);
            let take = step.min(n_out - start);
            // Both correlations are real, so two share one inverse
            // transform as its real and imaginary parts.
            for ti in (0..self.kernels.len()).step_by(2) {
                let k1 = &self.kernels[ti];
                match self.kernels.get(ti + 1) {
                    Some(k2) => {
                        for (((p, b), x), y) in prod.iter_mut().zip(&buf).zip(k1).zip(k2) {
                            *p = b * x + Complex::<f64>::i() * (b * y);
                        }
                    }
                    None => {
                        for ((p, b), x) in prod.iter_mut().zip(&buf).zip(k1) {
                            *p = b * x;
                        }
                    }
                }
                self.inv.process(&mut prod);
                let part = &prod[self.m - 1..self.m - 1 + take];
                out.clear();
                out.extend(part.iter().map(|c| c.re * scale));
                sink(ti, start, &out);
                if ti + 1 < self.kernels.len() {
                    out.clear();
                    out.extend(part.iter().map(|c| c.im * scale));
                    sink(ti + 1, start, &out);
                }
            }
            start += step;
        }
    }
}

/// Cross-correlation `out[l] = Σ_j template[j] · signal[j + l]` for every
/// lag `l` with the template fully inside the signal, by overlap-save FFT.
pub fn cross_correlate(signal: &[f64], template: &[f64]) -> Vec<f64> {
    if template.is_empty() || signal.len() < template.len() {
        return Vec::new();
    }
    let n_out = signal.len() - template.len() + 1;
    if template.len() <= 64 || n_out <= 64 {
        return cross_correlate_direct(signal, template);
    }
    let mut out = vec![0.0; n_out];
    Correlator::new(&[template.to_vec()]).run(signal, |_, start, vals| {
        out[start..start + vals.len()].copy_from_slice(vals);
    });
    out
}

/// Quadratic-time reference correlation, also used for short inputs.
pub fn cross_correlate_direct(signal: &[f64], template: &[f64]) -> Vec<f64> {
    if template.is_empty() || signal.len() < template.len() {
        return Vec::new();
    }
    (0..=signal.len() - template.len())
        .map(|l| template.iter().zip(&signal[l..]).map(|(a, b)| a * b).sum())
        .collect()
}

fn histogram(times: &[u64], origin: i64, bin: u64, n_bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; n_bins];
    for &t in times {
        let d = t as i64 - origin;
        if d < 0 {
            continue;
        }
        let idx = (d as u64 / bin) as usize;
        if idx < n_bins {
            h[idx] += 1.0;
        }
    }
    h
}

struct StageSearch {
    b_start: u64,
    span: u64,
    bin: u64,
    /// offset at `b_start`
    centre: i64,
    half_range: u64,
    drift: f64,
    drift_step: f64,
    drift_side: i64,
}

/// One correlation stage over Bob times `[b_start, b_start + span)`: offsets
/// at `b_start` in `centre ± half_range`, drifts on a grid around `drift`.
///
/// Wide searches correlate binned streams by FFT; narrow ones count
/// tag-pair differences directly, which gives the same correlogram without
/// materializing the bins.
fn correlate_stage(a: &[u64], b: &[u64], s: &StageSearch, cfg: &CoarseConfig) -> StageReport {
    let bin = s.bin;
    let binf = bin as f64;
    let n_b = s.span.div_ceil(bin).max(1) as usize;
    let half_lags = s.half_range.div_ceil(bin) as i64;
    let n_lags = (2 * half_lags + 1) as usize;
    // Alice bin i covers Alice time a_origin + i·bin. A Bob tag at tb lands
    // in bin (tb − b_start)·(1 − d)/bin, so lag L means
    // offset(b_start) = b_start − a_origin − L·bin.
    let a_origin = s.b_start as i64 - s.centre - half_lags * bin as i64;
    let bob = &b[b.partition_point(|&t| t < s.b_start)..b.partition_point(|&t| t < s.b_start + s.span)];
    let drifts: Vec<f64> = (-s.drift_side..=s.drift_side)
        .map(|k| s.drift + k as f64 * s.drift_step)
        .collect();
    let bob_bins = |d: f64| {
        bob.iter()
            .map(move |&t| ((t - s.b_start) as f64 * (1.0 - d) / binf) as usize)
            .filter(move |&j| j < n_b)
    };
    // Σ t[j] and Σ t[j]² of each drift's Bob histogram
    let moments: Vec<(f64, f64)> = drifts
        .iter()
        .map(|&d| {
            let (mut sum, mut sum2, mut run, mut last) = (0.0, 0.0, 0.0, usize::MAX);
            for j in bob_bins(d) {
                if j != last {
                    sum2 += run * run;
                    run = 0.0;
                    last = j;
                }
                run += 1.0;
                sum += 1.0;
            }
            (sum, sum2 + run * run)
        })
        .collect();

    let a_span = (a[a.len() - 1] - a[0]).max(1) as f64;
    let pairs_per_tag = a.len() as f64 / a_span * n_lags as f64 * binf;
    let cost_pairs = (bob.len() * drifts.len()) as f64 * (1.0 + pairs_per_tag);
    let cost_fft = (drifts.len() * (n_b + n_lags)) as f64 * 50.0;

    // overlap[l]: Alice tags in the bins a template at lag l covers
    let mut overlap = vec![0.0; n_lags];
    let mut counts: Vec<Vec<f64>> = Vec::new();
    let mut dense: Option<(Vec<f64>, Vec<Vec<f64>>)> = None;
    if cost_pairs <= cost_fft {
        let alice_bin = |t: u64| (t as i64 - a_origin).div_euclid(bin as i64);
        for (l, o) in overlap.iter_mut().enumerate() {
            let lo = a_origin + l as i64 * bin as i64;
            let hi = lo + (n_b as i64) * bin as i64;
            *o = (a.partition_point(|&t| (t as i64) < hi) - a.partition_point(|&t| (t as i64) < lo)) as f64;
        }
        for &d in &drifts {
            let mut c = vec![0.0; n_lags];
            let mut ai = 0usize;
            for j in bob_bins(d) {
                let lo = a_origin + j as i64 * bin as i64;
                if ai == 0 || a.get(ai).is_some_and(|&t| (t as i64) < lo) {
                    ai = a.partition_point(|&t| (t as i64) < lo);
                }
                while ai > 0 && a[ai - 1] as i64 >= lo {
                    ai -= 1;
                }
                let mut k = ai;
                while k < a.len() {
                    let l = alice_bin(a[k]) - j as i64;
                    if l >= n_lags as i64 {
                        break;
                    }
                    if l >= 0 {
                        c[l as usize] += 1.0;
                    }
                    k += 1;
                }
            }
            counts.push(c);
        }
    } else {
        let alice = histogram(a, a_origin, bin, n_b + n_lags - 1);
        let mut acc: f64 = alice[..n_b].iter().sum();
        for l in 0..n_lags {
            overlap[l] = acc;
            if l + 1 < n_lags {
                acc += alice[l + n_b] - alice[l];
            }
        }
        let templates: Vec<Vec<f64>> = drifts
            .iter()
            .map(|&d| {
                let mut h = vec![0.0; n_b];
                for j in bob_bins(d) {
                    h[j] += 1.0;
                }
                h
            })
            .collect();
        dense = Some((alice, templates));
    }

    let nb = n_b as f64;
    let background = |ti: usize, l: usize| {
        let (sum_b, sum_b2) = moments[ti];
        let mean = sum_b * overlap[l] / nb;
        let var = (sum_b2 * overlap[l] / nb).max(sum_b2 / nb).max(1e-12);
        (mean, var.sqrt())
    };
    let mut best = (f64::MIN, 0usize, 0usize, 0.0f64);
    let mut score = |ti: usize, start: usize, vals: &[f64]| {
        for (i, &c) in vals.iter().enumerate() {
            let (mean, sd) = background(ti, start + i);
            let z = (c - mean) / sd;
            if z > best.0 {
                best = (z, ti, start + i, c);
            }
        }
    };
    match &dense {
        None => {
            for (ti, c) in counts.iter().enumerate() {
                score(ti, 0, c);
            }
        }
        Some((alice, templates)) => {
            if n_b <= 64 || n_lags <= 64 {
                for (ti, t) in templates.iter().enumerate() {
                    score(ti, 0, &cross_correlate_direct(alice, t));
                }
            } else {
                Correlator::new(templates).run(alice, &mut score);
            }
        }
    }
    let (z, ti, lag, peak) = best;
    let (mean, stddev) = background(ti, lag);

    // Centroid of the excess over the peak and its neighbours.
    let count_at = |l: usize| -> f64 {
        match &dense {
            None => counts[ti][l],
            Some((alice, templates)) => templates[ti].iter().zip(&alice[l..]).map(|(x, y)| x * y).sum(),
        }
    };
    let mut wsum = 0.0;
    let mut lsum = 0.0;
    for l in lag.saturating_sub(1)..=(lag + 1).min(n_lags - 1) {
        let c = if l == lag { peak } else { count_at(l) };
        let w = (c - background(ti, l).0).max(0.0);
        wsum += w;
        lsum += w * l as f64;
    }
    let lag_f = if wsum > 0.0 { lsum / wsum } else { lag as f64 };
    // Reported at the span centre, where a drift error shifts it least.
    let offset = s.b_start as f64 - a_origin as f64 - lag_f * binf + drifts[ti] * s.span as f64 / 2.0;

    // The largest of n noise-only trials sits near sqrt(2 ln n) deviations.
    let trials = (n_lags * drifts.len()) as f64;
    let threshold = cfg.sigma.max((2.0 * trials.ln()).sqrt() + 1.0);
    StageReport {
        bin_ps: bin,
        span_ps: s.span,
        offset_ps: offset.round() as i64,
        drift: drifts[ti],
        drift_trials: drifts.len(),
        peak,
        mean,
        stddev,
        significant: z > threshold && peak - mean >= cfg.min_peak_counts,
    }
}

/// Coarse offset and drift by progressive cross-correlation.
///
/// Stage 0 searches offsets over `±search_range_ps` with `initial_bin_ps`
/// bins and drifts over `±max_drift`. Each later stage divides the bin by
/// `stage_factor`, searches ±2 previous bins around the previous offset and
/// narrows the drift grid, until the bin reaches `final_bin_ps` or a stage
/// shows no significant peak. The first refinement must confirm the stage-0
/// peak, which rejects chance maxima of the wide first correlogram.
pub fn coarse_offset(a: &[u64], b: &[u64], cfg: &CoarseConfig) -> Result<CoarseOffset, SyncError> {
    if cfg.initial_bin_ps == 0 || cfg.final_bin_ps == 0 || cfg.stage_factor < 2 {
        return Err(SyncError::Config("bins must be positive and stage_factor ≥ 2"));
    }
    if !(cfg.max_drift >= 0.0 && cfg.max_drift < 0.01) {
        return Err(SyncError::Config("max_drift must lie in [0, 0.01)"));
    }
    let (Some(&b_first), Some(&b_last)) = (b.first(), b.last()) else {
        return Err(SyncError::EmptyStream);
    };
    if a.is_empty() {
        return Err(SyncError::EmptyStream);
    }
    let total = (b_last - b_first).max(1);
    let steps = cfg.drift_steps.max(1) as f64;
    // Span such that `drift_steps` hypotheses per side, each smearing by at
    // most half a bin, cover the drift uncertainty.
    let plan = |bin: u64, unc: f64| -> (u64, f64, i64) {
        let mut span = cfg.max_span_ps.min(total).max(bin);
        if unc > 0.0 {
            span = span.min(((steps * bin as f64 / unc) as u64).max(bin));
        }
        let step = bin as f64 / span as f64;
        let side = if unc > 0.0 { (unc / step).ceil() as i64 } else { 0 };
        (span, step, side)
    };

    let mut stages = Vec::new();
    let mut bin = cfg.initial_bin_ps;
    let mut unc = cfg.max_drift;
    let (span, step, side) = plan(bin, unc);
    let first = correlate_stage(
        a,
        b,
        &StageSearch {
            b_start: b_first,
            span,
            bin,
            centre: 0,
            half_range: cfg.search_range_ps,
            drift: 0.0,
            drift_step: step,
            drift_side: side,
        },
        cfg,
    );
    let found = first.significant;
    let mut offset = first.offset_ps;
    let mut drift = first.drift;
    let mut resolution = bin;
    let mut reference = b_first + span / 2;
    if side > 0 {
        unc = step;
    }
    stages.push(first);
    if !found {
        return Err(SyncError::NoSync);
    }

    while bin > cfg.final_bin_ps {
        let prev = bin;
        bin = (bin / cfg.stage_factor).max(1);
        let (span, step, side) = plan(bin, unc);
        let stage = correlate_stage(
            a,
            b,
            &StageSearch {
                b_start: b_first,
                span,
                bin,
                centre: offset - (drift * (reference - b_first) as f64) as i64,
                half_range: 2 * prev,
                drift,
                drift_step: step,
                drift_side: side,
            },
            cfg,
        );
        let ok = stage.significant;
        if ok {
            offset = stage.offset_ps;
            drift = stage.drift;
            resolution = bin;
            reference = b_first + span / 2;
            if side > 0 {
                unc = step;
            }
        }
        stages.push(stage);
        if !ok {
            break;
        }
    }
    if stages.len() > 1 && !stages[1].significant {
        return Err(SyncError::NoSync);
    }
    Ok(CoarseOffset {
        offset_ps: offset,
        resolution_ps: resolution,
        reference_ps: reference,
        drift,
        drift_uncertainty: unc,
        stages,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineConfig {
    /// Minimum Bob detections per block.
    pub min_block: usize,
    pub hist_bin_ps: u64,
    /// Half-width of the search around the predicted offset after the
    /// first block.
    pub track_range_ps: u64,
    /// Differences within this distance of the peak bin centre enter the
    /// block's centroid.
    pub centroid_half_width_ps: u64,
    /// Peak must exceed mean + `sigma`·sqrt(max(mean, 1)) counts.
    pub sigma: f64,
}

impl Default for FineConfig {
    fn default() -> Self {
        Self {
            min_block: 1 << 10,
            hist_bin_ps: 250,
            track_range_ps: 4_000,
            centroid_half_width_ps: 1_000,
            sigma: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetBlock {
    /// Bob time of the block's first detection.
    pub t_start: u64,
    /// Bob time of the block's last detection.
    pub t_end: u64,
    /// Offset at the block centre.
    pub offset_ps: i64,
    /// No histogram peak; the offset was interpolated from neighbours.
    pub flagged: bool,
}

/// Piecewise-constant Bob-minus-Alice offset over Bob's time axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetModel {
    pub coarse_ps: i64,
    pub blocks: Vec<OffsetBlock>,
}

impl OffsetModel {
    pub fn constant(offset_ps: i64) -> Self {
        Self {
            coarse_ps: offset_ps,
            blocks: vec![OffsetBlock {
                t_start: 0,
                t_end: u64::MAX,
                offset_ps,
                flagged: false,
            }],
        }
    }

    /// Offset in force at Bob time `t`.
    pub fn offset_at(&self, t: u64) -> i64 {
        let i = self.blocks.partition_point(|b| b.t_start <= t);
        match i {
            0 => self.blocks.first().map_or(self.coarse_ps, |b| b.offset_ps),
            i => self.blocks[i - 1].offset_ps,
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            coarse_ps: -self.coarse_ps,
            blocks: self
                .blocks
                .iter()
                .map(|b| OffsetBlock { offset_ps: -b.offset_ps, ..*b })
                .collect(),
        }
    }
}

/// Upper bound on slope hypotheses per side in one block fit.
const MAX_SLOPE_TRIALS: i64 = 256;

#[derive(Debug, Clone, Copy)]
struct Line {
    centre: f64,
    offset: f64,
    slope: f64,
}

impl Line {
    fn at(&self, t: f64) -> f64 {
        self.offset + self.slope * (t - self.centre)
    }
}

/// Fits offset and slope of one block: differences are histogrammed after
/// removing each trial slope in `guess.slope ± slope_tol`, and the sharpest
/// peak wins. `None` when no bin rises above the noise floor.
fn fit_block(
    a: &[u64],
    block: &[u64],
    guess: Line,
    half_range: f64,
    slope_tol: f64,
    cfg: &FineConfig,
) -> Option<Line> {
    let bin = cfg.hist_bin_ps.max(1) as f64;
    let centre = (block[0] as f64 + block[block.len() - 1] as f64) / 2.0;
    let half_span = (block[block.len() - 1] - block[0]) as f64 / 2.0;
    let base = guess.at(centre);
    let reach = half_range + slope_tol * half_span + bin;

    // (time from centre, difference from the guessed line)
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut ai = a.partition_point(|&t| (t as f64) < block[0] as f64 - base - guess.slope * (block[0] as f64 - centre) - reach);
    for &tb in block {
        let x = tb as f64 - centre;
        let pred = base + guess.slope * x;
        let a_lo = tb as f64 - pred - reach;
        while ai < a.len() && (a[ai] as f64) < a_lo {
            ai += 1;
        }
        let mut k = ai;
        while k < a.len() && (a[k] as f64) <= tb as f64 - pred + reach {
            pts.push((x, tb as f64 - a[k] as f64 - pred));
            k += 1;
        }
    }

    let half_bins = (half_range / bin).ceil() as i64;
    let n_bins = (2 * half_bins + 1) as usize;
    let lo = -(half_bins as f64 + 0.5) * bin;
    let mut step = if half_span > 0.0 { bin / (4.0 * half_span) } else { f64::INFINITY };
    let mut n_steps = if step.is_finite() { (slope_tol / step).ceil() as i64 } else { 0 };
    if n_steps > MAX_SLOPE_TRIALS {
        n_steps = MAX_SLOPE_TRIALS;
        step = slope_tol / n_steps as f64;
    }
    let mut hist = vec![0u32; n_bins];
    // (peak count, -|trial|) orders hypotheses; the smallest correction wins ties
    let mut best: Option<(u32, i64, usize, f64)> = None;
    let mut trials: Vec<i64> = (-n_steps..=n_steps).collect();
    trials.sort_by_key(|k| k.abs());
    for k in trials {
        let ds = k as f64 * step;
        hist.iter_mut().for_each(|h| *h = 0);
        for &(x, y) in &pts {
            let idx = ((y - ds * x - lo) / bin).floor();
            if idx >= 0.0 && (idx as usize) < n_bins {
                hist[idx as usize] += 1;
            }
        }
        let (peak_idx, &peak) = hist
            .iter()
            .enumerate()
            .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))?;
        if best.is_none_or(|(p, ..)| peak > p) {
            best = Some((peak, k, peak_idx, ds));
        }
    }
    let (peak, _, peak_idx, ds) = best?;
    let in_range = pts
        .iter()
        .filter(|&&(x, y)| (y - ds * x - lo) >= 0.0 && (y - ds * x - lo) < n_bins as f64 * bin)
        .count();
    let mean = in_range as f64 / n_bins as f64;
    if (peak as f64) <= mean + cfg.sigma * mean.max(1.0).sqrt() {
        return None;
    }
    let peak_centre = lo + (peak_idx as f64 + 0.5) * bin;
    let hw = cfg.centroid_half_width_ps as f64;
    let (sum, n) = pts
        .iter()
        .map(|&(x, y)| y - ds * x)
        .filter(|y| (y - peak_centre).abs() <= hw)
        .fold((0.0, 0usize), |(s, n), y| (s + y, n + 1));
    let resid = if n > 0 { sum / n as f64 } else { peak_centre };
    Some(Line {
        centre,
        offset: base + resid,
        slope: guess.slope + ds,
    })
}

/// Block-wise offset tracking starting from the coarse estimate.
///
/// The block holding the coarse reference time is fitted first, searching
/// slopes within the coarse drift uncertainty; tracking then proceeds
/// outwards in both directions, each block predicted from its neighbour's
/// offset and slope.
pub fn fine_sync(a: &[u64], b: &[u64], coarse: &CoarseOffset, cfg: &FineConfig) -> Result<OffsetModel, SyncError> {
    if b.is_empty() || a.is_empty() {
        return Err(SyncError::EmptyStream);
    }
    if cfg.min_block == 0 || cfg.hist_bin_ps == 0 {
        return Err(SyncError::Config("min_block and hist_bin_ps must be positive"));
    }
    let n_blocks = (b.len() / cfg.min_block).max(1);
    let bounds: Vec<(usize, usize)> = (0..n_blocks)
        .map(|k| {
            let s = k * cfg.min_block;
            let e = if k + 1 == n_blocks { b.len() } else { s + cfg.min_block };
            (s, e)
        })
        .collect();
    let centre_of = |k: usize| -> f64 {
        let (s, e) = bounds[k];
        (b[s] as f64 + b[e - 1] as f64) / 2.0
    };
    let half_span_of = |k: usize| -> f64 {
        let (s, e) = bounds[k];
        (b[e - 1] - b[s]) as f64 / 2.0
    };

    let start = bounds
        .iter()
        .position(|&(_, e)| b[e - 1] >= coarse.reference_ps)
        .unwrap_or(n_blocks - 1);
    let mut fits: Vec<Option<Line>> = vec![None; n_blocks];
    let seed_line = Line {
        centre: coarse.reference_ps as f64,
        offset: coarse.offset_ps as f64,
        slope: coarse.drift,
    };
    let lever = (centre_of(start) - coarse.reference_ps as f64).abs() + half_span_of(start);
    let first_range = 2.0 * coarse.resolution_ps as f64 + 4.0 * coarse.drift_uncertainty * lever + cfg.track_range_ps as f64;
    fits[start] = fit_block(a, &b[bounds[start].0..bounds[start].1], seed_line, first_range, 4.0 * coarse.drift_uncertainty, cfg);
    let Some(anchor) = fits[start] else {
        return Err(SyncError::NoSync);
    };

    for direction in [1i64, -1] {
        let mut last = anchor;
        let mut k = start as i64 + direction;
        while k >= 0 && (k as usize) < n_blocks {
            let ku = k as usize;
            let (s, e) = bounds[ku];
            let tol = 2.0 * cfg.hist_bin_ps as f64 / (4.0 * half_span_of(ku).max(1.0));
            let fit = fit_block(a, &b[s..e], last, cfg.track_range_ps as f64, tol, cfg);
            if let Some(line) = fit {
                last = line;
            }
            fits[ku] = fit;
            k += direction;
        }
    }

    let good: Vec<usize> = (0..n_blocks).filter(|&k| fits[k].is_some()).collect();
    let mut blocks = Vec::with_capacity(n_blocks);
    for k in 0..n_blocks {
        let (s, e) = bounds[k];
        let (offset, flagged) = match fits[k] {
            Some(line) => (line.offset, false),
            None => {
                let after = good.partition_point(|&g| g < k);
                let prev = after.checked_sub(1).map(|i| fits[good[i]].unwrap());
                let next = good.get(after).map(|&g| fits[g].unwrap());
                let offset = match (prev, next) {
                    (Some(l), Some(r)) => {
                        l.offset + (r.offset - l.offset) * (centre_of(k) - l.centre) / (r.centre - l.centre)
                    }
                    (Some(l), None) => l.at(centre_of(k)),
                    (None, Some(r)) => r.at(centre_of(k)),
                    (None, None) => unreachable!("the start block is fitted"),
                };
                (offset, true)
            }
        };
        blocks.push(OffsetBlock {
            t_start: b[s],
            t_end: b[e - 1],
            offset_ps: offset.round() as i64,
            flagged,
        });
    }
    Ok(OffsetModel {
        coarse_ps: coarse.offset_ps,
        blocks,
    })
}

/// A matched Alice/Bob detection pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coincidence {
    pub idx_a: u32,
    pub idx_b: u32,
    /// Bob time minus offset minus Alice time, ps.
    pub delta: i64,
}

/// Pairs tags whose offset-corrected times differ by at most `window_ps / 2`
/// (`window_ps` is the full coincidence window).
///
/// Matching is greedy on |Δt|: the closest candidate pair anywhere is taken
/// first, ties going to the earlier Bob tag, and each tag is used at most
/// once. The result is ordered by Bob index.
pub fn match_coincidences(a: &[u64], b: &[u64], model: &OffsetModel, window_ps: u64) -> Vec<Coincidence> {
    let half = (window_ps / 2) as i64;
    let mut candidates: Vec<(u64, u32, u32, i64)> = Vec::new();
    let mut lo = 0usize;
    for (j, &tb) in b.iter().enumerate() {
        let corrected = tb as i64 - model.offset_at(tb);
        let a_min = corrected - half;
        // corrected times are monotone within a block; back up across the
        // small steps at block boundaries
        while lo > 0 && a[lo - 1] as i64 >= a_min {
            lo -= 1;
        }
        while lo < a.len() && (a[lo] as i64) < a_min {
            lo += 1;
        }
        let mut k = lo;
        while k < a.len() && (a[k] as i64) <= corrected + half {
            let delta = corrected - a[k] as i64;
            candidates.push((delta.unsigned_abs(), j as u32, k as u32, delta));
            k += 1;
        }
    }
    candidates.sort_unstable();
    let mut used_a = std::collections::HashSet::with_capacity(candidates.len());
    let mut used_b = std::collections::HashSet::with_capacity(candidates.len());
    let mut out = Vec::new();
    for (_, j, k, delta) in candidates {
        if used_b.contains(&j) || used_a.contains(&k) {
            continue;
        }
        used_a.insert(k);
        used_b.insert(j);
        out.push(Coincidence { idx_a: k, idx_b: j, delta });
    }
    out.sort_unstable_by_key(|c| c.idx_b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn poisson_times(rate_hz: f64, duration_s: f64, seed: u64) -> Vec<u64> {
        let mut rng = seeded(seed);
        let n = (rate_hz * duration_s) as usize;
        let end = (duration_s * PS_PER_S as f64) as u64;
        let mut v: Vec<u64> = (0..n).map(|_| rng.random_range(0..end)).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn fft_correlation_matches_direct() {
        let mut rng = seeded(4);
        let signal: Vec<f64> = (0..5_000).map(|_| rng.random_range(0..3) as f64).collect();
        let template: Vec<f64> = (0..700).map(|_| rng.random_range(0..2) as f64).collect();
        let fast = cross_correlate(&signal, &template);
        let slow = cross_correlate_direct(&signal, &template);
        assert_eq!(fast.len(), slow.len());
        for (f, s) in fast.iter().zip(&slow) {
            assert!((f - s).abs() < 1e-6);
        }
        assert!(cross_correlate(&template, &signal).is_empty());
    }

    #[test]
    fn shared_transform_matches_direct_for_each_template() {
        let mut rng = seeded(8);
        let signal: Vec<f64> = (0..3_000).map(|_| rng.random_range(0..3) as f64).collect();
        let templates: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..300).map(|_| rng.random_range(0..2) as f64).collect())
            .collect();
        let mut got = vec![vec![0.0; 2_701]; 3];
        Correlator::new(&templates).run(&signal, |ti, start, vals| {
            got[ti][start..start + vals.len()].copy_from_slice(vals);
        });
        for (t, g) in templates.iter().zip(&got) {
            for (x, y) in cross_correlate_direct(&signal, t).iter().zip(g) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_streams_give_zero_offset() {
        let a = poisson_times(200_000.0, 0.5, 1);
        let c = coarse_offset(&a, &a, &CoarseConfig::default()).unwrap();
        assert!(c.offset_ps.unsigned_abs() <= c.resolution_ps, "{c:?}");
        assert_eq!(c.resolution_ps, 976);
    }

    #[test]
    fn planted_offset_is_found() {
        let a = poisson_times(100_000.0, 5.0, 2);
        let shift = 3 * PS_PER_S;
        let b: Vec<u64> = a.iter().map(|t| t + shift).collect();
        let c = coarse_offset(&a, &b, &CoarseConfig::default()).unwrap();
        assert!((c.offset_ps - shift as i64).unsigned_abs() <= c.resolution_ps, "{c:?}");
    }

    #[test]
    fn independent_streams_have_no_sync() {
        let a = poisson_times(300_000.0, 1.0, 5);
        let b = poisson_times(100_000.0, 1.0, 6);
        assert_eq!(coarse_offset(&a, &b, &CoarseConfig::default()), Err(SyncError::NoSync));
    }

    #[test]
    fn empty_inputs() {
        let a = poisson_times(1000.0, 1.0, 1);
        assert_eq!(coarse_offset(&a, &[], &CoarseConfig::default()), Err(SyncError::EmptyStream));
        assert!(match_coincidences(&[], &[], &OffsetModel::constant(0), 1000).is_empty());
    }

    #[test]
    fn fine_sync_zero_drift_and_degenerate_partition() {
        let a = poisson_times(200_000.0, 0.2, 9);
        let offset = 7_654_321i64;
        let b: Vec<u64> = a.iter().step_by(2).map(|&t| (t as i64 + offset) as u64).collect();
        let coarse = CoarseOffset {
            offset_ps: offset + 600,
            resolution_ps: 1000,
            reference_ps: b[0],
            drift: 0.0,
            drift_uncertainty: 1e-6,
            stages: vec![],
        };
        let m = fine_sync(&a, &b, &coarse, &FineConfig::default()).unwrap();
        assert_eq!(m.blocks.len(), b.len() / 1024);
        for blk in &m.blocks {
            assert!((blk.offset_ps - offset).abs() <= 250, "{blk:?}");
            assert!(!blk.flagged);
        }
        let big = FineConfig { min_block: b.len() * 2, ..FineConfig::default() };
        let m = fine_sync(&a, &b, &coarse, &big).unwrap();
        assert_eq!(m.blocks.len(), 1);
    }

    #[test]
    fn offset_model_lookup() {
        let m = OffsetModel {
            coarse_ps: 5,
            blocks: vec![
                OffsetBlock { t_start: 100, t_end: 199, offset_ps: 10, flagged: false },
                OffsetBlock { t_start: 200, t_end: 299, offset_ps: 20, flagged: false },
            ],
        };
        assert_eq!(m.offset_at(0), 10);
        assert_eq!(m.offset_at(150), 10);
        assert_eq!(m.offset_at(200), 20);
        assert_eq!(m.offset_at(10_000), 20);
        assert_eq!(m.negated().offset_at(250), -20);
    }

    #[test]
    fn greedy_prefers_smallest_delta_then_earlier_bob() {
        // Alice at 1000; Bob candidates at 1300 and 1100 (offset 0).
        let m = OffsetModel::constant(0);
        let c = match_coincidences(&[1000], &[1100, 1300], &m, 1000);
        assert_eq!(c, vec![Coincidence { idx_a: 0, idx_b: 0, delta: 100 }]);
        // Equal |Δt|: earlier Bob tag wins.
        let c = match_coincidences(&[1000], &[900, 1100], &m, 1000);
        assert_eq!(c, vec![Coincidence { idx_a: 0, idx_b: 0, delta: -100 }]);
        // Outside the half window.
        assert!(match_coincidences(&[1000], &[1501], &m, 1000).is_empty());
        assert_eq!(match_coincidences(&[1000], &[1500], &m, 1000).len(), 1);
    }
}
