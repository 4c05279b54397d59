//! Per-bin session statistics and their CSV/JSON forms.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const STATS_SCHEMA: &str = "eqkd-stats/1";
pub const CSV_HEADER: &str = "bin_start_s,skr_bps,qber,singles_a,singles_b,coinc";

/// Raw counts for one time bin, as both endpoints see them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinCounts {
    /// Bin start relative to Alice's first tag, seconds.
    pub start_s: f64,
    pub width_s: f64,
    pub singles_a: u64,
    pub singles_b: u64,
    pub coinc: u64,
    /// Sifted bits left after sampling.
    pub n_in: u64,
    pub sample_n: u64,
    pub sample_err: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub bin_start_s: f64,
    pub skr_bps: f64,
    pub qber: f64,
    pub singles_a: u64,
    pub singles_b: u64,
    pub coinc: u64,
}

/// Spreads `n_fin` final bits over the bins in proportion to their share
/// of the reconciled input.
pub fn rows(bins: &[BinCounts], n_fin: usize) -> Vec<StatsRow> {
    let n_in: u64 = bins.iter().map(|b| b.n_in).sum();
    bins.iter()
        .map(|b| {
            let share = if n_in == 0 { 0.0 } else { n_fin as f64 * b.n_in as f64 / n_in as f64 };
            StatsRow {
                bin_start_s: b.start_s,
                skr_bps: if b.width_s > 0.0 { share / b.width_s } else { 0.0 },
                qber: if b.sample_n == 0 { 0.0 } else { b.sample_err as f64 / b.sample_n as f64 },
                singles_a: b.singles_a,
                singles_b: b.singles_b,
                coinc: b.coinc,
            }
        })
        .collect()
}

pub fn to_csv(rows: &[StatsRow]) -> String {
    let mut out = format!("# schema: {STATS_SCHEMA}\n{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:.3},{:.1},{:.5},{},{},{}",
            r.bin_start_s, r.skr_bps, r.qber, r.singles_a, r.singles_b, r.coinc
        );
    }
    out
}

#[derive(Serialize)]
struct JsonDoc<'a> {
    schema: &'a str,
    bins: &'a [StatsRow],
}

pub fn to_json(rows: &[StatsRow]) -> String {
    serde_json::to_string_pretty(&JsonDoc { schema: STATS_SCHEMA, bins: rows }).expect("stats serialize")
}
