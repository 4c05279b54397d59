//! Run configuration: TOML file plus command-line overrides.
//!
//! ```toml
//! preset = "jena-night"        # source parameter preset
//!
//! [source]                     # simulator parameters (live input, `simulate`)
//! duration = 10.0
//! seed = 7
//!
//! [session]                    # session parameters
//! max_qber = 0.11
//! timeout_s = 30.0
//! stats_bin_s = 300.0
//! [session.coarse]
//! search_range_ps = 10_000_000_000_000
//! [session.cascade]
//! passes = 4
//!
//! [endpoint]                   # alice / bob
//! listen = "0.0.0.0:7000"      # or connect = "host:7000"
//! tags = "alice.ttag"          # omit to simulate live
//! psk = "psk.bin"
//! ledger = "psk.bin.ledger"
//! stats_csv = "stats.csv"
//! stats_json = "stats.json"
//! kms_snapshot = "kms.json"
//!
//! [link]                       # linkbudget
//! wavelength = 810e-9
//! waist = 0.04
//! ```
//!
//! Precedence: command-line flags, then the file, then built-in defaults.

use crate::Failure;
use clap::Args;
use eqkd_core::linkmodel::{LinkParams, WaistConvention};
use eqkd_core::session::{SessionConfig, Stage};
use eqkd_core::simulator::SourceParams;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub source: SourceOverrides,
    pub session: SessionConfig,
    pub endpoint: EndpointConfig,
    pub link: LinkOverrides,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }
}

/// Simulator parameters; each unset field falls back to the preset.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceOverrides {
    /// Parameter preset (`jena-night`, `default`)
    #[arg(long)]
    pub preset: Option<String>,
    /// Pair emission rate, pairs/s
    #[arg(long)]
    pub pair_rate: Option<f64>,
    /// HV-basis visibility
    #[arg(long)]
    pub v_hv: Option<f64>,
    /// DA-basis visibility
    #[arg(long)]
    pub v_da: Option<f64>,
    /// Alice end-to-end detection efficiency
    #[arg(long)]
    pub eff_a: Option<f64>,
    /// Bob end-to-end detection efficiency
    #[arg(long)]
    pub eff_b: Option<f64>,
    /// Dark counts per detector at Alice, counts/s
    #[arg(long)]
    pub dark_per_det_a: Option<f64>,
    /// Dark counts per detector at Bob, counts/s
    #[arg(long)]
    pub dark_per_det_b: Option<f64>,
    /// Background at Bob over all detectors, counts/s
    #[arg(long)]
    pub bg_b: Option<f64>,
    /// Timing jitter per detection, s
    #[arg(long)]
    pub jitter_sigma: Option<f64>,
    /// Bob-minus-Alice clock offset, s
    #[arg(long, allow_hyphen_values = true)]
    pub clock_offset: Option<f64>,
    /// Bob clock rate error
    #[arg(long, allow_hyphen_values = true)]
    pub clock_drift: Option<f64>,
    /// Added to both clocks, s
    #[arg(long)]
    pub clock_epoch: Option<f64>,
    /// Acquisition time, s
    #[arg(long)]
    pub duration: Option<f64>,
    /// Simulator seed
    #[arg(long = "sim-seed", id = "sim_seed")]
    #[serde(rename = "seed")]
    pub seed: Option<u64>,
}

impl SourceOverrides {
    /// Flags in `self` win over `file`; the preset comes from either, then
    /// `file_preset`, else defaults.
    pub fn resolve(&self, file: &SourceOverrides, file_preset: Option<&str>) -> Result<SourceParams, Failure> {
        let preset = self.preset.as_deref().or(file.preset.as_deref()).or(file_preset);
        let mut p = match preset {
            Some(name) => SourceParams::preset(name).map_err(|e| Failure::usage(e.to_string()))?,
            None => SourceParams::default(),
        };
        macro_rules! pick {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.or(file.$f) {
                    p.$f = v;
                }
            )*};
        }
        pick!(
            pair_rate, v_hv, v_da, eff_a, eff_b, dark_per_det_a, dark_per_det_b, bg_b, jitter_sigma, clock_offset,
            clock_drift, clock_epoch, duration, seed
        );
        p.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub listen: Option<String>,
    pub connect: Option<String>,
    pub tags: Option<PathBuf>,
    pub psk: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
    pub stats_csv: Option<PathBuf>,
    pub stats_json: Option<PathBuf>,
    pub kms_snapshot: Option<PathBuf>,
    pub kms_serve: Option<String>,
}

/// Session settings that can be given as flags.
#[derive(Debug, Clone, Default, Args)]
pub struct SessionFlags {
    /// Seconds to wait for the peer (connection and each message)
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Abort when the estimated QBER exceeds this
    #[arg(long)]
    pub max_qber: Option<f64>,
    /// Fraction of sifted bits disclosed for error estimation
    #[arg(long)]
    pub sample_fraction: Option<f64>,
    /// Full coincidence window, ps
    #[arg(long)]
    pub window_ps: Option<u64>,
    /// Safety margin N_mar, bits
    #[arg(long)]
    pub n_mar: Option<usize>,
    /// Authentication field size in bits (32, 64, 96, 128, 256)
    #[arg(long)]
    pub auth_bits: Option<u32>,
    /// Width of the statistics bins, s
    #[arg(long)]
    pub stats_bin: Option<f64>,
    /// Seed for local random choices (nonces, samples, hash seeds)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Test hook: abort right after this stage (sync, sift, estimate, reconcile, confirm, amplify)
    #[arg(long)]
    pub abort_after: Option<Stage>,
}

impl SessionFlags {
    pub fn apply(&self, mut cfg: SessionConfig) -> Result<SessionConfig, Failure> {
        if let Some(v) = self.timeout {
            cfg.timeout_s = v;
        }
        if let Some(v) = self.max_qber {
            cfg.max_qber = v;
        }
        if let Some(v) = self.sample_fraction {
            cfg.sample_fraction = v;
        }
        if let Some(v) = self.window_ps {
            cfg.window_ps = v;
        }
        if let Some(v) = self.n_mar {
            cfg.n_mar = v;
        }
        if let Some(v) = self.auth_bits {
            cfg.auth_bits = v.try_into().map_err(|e: eqkd_core::auth::GfError| Failure::usage(e.to_string()))?;
        }
        if let Some(v) = self.stats_bin {
            cfg.stats_bin_s = v;
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.abort_after.is_some() {
            cfg.abort_after = self.abort_after;
        }
        cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkOverrides {
    /// Wavelength, m
    #[arg(long)]
    pub wavelength: Option<f64>,
    /// Transmitter beam waist, m
    #[arg(long)]
    pub waist: Option<f64>,
    /// Whether --waist is a radius or a diameter
    #[arg(long, value_parser = parse_convention)]
    pub waist_convention: Option<WaistConvention>,
    /// Receiver aperture diameter, m
    #[arg(long)]
    pub rx_aperture_diam: Option<f64>,
}

fn parse_convention(s: &str) -> Result<WaistConvention, String> {
    match s {
        "radius" => Ok(WaistConvention::Radius),
        "diameter" => Ok(WaistConvention::Diameter),
        other => Err(format!("expected radius or diameter, got {other:?}")),
    }
}

impl LinkOverrides {
    pub fn resolve(&self, file: &LinkOverrides) -> LinkParams {
        let mut p = LinkParams::default();
        macro_rules! pick {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.or(file.$f) {
                    p.$f = v;
                }
            )*};
        }
        pick!(wavelength, waist, waist_convention, rx_aperture_diam);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_preset() {
        let file: RunConfig = toml::from_str(
            r#"
            preset = "jena-night"
            [source]
            duration = 5.0
            seed = 9
            [session]
            max_qber = 0.08
            [session.coarse]
            max_drift = 1e-6
            "#,
        )
        .unwrap();
        let flags = SourceOverrides { duration: Some(2.0), ..Default::default() };
        let p = flags.resolve(&file.source, file.preset.as_deref()).unwrap();
        assert_eq!(p.duration, 2.0);
        assert_eq!(p.seed, 9);
        assert_eq!(p.v_hv, SourceParams::jena_night().v_hv);
        let s = SessionFlags { timeout: Some(3.0), ..Default::default() }.apply(file.session).unwrap();
        assert_eq!((s.timeout_s, s.max_qber, s.coarse.max_drift), (3.0, 0.08, 1e-6));
        assert_eq!(s.window_ps, 1000);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(toml::from_str::<RunConfig>("[source]\nbogus = 1").is_err());
        let bad = SourceOverrides { duration: Some(0.0), ..Default::default() };
        let e = bad.resolve(&SourceOverrides::default(), None).unwrap_err();
        assert_eq!(e.message, "duration must be positive (got 0)");
        let e = SessionFlags { auth_bits: Some(48), ..Default::default() }.apply(SessionConfig::default()).unwrap_err();
        assert_eq!(e.code, crate::EXIT_USAGE);
    }
}
