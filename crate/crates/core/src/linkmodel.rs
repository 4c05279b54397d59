//! Free-space link budget and key-rate arithmetic.
//!
//! Beam spreading follows the Gaussian-beam treatment for Kolmogorov
//! turbulence: the diffraction-limited spot `W(L)` is widened into a
//! long-term spot `W_LT = W(L)·sqrt(1 + 1.33·σ_R²·Λ^(5/6))`, and the fraction
//! of power inside the receiver aperture of radius `a` is
//! `1 − exp(−2a²/W_LT²)`. Pointing error is taken to be nulled by closed-loop
//! beam stabilization, so only spreading enters the budget.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Sanity band for the refractive-index structure parameter, m^(-2/3).
/// Zero is also accepted and means a turbulence-free path.
pub const CN2_BAND: (f64, f64) = (1e-18, 1e-12);

/// How the configured `waist` is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaistConvention {
    /// `waist` is the 1/e² intensity radius.
    #[default]
    Radius,
    /// `waist` is the 1/e² beam diameter; the radius is half of it.
    Diameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// m
    pub wavelength: f64,
    /// m, transmitter beam waist
    pub waist: f64,
    pub waist_convention: WaistConvention,
    /// m
    pub distance: f64,
    /// m^(-2/3)
    pub cn2: f64,
    /// m
    pub rx_aperture_diam: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            wavelength: 810e-9,
            waist: 0.04,
            waist_convention: WaistConvention::Radius,
            distance: 1_700.0,
            cn2: 1e-15,
            rx_aperture_diam: 0.200,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LinkError {
    #[error("{name} must be strictly positive and finite (got {value})")]
    NotPositive { name: &'static str, value: f64 },
    #[error("distance must be non-negative and finite (got {0})")]
    BadDistance(f64),
    #[error("cn2 = {0} outside the sanity band [1e-18, 1e-12] m^(-2/3) (0 allowed)")]
    Cn2OutOfBand(f64),
    #[error("rate budget: {0}")]
    BadBudget(&'static str),
    #[error("sweep needs at least one distance and one cn2 value")]
    EmptySweep,
}

impl LinkParams {
    pub fn with_distance(mut self, distance: f64) -> Self {
        self.distance = distance;
        self
    }

    pub fn with_cn2(mut self, cn2: f64) -> Self {
        self.cn2 = cn2;
        self
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        for (name, value) in [
            ("wavelength", self.wavelength),
            ("waist", self.waist),
            ("rx_aperture_diam", self.rx_aperture_diam),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(LinkError::NotPositive { name, value });
            }
        }
        if !(self.distance >= 0.0 && self.distance.is_finite()) {
            return Err(LinkError::BadDistance(self.distance));
        }
        let ok = self.cn2 == 0.0 || (self.cn2 >= CN2_BAND.0 && self.cn2 <= CN2_BAND.1);
        if !ok {
            return Err(LinkError::Cn2OutOfBand(self.cn2));
        }
        Ok(())
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    pub fn waist_radius(&self) -> f64 {
        match self.waist_convention {
            WaistConvention::Radius => self.waist,
            WaistConvention::Diameter => self.waist / 2.0,
        }
    }

    pub fn rayleigh_range(&self) -> f64 {
        let w0 = self.waist_radius();
        PI * w0 * w0 / self.wavelength
    }

    /// Diffraction-limited spot radius at the receiver.
    pub fn diffraction_spot(&self) -> f64 {
        let ratio = self.distance / self.rayleigh_range();
        self.waist_radius() * (1.0 + ratio * ratio).sqrt()
    }

    /// Turbulence-broadened long-term spot radius at the receiver.
    pub fn long_term_spot(&self) -> f64 {
        let w = self.diffraction_spot();
        if self.distance == 0.0 {
            return w;
        }
        let lambda = 2.0 * self.distance / (self.wavenumber() * w * w);
        w * (1.0 + 1.33 * rytov_variance(self) * lambda.powf(5.0 / 6.0)).sqrt()
    }

    /// Fraction of the beam's power captured by the receiver aperture.
    pub fn capture_fraction(&self) -> f64 {
        let a = self.rx_aperture_diam / 2.0;
        let w = self.long_term_spot();
        -(-2.0 * a * a / (w * w)).exp_m1()
    }
}

/// σ_R² = 1.23 · C_n² · k^(7/6) · L^(11/6).
pub fn rytov_variance(p: &LinkParams) -> f64 {
    1.23 * p.cn2 * p.wavenumber().powf(7.0 / 6.0) * p.distance.powf(11.0 / 6.0)
}

/// Average loss from diffraction and turbulence-induced beam spreading, dB.
pub fn beam_spread_loss_db(p: &LinkParams) -> f64 {
    (-10.0 * p.capture_fraction().log10()).max(0.0)
}

/// Singles, coincidence and noise rates of a link, counts/s; `window` in s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateBudget {
    pub singles_a: f64,
    pub singles_b: f64,
    pub coinc: f64,
    pub window: f64,
    pub noise_a: f64,
    pub noise_b: f64,
}

impl RateBudget {
    /// The 1.7 km night run: 1.03 Mcps / 190 kcps singles, 14.3 kcps
    /// coincidences in a 1 ns window.
    pub fn night_benchmark() -> Self {
        Self {
            singles_a: 1.03e6,
            singles_b: 1.90e5,
            coinc: 14.3e3,
            window: 1e-9,
            noise_a: 1e3,
            noise_b: 1e3,
        }
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        let all = [
            self.singles_a,
            self.singles_b,
            self.coinc,
            self.window,
            self.noise_a,
            self.noise_b,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LinkError::BadBudget("rates must be finite and non-negative"));
        }
        if self.window <= 0.0 {
            return Err(LinkError::BadBudget("window must be positive"));
        }
        if self.coinc > self.singles_a.min(self.singles_b) {
            return Err(LinkError::BadBudget("coincidences exceed singles"));
        }
        Ok(())
    }
}

/// Expected rate of uncorrelated coincidences: R_A · R_B · τ_c.
pub fn accidental_rate(b: &RateBudget) -> f64 {
    b.singles_a * b.singles_b * b.window
}

/// Scales a secure key rate by an extra channel loss, valid while signal
/// rates dominate noise (the rate is then linear in transmission).
pub fn extrapolate_skr(base_skr: f64, extra_loss_db: f64) -> f64 {
    base_skr * 10f64.powf(-extra_loss_db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    #[serde(rename = "L_m")]
    pub distance: f64,
    pub cn2: f64,
    pub loss_db: f64,
}

/// Loss table over `distances × cn2s`, grouped by `cn2` then distance, in
/// the order given.
pub fn sweep_loss(p: &LinkParams, distances: &[f64], cn2s: &[f64]) -> Result<Vec<LossPoint>, LinkError> {
    if distances.is_empty() || cn2s.is_empty() {
        return Err(LinkError::EmptySweep);
    }
    let mut out = Vec::with_capacity(distances.len() * cn2s.len());
    for &cn2 in cn2s {
        for &distance in distances {
            let q = p.with_distance(distance).with_cn2(cn2);
            q.validate()?;
            out.push(LossPoint {
                distance,
                cn2,
                loss_db: beam_spread_loss_db(&q),
            });
        }
    }
    Ok(out)
}
