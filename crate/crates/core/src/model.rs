//! Physical parameters of the cavity/mirror setup and the geometry of the
//! cavity resonances.
//!
//! The cavity has static length `L0 = N·λ/2`. Mode `n = N + k` is resonant
//! with the drive when the mirror sits at `x_k = k·λ/2`; the integer offset
//! `k` is used throughout instead of the absolute mode order.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant, CODATA 2018 (exact) [J·s].
pub const HBAR: f64 = 1.054_571_817e-34;
/// Speed of light in vacuum (exact) [m/s].
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Below this ratio κ/ω_m the cavity no longer follows the mirror quasi-statically.
const UNRESOLVED_SIDEBAND_MIN_RATIO: f64 = 10.0;

/// All physical constants of one optomechanical setup, in SI units.
///
/// `omega_m` is an angular frequency. `duffing_alpha` is the cubic
/// stiffening constant of the restoring force `-m ω_m² (1 + α x²) x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub omega_m: f64,
    pub mass: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub lambda_l: f64,
    pub n_order: i64,
    pub power: f64,
    pub duffing_alpha: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self::reference()
    }
}

impl SystemParams {
    /// The reference setup: ω_m = 1e7, m = 5e-15 kg, γ = 1e-2 ω_m,
    /// κ = 1e2 ω_m, λ = 1000 nm, N = 10000, no drive, harmonic spring.
    pub fn reference() -> Self {
        let omega_m = 1e7;
        Self {
            omega_m,
            mass: 5e-15,
            gamma: 1e-2 * omega_m,
            kappa: 1e2 * omega_m,
            lambda_l: 1000e-9,
            n_order: 10_000,
            power: 0.0,
            duffing_alpha: 0.0,
        }
    }

    pub fn with_power(mut self, power: f64) -> Self {
        self.power = power;
        self
    }

    pub fn with_duffing(mut self, alpha: f64) -> Self {
        self.duffing_alpha = alpha;
        self
    }

    /// Static cavity length, `N·λ/2`.
    pub fn l0(&self) -> f64 {
        self.n_order as f64 * self.half_wavelength()
    }

    pub fn half_wavelength(&self) -> f64 {
        0.5 * self.lambda_l
    }

    /// Drive angular frequency `ω_l = 2πc/λ`.
    pub fn omega_l(&self) -> f64 {
        2.0 * PI * SPEED_OF_LIGHT / self.lambda_l
    }

    /// Checks hard invariants and returns soft warnings (regime checks).
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("omega_m", self.omega_m),
            ("mass", self.mass),
            ("kappa", self.kappa),
            ("lambda_l", self.lambda_l),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::param("gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        if !(self.power.is_finite() && self.power >= 0.0) {
            return Err(Error::param("power", format!("must be >= 0, got {}", self.power)));
        }
        if !self.duffing_alpha.is_finite() {
            return Err(Error::param("duffing_alpha", "must be finite"));
        }
        if self.n_order < 1 {
            return Err(Error::param("n_order", format!("must be >= 1, got {}", self.n_order)));
        }
        let mut warnings = Vec::new();
        let ratio = self.kappa / self.omega_m;
        if ratio < UNRESOLVED_SIDEBAND_MIN_RATIO {
            warnings.push(format!(
                "kappa/omega_m = {ratio:.3} is not deep in the unresolved-sideband regime"
            ));
        }
        if self.gamma >= 2.0 * self.omega_m {
            warnings.push("mirror is not underdamped (gamma >= 2 omega_m)".to_string());
        }
        Ok(warnings)
    }
}

/// Real drive amplitude `α_L = sqrt(2κP / (ħ ω_l))`.
pub fn drive_amplitude(params: &SystemParams) -> Result<f64> {
    if !(params.power >= 0.0) {
        return Err(Error::param("power", format!("must be >= 0, got {}", params.power)));
    }
    Ok((2.0 * params.kappa * params.power / (HBAR * params.omega_l())).sqrt())
}

/// Angular frequency of mode `N + k` with the mirror at `x`.
pub fn mode_frequency(params: &SystemParams, k: i64, x: f64) -> Result<f64> {
    let l0 = params.l0();
    if !(x + l0 > 0.0) {
        return Err(Error::Geometry { x, l0 });
    }
    Ok((params.n_order + k) as f64 * PI * SPEED_OF_LIGHT / (x + l0))
}

/// Mirror position `x_k = k·λ/2` at which mode `N + k` meets the drive.
pub fn resonance_position(params: &SystemParams, k: i64) -> f64 {
    k as f64 * params.half_wavelength()
}

/// Linearised coupling `g_{N+k} = 4πc / ((N+k) λ²)` [rad/(s·m)].
pub fn coupling_strength(params: &SystemParams, k: i64) -> Result<f64> {
    let order = params.n_order + k;
    if order <= 0 {
        return Err(Error::InvalidModeOrder { order });
    }
    Ok(4.0 * PI * SPEED_OF_LIGHT / (order as f64 * params.lambda_l * params.lambda_l))
}

/// Offsets `k` whose resonance lies within `[x_min, x_max]` padded by
/// `margin` half-wavelengths on each side.
pub fn active_window(
    params: &SystemParams,
    x_min: f64,
    x_max: f64,
    margin: u32,
) -> RangeInclusive<i64> {
    let half = params.half_wavelength();
    let lo = (x_min / half).ceil() as i64 - margin as i64;
    let hi = (x_max / half).floor() as i64 + margin as i64;
    lo..=hi
}

/// Scale factors between SI and the internal dimensionless units.
///
/// Time is measured in `1/ω_m`, length in `λ/2`, and mode amplitudes in
/// `α_L/κ` (the on-resonance steady-state amplitude), so the integrator
/// state stays O(1). With no drive the amplitude scale falls back to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledUnits {
    pub time_scale: f64,
    pub length_scale: f64,
    pub amplitude_scale: f64,
}

impl ScaledUnits {
    pub fn new(params: &SystemParams) -> Result<Self> {
        let alpha_l = drive_amplitude(params)?;
        let amplitude_scale = if alpha_l > 0.0 {
            alpha_l / params.kappa
        } else {
            1.0
        };
        Ok(Self {
            time_scale: 1.0 / params.omega_m,
            length_scale: params.half_wavelength(),
            amplitude_scale,
        })
    }

    pub fn velocity_scale(&self) -> f64 {
        self.length_scale / self.time_scale
    }

    pub fn time_to_scaled(&self, t: f64) -> f64 {
        t / self.time_scale
    }
    pub fn time_to_si(&self, t: f64) -> f64 {
        t * self.time_scale
    }
    pub fn length_to_scaled(&self, x: f64) -> f64 {
        x / self.length_scale
    }
    pub fn length_to_si(&self, x: f64) -> f64 {
        x * self.length_scale
    }
    pub fn velocity_to_scaled(&self, v: f64) -> f64 {
        v / self.velocity_scale()
    }
    pub fn velocity_to_si(&self, v: f64) -> f64 {
        v * self.velocity_scale()
    }
    pub fn amplitude_to_scaled(&self, a: f64) -> f64 {
        a / self.amplitude_scale
    }
    pub fn amplitude_to_si(&self, a: f64) -> f64 {
        a * self.amplitude_scale
    }
}
