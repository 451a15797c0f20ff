//! Equations of motion for the cavity modes and the mirror.
//!
//! The SI-level functions here are the reference form of the model and are
//! what the tests check against. [`ScaledModel`] carries the same equations
//! in dimensionless units for the integrator's inner loop.

use std::ops::RangeInclusive;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    coupling_strength, drive_amplitude, resonance_position, ScaledUnits, SystemParams, HBAR,
    SPEED_OF_LIGHT,
};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Mechanical position/momentum pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MirrorState {
    pub x: f64,
    pub p: f64,
}

/// Complex amplitudes `α_{N+k}` for a contiguous window of offsets `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    k_lo: i64,
    amplitudes: Vec<Complex64>,
}

impl ModeSet {
    pub fn new(window: RangeInclusive<i64>, amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = window_len(&window);
        if amplitudes.len() != len {
            return Err(Error::InvalidInput(format!(
                "mode window {window:?} holds {len} modes but {} amplitudes were given",
                amplitudes.len()
            )));
        }
        Ok(Self {
            k_lo: *window.start(),
            amplitudes,
        })
    }

    pub fn zeros(window: RangeInclusive<i64>) -> Self {
        let len = window_len(&window);
        Self {
            k_lo: *window.start(),
            amplitudes: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    pub fn empty() -> Self {
        Self {
            k_lo: 0,
            amplitudes: Vec::new(),
        }
    }

    pub fn window(&self) -> RangeInclusive<i64> {
        self.k_lo..=self.k_lo + self.amplitudes.len() as i64 - 1
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn get(&self, k: i64) -> Option<Complex64> {
        let i = k.checked_sub(self.k_lo)?;
        usize::try_from(i).ok().and_then(|i| self.amplitudes.get(i).copied())
    }

    pub fn get_mut(&mut self, k: i64) -> Option<&mut Complex64> {
        let i = k.checked_sub(self.k_lo)?;
        usize::try_from(i).ok().and_then(|i| self.amplitudes.get_mut(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, Complex64)> + '_ {
        self.amplitudes
            .iter()
            .enumerate()
            .map(move |(i, a)| (self.k_lo + i as i64, *a))
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    /// Total intracavity photon number `Σ|α|²`.
    pub fn photon_number(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }
}

fn window_len(w: &RangeInclusive<i64>) -> usize {
    if w.is_empty() {
        0
    } else {
        (w.end() - w.start() + 1) as usize
    }
}

/// Mirror, cavity modes and time, all SI.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub mirror: MirrorState,
    pub modes: ModeSet,
    pub time: f64,
}

impl FullState {
    /// State with the given mirror and every window mode at its zeroth-order
    /// adiabatic (steady-state) amplitude.
    pub fn adiabatic(
        params: &SystemParams,
        mirror: MirrorState,
        window: RangeInclusive<i64>,
    ) -> Result<Self> {
        let alpha_l = drive_amplitude(params)?;
        let amps = window
            .clone()
            .map(|k| steady_amplitude(params, alpha_l, k, mirror.x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mirror,
            modes: ModeSet::new(window, amps)?,
            time: 0.0,
        })
    }
}

/// Detuning `ω_{N+k}(x) - ω_l`, evaluated without cancellation.
pub fn detuning(params: &SystemParams, k: i64, x: f64) -> Result<f64> {
    let l0 = params.l0();
    if !(x + l0 > 0.0) {
        return Err(Error::Geometry { x, l0 });
    }
    let xs = x / params.half_wavelength();
    Ok(params.omega_l() * (k as f64 - xs) / (params.n_order as f64 + xs))
}

/// Steady amplitude of a mode for a frozen mirror, `-iα_L/(iΔ + κ)`.
pub fn steady_amplitude(params: &SystemParams, alpha_l: f64, k: i64, x: f64) -> Result<Complex64> {
    let delta = detuning(params, k, x)?;
    Ok(-I * alpha_l / Complex64::new(params.kappa, delta))
}

/// Time derivative of `α_{N+k}`: `-i(ω_{N+k}(x) - ω_l)α - iα_L - κα`.
pub fn mode_rhs(state: &FullState, k: i64, params: &SystemParams) -> Result<Complex64> {
    let alpha = state.modes.get(k).ok_or_else(|| {
        Error::InvalidInput(format!("mode offset {k} outside window {:?}", state.modes.window()))
    })?;
    let delta = detuning(params, k, state.mirror.x)?;
    let alpha_l = drive_amplitude(params)?;
    Ok(-I * delta * alpha - I * alpha_l - params.kappa * alpha)
}

/// Radiation-pressure force `ħ Σ_k (N+k)πc/(x+L0)² |α_{N+k}|²` [N].
pub fn radiation_force(state: &FullState, params: &SystemParams) -> Result<f64> {
    let l0 = params.l0();
    let x = state.mirror.x;
    if !(x + l0 > 0.0) {
        return Err(Error::Geometry { x, l0 });
    }
    let inv = 1.0 / (x + l0);
    let sum: f64 = state
        .modes
        .iter()
        .map(|(k, a)| (params.n_order + k) as f64 * a.norm_sqr())
        .sum();
    Ok(HBAR * std::f64::consts::PI * SPEED_OF_LIGHT * inv * inv * sum)
}

/// `(dx/dt, dp/dt)` for the mirror, with optional cubic stiffening.
pub fn mirror_rhs(state: &FullState, params: &SystemParams) -> Result<(f64, f64)> {
    let MirrorState { x, p } = state.mirror;
    let m = params.mass;
    let restoring = -m * params.omega_m * params.omega_m * (1.0 + params.duffing_alpha * x * x) * x;
    let f = radiation_force(state, params)?;
    Ok((p / m, restoring + f - params.gamma * p))
}

/// Mechanical energy including the quartic term of the stiffened spring [J].
pub fn mechanical_energy(params: &SystemParams, mirror: MirrorState) -> f64 {
    let m = params.mass;
    let w2 = params.omega_m * params.omega_m;
    let x2 = mirror.x * mirror.x;
    0.5 * mirror.p * mirror.p / m + 0.5 * m * w2 * x2 + 0.25 * m * w2 * params.duffing_alpha * x2 * x2
}

/// Quasi-static photon number including the first-order velocity correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdiabaticPhotons {
    pub value: f64,
    /// False when the velocity correction drove the expression negative and
    /// the value was clamped to zero.
    pub valid: bool,
}

/// `α_L²/(g²u² + κ²) · [1 + 4κg²u·v/(g²u² + κ²)²]` with `u = x - x_k`.
pub fn adiabatic_photon_number(
    k: i64,
    x: f64,
    v: f64,
    params: &SystemParams,
) -> Result<AdiabaticPhotons> {
    let g = coupling_strength(params, k)?;
    let alpha_l = drive_amplitude(params)?;
    let u = x - resonance_position(params, k);
    let kappa = params.kappa;
    let den = g * g * u * u + kappa * kappa;
    let bracket = 1.0 + 4.0 * kappa * g * g * u * v / (den * den);
    let value = alpha_l * alpha_l / den * bracket;
    if value < 0.0 {
        Ok(AdiabaticPhotons {
            value: 0.0,
            valid: false,
        })
    } else {
        Ok(AdiabaticPhotons { value, valid: true })
    }
}

/// The equations of motion in dimensionless units.
///
/// Time in `1/ω_m`, length in `λ/2`, velocity in `ω_m λ/2`, amplitudes in
/// `α_L/κ`, forces in `m ω_m² λ/2` and energies in `m ω_m² (λ/2)²`:
///
/// ```text
/// α̇_k = -iΔ_k(x)α_k - i·drive - κ·α_k,   Δ_k(x) = detuning_scale·(k - x)/(N + x)
/// ẍ   = -x(1 + duffing·x²) - γẋ + force_scale·Σ (N+k)/(N+x)² |α_k|²
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledModel {
    pub units: ScaledUnits,
    pub n: f64,
    pub n_order: i64,
    pub detuning_scale: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub drive: f64,
    pub force_scale: f64,
    pub duffing: f64,
    /// SI energy of one scaled energy unit [J].
    pub energy_unit: f64,
}

impl ScaledModel {
    pub fn new(params: &SystemParams) -> Result<Self> {
        params.validate()?;
        let units = ScaledUnits::new(params)?;
        let alpha_l = drive_amplitude(params)?;
        let w = params.omega_m;
        let half = params.half_wavelength();
        let s = units.amplitude_scale;
        Ok(Self {
            units,
            n: params.n_order as f64,
            n_order: params.n_order,
            detuning_scale: params.omega_l() / w,
            kappa: params.kappa / w,
            gamma: params.gamma / w,
            drive: alpha_l / (w * s),
            force_scale: HBAR * s * s * params.omega_l() / (params.mass * w * w * half * half),
            duffing: params.duffing_alpha * half * half,
            energy_unit: params.mass * w * w * half * half,
        })
    }

    #[inline]
    pub fn detuning(&self, k: i64, x: f64) -> f64 {
        self.detuning_scale * (k as f64 - x) / (self.n + x)
    }

    #[inline]
    pub fn steady(&self, k: i64, x: f64) -> Complex64 {
        -I * self.drive / Complex64::new(self.kappa, self.detuning(k, x))
    }

    #[inline]
    pub fn mode_rhs(&self, delta: f64, a: Complex64) -> Complex64 {
        Complex64::new(delta * a.im - self.kappa * a.re, -delta * a.re - self.drive - self.kappa * a.im)
    }

    #[inline]
    pub fn restoring(&self, x: f64) -> f64 {
        -x * (1.0 + self.duffing * x * x)
    }

    #[inline]
    pub fn energy(&self, x: f64, v: f64) -> f64 {
        let x2 = x * x;
        0.5 * v * v + 0.5 * x2 + 0.25 * self.duffing * x2 * x2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mode_frequency, ScaledUnits};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    fn single(_params: &SystemParams, k: i64, x: f64, a: Complex64) -> FullState {
        FullState {
            mirror: MirrorState { x, p: 0.0 },
            modes: ModeSet::new(k..=k, vec![a]).unwrap(),
            time: 0.0,
        }
    }

    #[test]
    fn detuning_matches_mode_frequency() {
        let p = SystemParams::reference();
        for (k, x) in [(0, 0.0), (2, 3e-7), (-3, -1.7e-6), (5, 2.2e-6)] {
            let direct = mode_frequency(&p, k, x).unwrap() - p.omega_l();
            let stable = detuning(&p, k, x).unwrap();
            assert!((direct - stable).abs() < 1.0 + 1e-9 * stable.abs());
        }
    }

    #[test]
    fn undriven_vacuum_is_stationary() {
        let p = SystemParams::reference();
        let s = single(&p, 0, 0.0, Complex64::new(0.0, 0.0));
        assert_eq!(mode_rhs(&s, 0, &p).unwrap(), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn resonant_fixed_point() {
        let p = SystemParams::reference().with_power(1.0);
        let al = drive_amplitude(&p).unwrap();
        let star = -I * al / p.kappa;
        let s = single(&p, 0, 0.0, star);
        let d = mode_rhs(&s, 0, &p).unwrap();
        assert!(d.norm() < 1e-12 * al);
        assert!(rel(star.norm_sqr(), al * al / (p.kappa * p.kappa)) < 1e-14);
    }

    #[test]
    fn detuned_fixed_point_solves_linear_equation() {
        let p = SystemParams::reference().with_power(3.0);
        let al = drive_amplitude(&p).unwrap();
        let x = 7e-9;
        let delta = detuning(&p, 0, x).unwrap();
        // (-iΔ - κ)α = iα_L  =>  α = iα_L / (-iΔ - κ)
        let star = I * al / Complex64::new(-p.kappa, -delta);
        let s = single(&p, 0, x, star);
        assert!(mode_rhs(&s, 0, &p).unwrap().norm() < 1e-12 * al);
        assert!(rel(star.norm_sqr(), al * al / (delta * delta + p.kappa * p.kappa)) < 1e-13);
    }

    #[test]
    fn force_examples() {
        let p = SystemParams::reference().with_power(1.0);
        let empty = single(&p, 0, 0.0, Complex64::new(0.0, 0.0));
        assert_eq!(radiation_force(&empty, &p).unwrap(), 0.0);

        let al = drive_amplitude(&p).unwrap();
        let n = al * al / (p.kappa * p.kappa);
        let s = single(&p, 0, 0.0, Complex64::new(0.0, -n.sqrt()));
        let f = radiation_force(&s, &p).unwrap();
        let g = coupling_strength(&p, 0).unwrap();
        assert!(rel(f, HBAR * g * n) < 1e-12);
        assert!(rel(f, 4.0e-7) < 0.01);
        // circulating power P_c = ħω_l n · (c/2L0), force = 2P_c/c
        let circ = HBAR * p.omega_l() * n * SPEED_OF_LIGHT / (2.0 * p.l0());
        assert!(rel(f, 2.0 * circ / SPEED_OF_LIGHT) < 1e-12);
    }

    #[test]
    fn mirror_equilibrium_and_duffing() {
        let p = SystemParams::reference();
        let s = single(&p, 0, 0.0, Complex64::new(0.0, 0.0));
        assert_eq!(mirror_rhs(&s, &p).unwrap(), (0.0, 0.0));

        let x = 1e-6;
        let lin = single(&p, 0, x, Complex64::new(0.0, 0.0));
        let (_, f_lin) = mirror_rhs(&lin, &p).unwrap();
        assert!(rel(f_lin, -p.mass * p.omega_m * p.omega_m * x) < 1e-15);
        let pd = p.with_duffing(1e12);
        let (_, f_duff) = mirror_rhs(&lin, &pd).unwrap();
        assert!(rel(f_duff / f_lin, 2.0) < 1e-12);
    }

    #[test]
    fn adiabatic_examples() {
        let p = SystemParams::reference().with_power(2.0);
        let al = drive_amplitude(&p).unwrap();
        let on = adiabatic_photon_number(3, resonance_position(&p, 3), 0.0, &p).unwrap();
        assert!(rel(on.value, al * al / (p.kappa * p.kappa)) < 1e-14);
        assert!(on.valid);

        let g = coupling_strength(&p, 3).unwrap();
        let u = 4e-9;
        let lor = adiabatic_photon_number(3, resonance_position(&p, 3) + u, 0.0, &p).unwrap();
        assert!(rel(lor.value, al * al / (g * g * u * u + p.kappa * p.kappa)) < 1e-12);
    }

    #[test]
    fn adiabatic_clamps_out_of_validity() {
        let p = SystemParams::reference().with_power(11.0);
        let g = coupling_strength(&p, 0).unwrap();
        // on the approach side with a fast mirror the bracket goes negative
        let r = adiabatic_photon_number(0, -p.kappa / g, 50.0, &p).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(!r.valid);
    }

    #[test]
    fn scaled_rhs_matches_si() {
        let p = SystemParams::reference().with_power(11.0).with_duffing(3e10);
        let sm = ScaledModel::new(&p).unwrap();
        let u = ScaledUnits::new(&p).unwrap();
        let x = 3.3e-7;
        let a = Complex64::new(2.0e9, -7.0e9);
        let st = FullState {
            mirror: MirrorState { x, p: p.mass * 4.0 },
            modes: ModeSet::new(1..=1, vec![a]).unwrap(),
            time: 0.0,
        };
        let si = mode_rhs(&st, 1, &p).unwrap();
        let xs = u.length_to_scaled(x);
        let sc = sm.mode_rhs(sm.detuning(1, xs), a / u.amplitude_scale);
        let back = sc * u.amplitude_scale / u.time_scale;
        assert!((back - si).norm() < 1e-9 * si.norm());

        let (_, dp) = mirror_rhs(&st, &p).unwrap();
        let vs = u.velocity_to_scaled(4.0);
        let fs = sm.restoring(xs) - sm.gamma * vs
            + sm.force_scale * (sm.n + 1.0) / ((sm.n + xs) * (sm.n + xs)) * (a / u.amplitude_scale).norm_sqr();
        let dp_back = fs * p.mass * p.omega_m * p.omega_m * p.half_wavelength();
        assert!(rel(dp_back, dp) < 1e-10);
    }

    proptest::proptest! {
        #[test]
        fn force_is_nonnegative_and_phase_invariant(
            x in -3e-6f64..3e-6,
            re in proptest::collection::vec(-1e10f64..1e10, 5),
            im in proptest::collection::vec(-1e10f64..1e10, 5),
            phase in 0.0f64..6.3,
        ) {
            let p = SystemParams::reference().with_power(5.0);
            let amps: Vec<_> = re.iter().zip(&im).map(|(r, i)| Complex64::new(*r, *i)).collect();
            let rot: Vec<_> = amps.iter().map(|a| a * Complex64::from_polar(1.0, phase)).collect();
            let s = FullState { mirror: MirrorState { x, p: 0.0 }, modes: ModeSet::new(-2..=2, amps).unwrap(), time: 0.0 };
            let r = FullState { modes: ModeSet::new(-2..=2, rot).unwrap(), ..s.clone() };
            let f = radiation_force(&s, &p).unwrap();
            proptest::prop_assert!(f >= 0.0);
            proptest::prop_assert!(rel(radiation_force(&r, &p).unwrap(), f) < 1e-12 || f == 0.0);
        }
    }
}
