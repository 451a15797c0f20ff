//! Fixed-step fourth-order Runge–Kutta integration of the coupled
//! mode/mirror equations, with step refinement around resonances and a
//! running energy audit.
//!
//! Only modes close to resonance are integrated dynamically. A mode becomes
//! active once the mirror is within `refine_halfwidth` of its resonance and
//! is retired once it has relaxed back onto its steady amplitude; every
//! other mode in the window contributes its zeroth-order adiabatic
//! amplitude to the force. The step is `dt_base / refine_factor` while any
//! mode is active (or about to be) and is further capped so that no active
//! mode rotates by more than `max_phase_per_step` radians in one step.
//!
//! The radiation work `∫F·v dt` and the dissipation `∫γ m v² dt` are carried
//! as extra RK4 components, so the ledger is integrated to the same order as
//! the state itself.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{FullState, MirrorState, ModeSet, ScaledModel};
use crate::error::{Error, Result};
use crate::model::{active_window, coupling_strength, SystemParams};

/// Integration settings. Times are in units of `1/ω_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt_base: f64,
    pub refine_factor: u32,
    /// Distance from a resonance [m] inside which the mode is integrated
    /// dynamically and the refined step is used.
    pub refine_halfwidth: f64,
    pub t_end: f64,
    pub sample_stride: usize,
    /// Cap on `|Δ|·dt` for every actively integrated mode [rad].
    pub max_phase_per_step: f64,
    /// An active mode is retired once `|α - α_ss|` drops below this, in
    /// units of the on-resonance steady amplitude.
    pub retire_tolerance: f64,
    /// Modes kept beyond the turning points, in half-wavelengths.
    pub window_margin: u32,
    pub record_modes: bool,
}

/// Active-zone half-width in units of the resonance width `κ/g`.
pub const DEFAULT_HALFWIDTH_LINEWIDTHS: f64 = 20.0;

impl IntegratorConfig {
    /// Defaults for `params`; the refinement zone is expressed in resonance
    /// linewidths `κ/g_N`.
    pub fn for_params(params: &SystemParams) -> Self {
        let g = coupling_strength(params, 0).unwrap_or(f64::INFINITY);
        Self {
            dt_base: 1e-3,
            refine_factor: 10,
            refine_halfwidth: DEFAULT_HALFWIDTH_LINEWIDTHS * params.kappa / g,
            t_end: TAU,
            sample_stride: 1,
            max_phase_per_step: 0.2,
            retire_tolerance: 1e-4,
            window_margin: 2,
            record_modes: false,
        }
    }

    pub fn with_t_end(mut self, t_end: f64) -> Self {
        self.t_end = t_end;
        self
    }

    pub fn with_periods(self, periods: f64) -> Self {
        self.with_t_end(periods * TAU)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.sample_stride = stride;
        self
    }

    pub fn dt_fine(&self) -> f64 {
        self.dt_base / self.refine_factor as f64
    }

    /// Checks the configuration against `model`, reporting the binding
    /// constraint when a step is too coarse for a rate it has to resolve.
    pub fn validate(&self, model: &ScaledModel) -> Result<()> {
        if !(self.dt_base > 0.0 && self.dt_base.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt_base must be > 0, got {}", self.dt_base)));
        }
        if self.refine_factor < 1 {
            return Err(Error::InvalidConfig("refine_factor must be >= 1".into()));
        }
        if self.sample_stride < 1 {
            return Err(Error::InvalidConfig("sample_stride must be >= 1".into()));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidConfig(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        if !(self.refine_halfwidth > 0.0) || !(self.max_phase_per_step > 0.0) {
            return Err(Error::InvalidConfig(
                "refine_halfwidth and max_phase_per_step must be > 0".into(),
            ));
        }
        if !(self.retire_tolerance > 0.0) {
            return Err(Error::InvalidConfig("retire_tolerance must be > 0".into()));
        }
        // the detuning bound is enforced step by step; the rates that are
        // not must already be resolved by the configured steps
        for (dt, rate, what) in [
            (self.dt_fine(), model.kappa, "cavity decay on the refined step"),
            (self.dt_base, 1.0, "mechanical frequency on the base step"),
        ] {
            if dt * rate > self.max_phase_per_step {
                return Err(Error::StepConstraint {
                    dt,
                    binding: format!(
                        "{what}: {dt:.3e} x {rate:.3e} = {:.3} rad > {} rad",
                        dt * rate,
                        self.max_phase_per_step
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Accumulated energy bookkeeping [J].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub work_radiation: f64,
    pub dissipated: f64,
    pub mech_energy_start: f64,
    pub mech_energy_now: f64,
}

impl EnergyLedger {
    /// `|ΔE_mech - W + D| / max(|W|, D, |ΔE_mech|)`.
    pub fn residual(&self) -> f64 {
        let de = self.mech_energy_now - self.mech_energy_start;
        let scale = self.work_radiation.abs().max(self.dissipated).max(de.abs());
        if scale == 0.0 {
            return 0.0;
        }
        (de - self.work_radiation + self.dissipated).abs() / scale
    }

    /// Ledger change between two snapshots.
    pub fn since(&self, earlier: &EnergyLedger) -> EnergyLedger {
        EnergyLedger {
            work_radiation: self.work_radiation - earlier.work_radiation,
            dissipated: self.dissipated - earlier.dissipated,
            mech_energy_start: earlier.mech_energy_now,
            mech_energy_now: self.mech_energy_now,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TurnKind {
    /// Momentum crosses from negative to positive (leftmost excursion).
    Left,
    /// Momentum crosses from positive to negative (rightmost excursion).
    Right,
}

/// A zero crossing of the momentum, located by linear interpolation of `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurningPoint {
    pub t: f64,
    pub x: f64,
    pub kind: TurnKind,
}

/// One output row of a trajectory, SI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub p: f64,
    pub n_photons: f64,
    pub work: f64,
    pub dissipated: f64,
}

/// Per-mode amplitudes at one sample time, SI.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSample {
    pub t: f64,
    pub modes: ModeSet,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub params: SystemParams,
    pub samples: Vec<Sample>,
    pub turning_points: Vec<TurningPoint>,
    pub ledger: EnergyLedger,
    pub final_state: FullState,
    pub mode_samples: Vec<ModeSample>,
    pub steps: u64,
}

/// Relative ledger residual of a whole trajectory.
pub fn ledger_residual(traj: &Trajectory) -> f64 {
    traj.ledger.residual()
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn new(v: f64) -> Self {
        Self { sum: v, comp: 0.0 }
    }

    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Time derivatives of the scaled system for a fixed set of active modes.
struct Rhs<'a> {
    model: &'a ScaledModel,
    active: &'a [i64],
    slaved: &'a [i64],
}

impl Rhs<'_> {
    /// Fills `da` for the active amplitudes and returns `(ẋ, v̇, Ẇ, Ḋ)`.
    #[inline]
    fn eval(&self, x: f64, v: f64, amps: &[Complex64], da: &mut [Complex64]) -> [f64; 4] {
        let m = self.model;
        let inv = 1.0 / (m.n + x);
        let ds = m.detuning_scale * inv;
        let mut weighted = 0.0;
        for ((k, a), d) in self.active.iter().zip(amps).zip(da.iter_mut()) {
            let delta = ds * (*k as f64 - x);
            *d = m.mode_rhs(delta, *a);
            weighted += (m.n + *k as f64) * a.norm_sqr();
        }
        let drive2 = m.drive * m.drive;
        let kappa2 = m.kappa * m.kappa;
        for k in self.slaved {
            let delta = ds * (*k as f64 - x);
            weighted += (m.n + *k as f64) * drive2 / (delta * delta + kappa2);
        }
        let force = m.force_scale * inv * inv * weighted;
        [v, m.restoring(x) - m.gamma * v + force, force * v, m.gamma * v * v]
    }
}

/// Reusable RK4 stage buffers.
#[derive(Debug, Default)]
struct Stages {
    k: [Vec<Complex64>; 4],
    tmp: Vec<Complex64>,
}

impl Stages {
    fn resize(&mut self, n: usize) {
        for k in &mut self.k {
            k.resize(n, Complex64::new(0.0, 0.0));
        }
        self.tmp.resize(n, Complex64::new(0.0, 0.0));
    }
}

/// One classic RK4 step of `(x, v, W, D, α_active)`; returns the increments
/// of `W` and `D`.
fn rk4_kernel(
    rhs: &Rhs<'_>,
    stages: &mut Stages,
    x: &mut f64,
    v: &mut f64,
    amps: &mut [Complex64],
    dt: f64,
) -> (f64, f64) {
    let n = amps.len();
    stages.resize(n);
    let Stages { k, tmp } = stages;
    let [k1, k2, k3, k4] = k;
    let (x0, v0) = (*x, *v);

    let s1 = rhs.eval(x0, v0, amps, k1);
    for i in 0..n {
        tmp[i] = amps[i] + k1[i] * (0.5 * dt);
    }
    let s2 = rhs.eval(x0 + 0.5 * dt * s1[0], v0 + 0.5 * dt * s1[1], tmp, k2);
    for i in 0..n {
        tmp[i] = amps[i] + k2[i] * (0.5 * dt);
    }
    let s3 = rhs.eval(x0 + 0.5 * dt * s2[0], v0 + 0.5 * dt * s2[1], tmp, k3);
    for i in 0..n {
        tmp[i] = amps[i] + k3[i] * dt;
    }
    let s4 = rhs.eval(x0 + dt * s3[0], v0 + dt * s3[1], tmp, k4);

    let w = dt / 6.0;
    let comb = |j: usize| w * (s1[j] + 2.0 * s2[j] + 2.0 * s3[j] + s4[j]);
    *x = x0 + comb(0);
    *v = v0 + comb(1);
    for i in 0..n {
        amps[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * w;
    }
    (comb(2), comb(3))
}

/// One classic RK4 step of the full state with every mode of the window
/// integrated dynamically (no slaving, no refinement).
pub fn rk4_step(state: &FullState, dt: f64, params: &SystemParams) -> Result<FullState> {
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("dt must be > 0, got {dt}")));
    }
    let model = ScaledModel::new(params)?;
    let u = model.units;
    let window: Vec<i64> = state.modes.window().collect();
    check_window(&model, &window)?;
    let mut x = u.length_to_scaled(state.mirror.x);
    let mut v = u.velocity_to_scaled(state.mirror.p / params.mass);
    let mut amps: Vec<Complex64> = state
        .modes
        .amplitudes()
        .iter()
        .map(|a| a / u.amplitude_scale)
        .collect();
    let rhs = Rhs {
        model: &model,
        active: &window,
        slaved: &[],
    };
    let mut stages = Stages::default();
    rk4_kernel(&rhs, &mut stages, &mut x, &mut v, &mut amps, u.time_to_scaled(dt));
    let next = FullState {
        mirror: MirrorState {
            x: u.length_to_si(x),
            p: params.mass * u.velocity_to_si(v),
        },
        modes: ModeSet::new(
            state.modes.window(),
            amps.iter().map(|a| a * u.amplitude_scale).collect(),
        )?,
        time: state.time + dt,
    };
    if !(x.is_finite() && v.is_finite() && amps.iter().all(|a| a.re.is_finite() && a.im.is_finite())) {
        return Err(Error::Blowup {
            t: next.time,
            what: "non-finite state after RK4 step".into(),
            last_good: Box::new(state.clone()),
        });
    }
    if x <= -model.n {
        return Err(Error::Geometry {
            x: next.mirror.x,
            l0: params.l0(),
        });
    }
    Ok(next)
}

/// Integrates a single mode for a mirror held fixed at `x`, starting from
/// `alpha0`, with `steps` RK4 steps of `dt` seconds. Returns the SI amplitude.
pub fn relax_static_mode(
    params: &SystemParams,
    k: i64,
    x: f64,
    alpha0: Complex64,
    dt: f64,
    steps: usize,
) -> Result<Complex64> {
    let model = ScaledModel::new(params)?;
    let u = model.units;
    let xs = u.length_to_scaled(x);
    if xs <= -model.n {
        return Err(Error::Geometry { x, l0: params.l0() });
    }
    let delta = model.detuning(k, xs);
    let h = u.time_to_scaled(dt);
    let f = |a: Complex64| model.mode_rhs(delta, a);
    let mut a = alpha0 / u.amplitude_scale;
    for _ in 0..steps {
        let k1 = f(a);
        let k2 = f(a + k1 * (0.5 * h));
        let k3 = f(a + k2 * (0.5 * h));
        let k4 = f(a + k3 * h);
        a += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
    }
    Ok(a * u.amplitude_scale)
}

fn check_window(model: &ScaledModel, ks: &[i64]) -> Result<()> {
    if let Some(&k) = ks.first() {
        if model.n_order + k <= 0 {
            return Err(Error::InvalidModeOrder {
                order: model.n_order + k,
            });
        }
    }
    Ok(())
}

/// Stateful integration engine in scaled units.
///
/// `advance_to` can be called repeatedly; turning points are always
/// recorded, samples only while sampling is enabled.
pub struct Integrator {
    params: SystemParams,
    model: ScaledModel,
    cfg: IntegratorConfig,
    radius: f64,
    t: f64,
    x: f64,
    v: f64,
    work: CompensatedSum,
    dissipated: CompensatedSum,
    energy_start: f64,
    k_lo: i64,
    amps: Vec<Complex64>,
    is_active: Vec<bool>,
    active_ks: Vec<i64>,
    active_idx: Vec<usize>,
    active_amps: Vec<Complex64>,
    slaved_ks: Vec<i64>,
    stages: Stages,
    period_start: f64,
    period_xmin: f64,
    period_xmax: f64,
    turning: Vec<TurningPoint>,
    sampling: Option<usize>,
    samples: Vec<Sample>,
    mode_samples: Vec<ModeSample>,
    steps: u64,
}

impl Integrator {
    /// Starts from `initial`. Modes that begin inside an active zone take
    /// their amplitude from `initial` when present; all others start on
    /// their adiabatic value.
    pub fn new(params: &SystemParams, initial: &FullState, cfg: &IntegratorConfig) -> Result<Self> {
        let model = ScaledModel::new(params)?;
        cfg.validate(&model)?;
        let u = model.units;
        let x = u.length_to_scaled(initial.mirror.x);
        let v = u.velocity_to_scaled(initial.mirror.p / params.mass);
        if !(x.is_finite() && v.is_finite()) {
            return Err(Error::InvalidInput("initial mirror state is not finite".into()));
        }
        if x <= -model.n {
            return Err(Error::Geometry {
                x: initial.mirror.x,
                l0: params.l0(),
            });
        }
        // first window: the energy-equivalent amplitude bounds the motion
        let reach = (2.0 * model.energy(x, v)).sqrt().max(x.abs());
        let window = active_window(
            params,
            u.length_to_si(-reach),
            u.length_to_si(reach),
            cfg.window_margin,
        );
        let mut eng = Self {
            params: *params,
            model,
            cfg: *cfg,
            radius: u.length_to_scaled(cfg.refine_halfwidth),
            t: u.time_to_scaled(initial.time),
            x,
            v,
            work: CompensatedSum::new(0.0),
            dissipated: CompensatedSum::new(0.0),
            energy_start: model.energy(x, v),
            k_lo: *window.start(),
            amps: Vec::new(),
            is_active: Vec::new(),
            active_ks: Vec::new(),
            active_idx: Vec::new(),
            active_amps: Vec::new(),
            slaved_ks: Vec::new(),
            stages: Stages::default(),
            period_start: 0.0,
            period_xmin: x,
            period_xmax: x,
            turning: Vec::new(),
            sampling: None,
            samples: Vec::new(),
            mode_samples: Vec::new(),
            steps: 0,
        };
        eng.period_start = eng.t;
        eng.relayout(*window.start(), *window.end())?;
        // seed active modes from the supplied amplitudes
        let lo = (eng.x - eng.radius).ceil() as i64;
        let hi = (eng.x + eng.radius).floor() as i64;
        for k in lo..=hi {
            if let Some(j) = eng.index(k) {
                eng.is_active[j] = true;
                if let Some(a) = initial.modes.get(k) {
                    eng.amps[j] = a / u.amplitude_scale;
                }
            }
        }
        eng.rebuild_lists();
        Ok(eng)
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn model(&self) -> &ScaledModel {
        &self.model
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    /// Current time in scaled units.
    pub fn scaled_time(&self) -> f64 {
        self.t
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Enables sampling every `stride` steps (`None` disables it).
    pub fn set_sampling(&mut self, stride: Option<usize>) {
        self.sampling = stride.map(|s| s.max(1));
        if self.sampling.is_some() && self.samples.is_empty() {
            let s = self.sample();
            self.samples.push(s);
            if self.cfg.record_modes {
                let m = self.mode_sample();
                self.mode_samples.push(m);
            }
        }
    }

    pub fn take_samples(&mut self) -> Vec<Sample> {
        std::mem::take(&mut self.samples)
    }

    pub fn take_mode_samples(&mut self) -> Vec<ModeSample> {
        std::mem::take(&mut self.mode_samples)
    }

    pub fn turning_points(&self) -> &[TurningPoint] {
        &self.turning
    }

    pub fn ledger(&self) -> EnergyLedger {
        let e = self.model.energy_unit;
        EnergyLedger {
            work_radiation: self.work.value() * e,
            dissipated: self.dissipated.value() * e,
            mech_energy_start: self.energy_start * e,
            mech_energy_now: self.model.energy(self.x, self.v) * e,
        }
    }

    pub fn mirror(&self) -> MirrorState {
        let u = self.model.units;
        MirrorState {
            x: u.length_to_si(self.x),
            p: self.params.mass * u.velocity_to_si(self.v),
        }
    }

    /// Full SI state; slaved modes report their adiabatic amplitude.
    pub fn state(&self) -> FullState {
        FullState {
            mirror: self.mirror(),
            modes: self.mode_set(),
            time: self.model.units.time_to_si(self.t),
        }
    }

    fn mode_set(&self) -> ModeSet {
        let s = self.model.units.amplitude_scale;
        let amps = (0..self.amps.len())
            .map(|j| self.current_amp(j) * s)
            .collect();
        ModeSet::new(self.k_lo..=self.k_lo + self.amps.len() as i64 - 1, amps)
            .expect("window and amplitudes are laid out together")
    }

    fn current_amp(&self, j: usize) -> Complex64 {
        if self.is_active[j] {
            self.amps[j]
        } else {
            self.model.steady(self.k_lo + j as i64, self.x)
        }
    }

    fn index(&self, k: i64) -> Option<usize> {
        let j = k - self.k_lo;
        (j >= 0 && (j as usize) < self.amps.len()).then_some(j as usize)
    }

    /// Re-lays the window to `[lo, hi]` (always keeping active modes).
    fn relayout(&mut self, mut lo: i64, mut hi: i64) -> Result<()> {
        for (j, &a) in self.is_active.iter().enumerate() {
            if a {
                let k = self.k_lo + j as i64;
                lo = lo.min(k);
                hi = hi.max(k);
            }
        }
        if self.model.n_order + lo <= 0 {
            return Err(Error::InvalidModeOrder {
                order: self.model.n_order + lo,
            });
        }
        let len = (hi - lo + 1) as usize;
        let mut amps = vec![Complex64::new(0.0, 0.0); len];
        let mut act = vec![false; len];
        for (j, slot) in amps.iter_mut().enumerate() {
            let k = lo + j as i64;
            match self.index(k) {
                Some(old) if self.is_active[old] => {
                    *slot = self.amps[old];
                    act[j] = true;
                }
                _ => *slot = self.model.steady(k, self.x),
            }
        }
        self.k_lo = lo;
        self.amps = amps;
        self.is_active = act;
        self.rebuild_lists();
        Ok(())
    }

    fn rebuild_lists(&mut self) {
        self.active_ks.clear();
        self.active_idx.clear();
        self.slaved_ks.clear();
        for (j, &a) in self.is_active.iter().enumerate() {
            let k = self.k_lo + j as i64;
            if a {
                self.active_ks.push(k);
                self.active_idx.push(j);
            } else {
                self.slaved_ks.push(k);
            }
        }
    }

    /// Activates modes entering their zone and retires relaxed ones.
    fn update_active(&mut self) -> Result<()> {
        let x = self.x;
        let r = self.radius;
        // keep the mirror well inside the window
        let hi = self.k_lo + self.amps.len() as i64 - 1;
        if x - r < (self.k_lo + 1) as f64 || x + r > (hi - 1) as f64 {
            let m = self.cfg.window_margin.max(1) as i64;
            let lo = self.k_lo.min((x - r).floor() as i64 - m);
            let hi = hi.max((x + r).ceil() as i64 + m);
            self.relayout(lo, hi)?;
        }
        let mut changed = false;
        let lo = (x - r).ceil() as i64;
        let hi = (x + r).floor() as i64;
        for k in lo..=hi {
            if let Some(j) = self.index(k) {
                if !self.is_active[j] {
                    self.is_active[j] = true;
                    self.amps[j] = self.model.steady(k, x);
                    changed = true;
                }
            }
        }
        for idx in 0..self.active_idx.len() {
            let j = self.active_idx[idx];
            let k = self.k_lo + j as i64;
            if (x - k as f64).abs() >= r {
                let steady = self.model.steady(k, x);
                if (self.amps[j] - steady).norm() <= self.cfg.retire_tolerance {
                    self.is_active[j] = false;
                    self.amps[j] = steady;
                    changed = true;
                }
            }
        }
        if changed {
            self.rebuild_lists();
        }
        Ok(())
    }

    fn step_size(&self) -> f64 {
        let nearest = (self.x - self.x.round()).abs();
        let near = !self.active_ks.is_empty()
            || nearest < self.radius + self.v.abs() * self.cfg.dt_base;
        if !near {
            return self.cfg.dt_base;
        }
        let mut dt = self.cfg.dt_fine();
        let max_det = self
            .active_ks
            .iter()
            .map(|&k| self.model.detuning(k, self.x).abs())
            .fold(0.0, f64::max);
        if max_det > 0.0 {
            dt = dt.min(self.cfg.max_phase_per_step / max_det);
        }
        dt
    }

    /// One step, clipped so as not to pass `t_limit` (scaled).
    fn step(&mut self, t_limit: f64) -> Result<()> {
        self.update_active()?;
        let dt = self.step_size().min(t_limit - self.t);
        if !(dt > 0.0) {
            return Ok(());
        }
        let (x0, v0) = (self.x, self.v);
        let good = self.state_snapshot();

        self.active_amps.clear();
        self.active_amps.extend(self.active_idx.iter().map(|&j| self.amps[j]));
        let rhs = Rhs {
            model: &self.model,
            active: &self.active_ks,
            slaved: &self.slaved_ks,
        };
        let (dw, dd) = rk4_kernel(
            &rhs,
            &mut self.stages,
            &mut self.x,
            &mut self.v,
            &mut self.active_amps,
            dt,
        );
        for (&j, a) in self.active_idx.iter().zip(&self.active_amps) {
            self.amps[j] = *a;
        }
        self.work.add(dw);
        self.dissipated.add(dd);
        self.t += dt;
        self.steps += 1;

        let finite = self.x.is_finite()
            && self.v.is_finite()
            && self.active_amps.iter().all(|a| a.re.is_finite() && a.im.is_finite());
        if !finite {
            return Err(Error::Blowup {
                t: self.model.units.time_to_si(self.t),
                what: "non-finite state after RK4 step".into(),
                last_good: Box::new(good),
            });
        }
        if self.x <= -self.model.n {
            return Err(Error::Geometry {
                x: self.model.units.length_to_si(self.x),
                l0: self.params.l0(),
            });
        }
        // beyond the hilltop of a softening spring every force points outward
        if self.model.duffing < 0.0 {
            let top = (-1.0 / self.model.duffing).sqrt();
            if self.x.abs() > top && self.x * self.v > 0.0 {
                let u = self.model.units;
                return Err(Error::Escaped {
                    x: u.length_to_si(self.x),
                    barrier: u.length_to_si(top),
                });
            }
        }

        self.detect_turn(x0, v0, dt);
        self.period_xmin = self.period_xmin.min(self.x);
        self.period_xmax = self.period_xmax.max(self.x);
        if self.t - self.period_start >= TAU {
            self.end_period()?;
        }
        if let Some(stride) = self.sampling {
            if self.steps % stride as u64 == 0 {
                let s = self.sample();
                self.samples.push(s);
                if self.cfg.record_modes {
                    let m = self.mode_sample();
                    self.mode_samples.push(m);
                }
            }
        }
        Ok(())
    }

    fn state_snapshot(&self) -> FullState {
        self.state()
    }

    fn detect_turn(&mut self, x0: f64, v0: f64, dt: f64) {
        let (x1, v1) = (self.x, self.v);
        let kind = if v0 > 0.0 && v1 <= 0.0 {
            TurnKind::Right
        } else if v0 < 0.0 && v1 >= 0.0 {
            TurnKind::Left
        } else {
            return;
        };
        let s = v0 / (v0 - v1);
        // cubic Hermite position at the interpolated crossing
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        let x = h00 * x0 + h10 * dt * v0 + h01 * x1 + h11 * dt * v1;
        let u = self.model.units;
        self.turning.push(TurningPoint {
            t: u.time_to_si(self.t - dt + s * dt),
            x: u.length_to_si(x),
            kind,
        });
    }

    fn end_period(&mut self) -> Result<()> {
        let lo = self.period_xmin.ceil() as i64 - self.cfg.window_margin as i64;
        let hi = self.period_xmax.floor() as i64 + self.cfg.window_margin as i64;
        let cur_hi = self.k_lo + self.amps.len() as i64 - 1;
        if lo != self.k_lo || hi != cur_hi {
            self.relayout(lo, hi)?;
        }
        self.period_start = self.t;
        self.period_xmin = self.x;
        self.period_xmax = self.x;
        Ok(())
    }

    fn photon_number_scaled(&self) -> f64 {
        (0..self.amps.len()).map(|j| self.current_amp(j).norm_sqr()).sum()
    }

    /// The current state as an output row.
    pub fn current_sample(&self) -> Sample {
        self.sample()
    }

    fn sample(&self) -> Sample {
        let u = self.model.units;
        let e = self.model.energy_unit;
        Sample {
            t: u.time_to_si(self.t),
            x: u.length_to_si(self.x),
            p: self.params.mass * u.velocity_to_si(self.v),
            n_photons: self.photon_number_scaled() * u.amplitude_scale * u.amplitude_scale,
            work: self.work.value() * e,
            dissipated: self.dissipated.value() * e,
        }
    }

    fn mode_sample(&self) -> ModeSample {
        ModeSample {
            t: self.model.units.time_to_si(self.t),
            modes: self.mode_set(),
        }
    }

    /// Advances to scaled time `t_target`.
    pub fn advance_to(&mut self, t_target: f64) -> Result<()> {
        while self.t < t_target {
            self.step(t_target)?;
        }
        Ok(())
    }

    /// Advances by `periods` mechanical periods `2π/ω_m`.
    pub fn advance_periods(&mut self, periods: f64) -> Result<()> {
        self.advance_to(self.t + periods * TAU)
    }

    pub fn into_trajectory(mut self) -> Trajectory {
        let final_state = self.state();
        if self.sampling.is_some() {
            let last = self.sample();
            if self.samples.last().map(|s| s.t) != Some(last.t) {
                self.samples.push(last);
            }
        }
        Trajectory {
            params: self.params,
            ledger: self.ledger(),
            samples: std::mem::take(&mut self.samples),
            turning_points: std::mem::take(&mut self.turning),
            mode_samples: std::mem::take(&mut self.mode_samples),
            final_state,
            steps: self.steps,
        }
    }
}

/// Integrates from `initial` to `cfg.t_end`, sampling every
/// `cfg.sample_stride` steps.
pub fn integrate(initial: &FullState, cfg: &IntegratorConfig, params: &SystemParams) -> Result<Trajectory> {
    let mut eng = Integrator::new(params, initial, cfg)?;
    eng.set_sampling(Some(cfg.sample_stride));
    let t_end = eng.scaled_time() + cfg.t_end;
    eng.advance_to(t_end)?;
    Ok(eng.into_trajectory())
}

/// Initial state with the mirror at `(x, p)` and modes on their adiabatic
/// values over the window spanned by the mirror's energy-equivalent
/// amplitude.
pub fn initial_state(params: &SystemParams, x: f64, p: f64) -> Result<FullState> {
    let amp = (x * x + (p / (params.mass * params.omega_m)).powi(2)).sqrt();
    let window = active_window(params, -amp, amp, 2);
    FullState::adiabatic(params, MirrorState { x, p }, window)
}
