//! Reduced model of the motion: exact damped-harmonic arcs between the
//! resonance positions, joined by instantaneous velocity kicks whose size
//! follows from the quasi-static photon number with its first-order
//! velocity correction.
//!
//! The return map is parametrized by the right turning amplitude: starting
//! from `(A_max, 0)` the mirror runs backward to its left turning point and
//! forward again, and `r(A_max) = A_max_out - A_max` vanishes on closed
//! cycles. A backward kick whose speed cannot pay for the barrier reflects
//! the mirror elastically at `x_k`, so such a cycle has `A_min = -x_k`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cycle::{average_amplitude, Direction};
use crate::dynamics::{FullState, MirrorState, ModeSet, ScaledModel};
use crate::error::{Error, Result};
use crate::model::{coupling_strength, drive_amplitude, resonance_position, SystemParams, HBAR};

/// Events allowed in one half cycle before the map is declared runaway.
pub const MAX_EVENTS: usize = 10_000;
/// A kick is flagged once the velocity correction exceeds this fraction of
/// the leading term.
pub const VALIDITY_RATIO: f64 = 0.5;

/// Mirror position [m], velocity [m/s] and time [s] along an arc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcState {
    pub x: f64,
    pub v: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ArcEvent {
    /// The arc reaches `x_k` with the given state.
    Resonance { k: i64, state: ArcState },
    Turning { state: ArcState },
}

impl ArcEvent {
    pub fn state(&self) -> ArcState {
        match self {
            ArcEvent::Resonance { state, .. } | ArcEvent::Turning { state } => *state,
        }
    }
}

/// Closed-form solution of `ẍ = -ω²x - γẋ` from one initial state.
#[derive(Debug, Clone, Copy)]
struct Arc {
    a: f64,
    b: f64,
    va: f64,
    vb: f64,
    half_gamma: f64,
    wd: f64,
}

impl Arc {
    fn new(x0: f64, v0: f64, params: &SystemParams) -> Result<Self> {
        let half_gamma = 0.5 * params.gamma;
        let wd2 = params.omega_m * params.omega_m - half_gamma * half_gamma;
        if !(wd2 > 0.0) {
            return Err(Error::param("gamma", "the arc model needs an underdamped oscillator (γ < 2ω_m)"));
        }
        let wd = wd2.sqrt();
        let b = (v0 + half_gamma * x0) / wd;
        Ok(Self {
            a: x0,
            b,
            va: v0,
            vb: -half_gamma * b - wd * x0,
            half_gamma,
            wd,
        })
    }

    fn at(&self, t: f64) -> (f64, f64) {
        let e = (-self.half_gamma * t).exp();
        let (s, c) = (self.wd * t).sin_cos();
        (e * (self.a * c + self.b * s), e * (self.va * c + self.vb * s))
    }

    /// First `t > 0` with `v = 0`.
    fn turning_time(&self) -> f64 {
        // v ∝ cos(θ - φ) with tan φ = vb/va
        let phi = self.vb.atan2(self.va);
        let mut theta = (phi + 0.5 * PI).rem_euclid(PI);
        if theta <= 1e-12 {
            theta += PI;
        }
        theta / self.wd
    }
}

/// Offset of the first resonance strictly ahead of `x` in direction `dir`.
fn next_resonance(x: f64, dir: f64, params: &SystemParams) -> i64 {
    let s = x / params.half_wavelength();
    let tol = 1e-9;
    if dir > 0.0 {
        (s + tol).floor() as i64 + 1
    } else {
        (s - tol).ceil() as i64 - 1
    }
}

/// Propagates the arc from `start` to the first resonance crossing or the
/// turning point, whichever comes first.
///
/// A start with zero velocity moves in the direction of the spring force.
pub fn damped_arc(start: ArcState, params: &SystemParams) -> Result<ArcEvent> {
    if !(start.x.is_finite() && start.v.is_finite() && start.t.is_finite()) {
        return Err(Error::InvalidInput("arc start must be finite".into()));
    }
    let arc = Arc::new(start.x, start.v, params)?;
    let dir = if start.v != 0.0 { start.v.signum() } else { -start.x.signum() };
    if dir == 0.0 {
        // at rest in the equilibrium: nothing ever happens
        return Ok(ArcEvent::Turning { state: start });
    }
    let t_turn = arc.turning_time();
    let (x_turn, _) = arc.at(t_turn);
    let k = next_resonance(start.x, dir, params);
    let xk = resonance_position(params, k);
    let reaches = if dir > 0.0 { x_turn >= xk } else { x_turn <= xk };
    if !reaches {
        return Ok(ArcEvent::Turning {
            state: ArcState {
                x: x_turn,
                v: 0.0,
                t: start.t + t_turn,
            },
        });
    }
    let t = crossing_time(&arc, xk, t_turn)?;
    let (_, v) = arc.at(t);
    Ok(ArcEvent::Resonance {
        k,
        state: ArcState {
            x: xk,
            v,
            t: start.t + t,
        },
    })
}

/// Safeguarded Newton on `x(t) = target` over `[0, t_hi]`, where `x` is
/// monotone.
fn crossing_time(arc: &Arc, target: f64, t_hi: f64) -> Result<f64> {
    let f = |t: f64| {
        let (x, v) = arc.at(t);
        (x - target, v)
    };
    let (mut lo, mut hi) = (0.0, t_hi);
    let (f_lo, _) = f(lo);
    let rising = f_lo < 0.0;
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (ft, vt) = f(t);
        if ft == 0.0 {
            return Ok(t);
        }
        if (ft < 0.0) == rising {
            lo = t;
        } else {
            hi = t;
        }
        let step = if vt != 0.0 { ft / vt } else { f64::INFINITY };
        if step.abs() <= 2.0 * f64::EPSILON * t || hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(t);
        }
        let newton = t - step;
        t = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Err(Error::NoConvergence(format!("arc crossing of x = {target:e} m")))
}

/// Prefactors of the kick work: `W = ±lead + second/|v|`, with the sign
/// structure of the forward and backward passages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KickCoefficients {
    /// `ħα_L²π/κ` [J].
    pub lead: f64,
    /// `3ħ²α_L⁴g_{N+k}π/(8mκ⁴)` [J·m/s].
    pub second: f64,
}

pub fn kick_coefficients(k: i64, params: &SystemParams) -> Result<KickCoefficients> {
    let al2 = drive_amplitude(params)?.powi(2);
    let g = coupling_strength(params, k)?;
    let kappa = params.kappa;
    Ok(KickCoefficients {
        lead: HBAR * al2 * PI / kappa,
        second: 3.0 * HBAR * HBAR * al2 * al2 * g * PI / (8.0 * params.mass * kappa.powi(4)),
    })
}

/// Radiation work of one passage through `x_k`.
///
/// Forward (`v_approach > 0`): `W⁺ = ħα_L²π/κ + 3ħ²α_L⁴gπ/(8mκ⁴v⁻)`.
/// Backward (`v_approach < 0`): `W⁻ = -ħα_L²π/κ - 3ħ²α_L⁴gπ/(8mκ⁴v⁺)`.
pub fn kick_work(k: i64, v_approach: f64, direction: Direction, params: &SystemParams) -> Result<f64> {
    if v_approach == 0.0 {
        return Err(Error::Singular("kick work diverges at zero approach velocity".into()));
    }
    match direction {
        Direction::Forward if v_approach < 0.0 => {
            return Err(Error::Contract("forward kick needs v > 0".into()))
        }
        Direction::Backward if v_approach > 0.0 => {
            return Err(Error::Contract("backward kick needs v < 0".into()))
        }
        _ => {}
    }
    let c = kick_coefficients(k, params)?;
    Ok(match direction {
        Direction::Forward => c.lead + c.second / v_approach,
        Direction::Backward => -c.lead - c.second / v_approach,
    })
}

/// One executed kick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kick {
    pub k: i64,
    pub direction: Direction,
    pub v_in: f64,
    pub v_out: f64,
    pub work: f64,
    /// The velocity correction exceeds [`VALIDITY_RATIO`] of the leading term.
    pub flagged: bool,
}

fn flagged(c: &KickCoefficients, v: f64) -> bool {
    c.second / v.abs() > VALIDITY_RATIO * c.lead
}

/// Velocity after a forward passage through `x_k`.
pub fn forward_kick(k: i64, v_minus: f64, params: &SystemParams) -> Result<Kick> {
    if !(v_minus > 0.0) {
        return Err(Error::Contract(format!("forward kick needs v > 0, got {v_minus}")));
    }
    let c = kick_coefficients(k, params)?;
    let work = c.lead + c.second / v_minus;
    let v_out = (v_minus * v_minus + 2.0 * work / params.mass).sqrt();
    Ok(Kick {
        k,
        direction: Direction::Forward,
        v_in: v_minus,
        v_out,
        work,
        flagged: flagged(&c, v_minus),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BackwardOutcome {
    Passed(Kick),
    /// The mirror cannot climb the radiation barrier and turns back.
    Blocked { k: i64, v_in: f64, flagged: bool },
}

/// Velocity after a backward passage through `x_k`, or `Blocked`.
pub fn backward_kick(k: i64, v_plus: f64, params: &SystemParams) -> Result<BackwardOutcome> {
    if !(v_plus < 0.0) {
        return Err(Error::Contract(format!("backward kick needs v < 0, got {v_plus}")));
    }
    let c = kick_coefficients(k, params)?;
    let work = -c.lead - c.second / v_plus;
    let radicand = v_plus * v_plus + 2.0 * work / params.mass;
    let flag = flagged(&c, v_plus);
    if radicand <= 0.0 {
        return Ok(BackwardOutcome::Blocked {
            k,
            v_in: v_plus,
            flagged: flag,
        });
    }
    Ok(BackwardOutcome::Passed(Kick {
        k,
        direction: Direction::Backward,
        v_in: v_plus,
        v_out: -radicand.sqrt(),
        work,
        flagged: flag,
    }))
}

fn harmonic_energy(params: &SystemParams, x: f64, v: f64) -> f64 {
    0.5 * params.mass * (v * v + params.omega_m * params.omega_m * x * x)
}

/// Record of one half cycle of the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfCycle {
    /// Signed distance of the final turning point from `x = 0`, positive in
    /// the direction of travel.
    pub a_end: f64,
    pub end: ArcState,
    pub kicks: Vec<Kick>,
    /// Mechanical energy lost to damping along the arcs [J].
    pub arc_loss: f64,
    /// Set when the half cycle ended on a blocked crossing.
    pub blocked_at: Option<i64>,
}

/// Runs arcs and kicks from `start` until the velocity vanishes (or a
/// backward crossing is blocked, which reflects the mirror).
fn run_half(start: ArcState, params: &SystemParams) -> Result<HalfCycle> {
    let mut state = start;
    let mut kicks = Vec::new();
    let mut arc_loss = 0.0;
    for _ in 0..MAX_EVENTS {
        let ev = damped_arc(state, params)?;
        let end = ev.state();
        arc_loss += harmonic_energy(params, state.x, state.v) - harmonic_energy(params, end.x, end.v);
        match ev {
            ArcEvent::Turning { state: end } => {
                let sign = if start.v != 0.0 { start.v.signum() } else { -start.x.signum() };
                return Ok(HalfCycle {
                    a_end: sign * end.x,
                    end,
                    kicks,
                    arc_loss,
                    blocked_at: None,
                });
            }
            ArcEvent::Resonance { k, state: at } => {
                if at.v > 0.0 {
                    let kick = forward_kick(k, at.v, params)?;
                    kicks.push(kick);
                    state = ArcState { v: kick.v_out, ..at };
                } else {
                    match backward_kick(k, at.v, params)? {
                        BackwardOutcome::Passed(kick) => {
                            kicks.push(kick);
                            state = ArcState { v: kick.v_out, ..at };
                        }
                        BackwardOutcome::Blocked { .. } => {
                            return Ok(HalfCycle {
                                a_end: -at.x,
                                end: ArcState { v: -at.v, ..at },
                                kicks,
                                arc_loss,
                                blocked_at: Some(k),
                            });
                        }
                    }
                }
            }
        }
    }
    Err(Error::Runaway { events: MAX_EVENTS })
}

/// Half cycle from the turning point `(∓a_start, 0)`.
///
/// `Forward` starts at `-a_start` and returns `a_end = A_max`; `Backward`
/// starts at `+a_start` and returns `a_end = A_min` (the left extent, which
/// for a blocked crossing is `-x_k`). A blocked backward half cycle leaves
/// the mirror at `x_k` moving forward with the reflected speed.
pub fn half_cycle_map(a_start: f64, direction: Direction, params: &SystemParams) -> Result<HalfCycle> {
    if !(a_start > 0.0) {
        return Err(Error::Contract(format!("a_start must be > 0, got {a_start}")));
    }
    let x0 = match direction {
        Direction::Forward => -a_start,
        Direction::Backward => a_start,
    };
    run_half(ArcState { x: x0, v: 0.0, t: 0.0 }, params)
}

/// One evaluation of the return map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleCandidate {
    pub a_max_in: f64,
    pub a_min: f64,
    pub a_max_out: f64,
    /// `a_max_out - a_max_in`.
    pub residual: f64,
    pub kicks: Vec<Kick>,
    pub arc_loss: f64,
    pub blocked_at: Option<i64>,
}

impl CycleCandidate {
    pub fn any_flagged(&self) -> bool {
        self.kicks.iter().any(|k| k.flagged)
    }
}

/// Backward half from `(a_max, 0)` followed by the forward half.
pub fn cycle_candidate(a_max: f64, params: &SystemParams) -> Result<CycleCandidate> {
    let back = half_cycle_map(a_max, Direction::Backward, params)?;
    // from the left turning point, or from x_k after a reflection
    let fwd = run_half(back.end, params)?;
    let mut kicks = back.kicks;
    kicks.extend(fwd.kicks);
    Ok(CycleCandidate {
        a_max_in: a_max,
        a_min: back.a_end,
        a_max_out: fwd.a_end,
        residual: fwd.a_end - a_max,
        kicks,
        arc_loss: back.arc_loss + fwd.arc_loss,
        blocked_at: back.blocked_at,
    })
}

/// A closed cycle of the kick map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedCycle {
    pub a_min: f64,
    pub a_max: f64,
    pub a_bar: f64,
    /// Return-map slope `1 + dr/dA_max`.
    pub slope: f64,
    pub stable: bool,
    /// At least one kick on the cycle is outside the approximation's range.
    pub advisory: bool,
    pub candidate: CycleCandidate,
}

/// Roots of the return map over `a_grid` plus bookkeeping of sign changes
/// that turned out to be jumps of the map.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixedCycleScan {
    pub cycles: Vec<FixedCycle>,
    /// Bracketed sign changes across which `r` jumps instead of vanishing.
    pub discontinuities: usize,
}

/// Default grid of `A_max` values: uniform over 0.1–6 µm.
pub fn default_grid(points: usize) -> Vec<f64> {
    let (lo, hi) = (0.1e-6, 6e-6);
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1).max(1) as f64)
        .collect()
}

/// Points in [`default_grid`] when none is given.
pub const DEFAULT_GRID_POINTS: usize = 600;

/// Brackets and bisects every sign change of `r(A_max)` on `a_grid`.
pub fn find_fixed_cycles(params: &SystemParams, a_grid: &[f64]) -> Result<FixedCycleScan> {
    if a_grid.is_empty() {
        return Err(Error::InvalidInput("empty amplitude grid".into()));
    }
    if a_grid.iter().any(|a| !(*a > 0.0)) || a_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("grid must be positive and strictly increasing".into()));
    }
    let tol = params.lambda_l * 1e-4;
    let mut scan = FixedCycleScan::default();
    if drive_amplitude(params)? == 0.0 {
        return Ok(scan);
    }
    let r = |a: f64| cycle_candidate(a, params).map(|c| c.residual);
    let values = a_grid.iter().map(|&a| r(a)).collect::<Result<Vec<_>>>()?;
    for i in 0..a_grid.len() {
        let (mut lo, mut hi) = (a_grid[i], a_grid[i]);
        if values[i] != 0.0 {
            let Some(&r_next) = values.get(i + 1) else { continue };
            if r_next == 0.0 || (values[i] < 0.0) == (r_next < 0.0) {
                continue;
            }
            hi = a_grid[i + 1];
            let neg_lo = values[i] < 0.0;
            loop {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let r_mid = r(mid)?;
                if r_mid == 0.0 {
                    (lo, hi) = (mid, mid);
                    break;
                }
                if (r_mid < 0.0) == neg_lo {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        // a genuine root is small on both sides of the final bracket; a jump
        // of the map is not
        let (r_lo, r_hi) = (r(lo)?, r(hi)?);
        let root = if r_lo.abs() <= r_hi.abs() { lo } else { hi };
        let cand = cycle_candidate(root, params)?;
        if !(r_lo.abs().max(r_hi.abs()) < tol) {
            scan.discontinuities += 1;
            continue;
        }
        let h = (root * 1e-6).max(1e-12);
        let slope = 1.0 + (r(root + h)? - r(root - h)?) / (2.0 * h);
        scan.cycles.push(FixedCycle {
            a_min: cand.a_min,
            a_max: cand.a_max_in,
            a_bar: average_amplitude(cand.a_min, cand.a_max_in),
            slope,
            stable: slope.abs() < 1.0,
            advisory: cand.any_flagged(),
            candidate: cand,
        });
    }
    Ok(scan)
}

/// Energy balance of one cycle candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceAudit {
    /// `Σ (W⁺ + W⁻)` over the kicks [J].
    pub lhs: f64,
    /// Energy lost along the arcs [J].
    pub rhs: f64,
    /// `|lhs - rhs| / max(|lhs|, rhs)`.
    pub residual: f64,
    /// `lhs - rhs`.
    pub net: f64,
}

pub fn balance_audit(candidate: &CycleCandidate) -> BalanceAudit {
    let lhs: f64 = candidate.kicks.iter().map(|k| k.work).sum();
    let rhs = candidate.arc_loss;
    let scale = lhs.abs().max(rhs);
    BalanceAudit {
        lhs,
        rhs,
        residual: if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 },
        net: lhs - rhs,
    }
}

/// Result of integrating one isolated resonance passage with the full mode
/// equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub v_in: f64,
    pub v_out: f64,
    /// `(m/2)(v_out² - v_in²)` plus the leading-order work of the Lorentzian
    /// tails outside the integrated interval [J].
    pub work: f64,
    /// False when the mirror turned back before reaching `x_k`.
    pub crossed: bool,
}

/// Half-width of the integrated passage interval in linewidths `κ/g`.
pub const PASSAGE_HALFWIDTH_LINEWIDTHS: f64 = 200.0;

/// Integrates mode `k` together with a free, undamped mirror that enters at
/// `x_k ∓ 200κ/g` with velocity `v_in` and leaves on the far side (or comes
/// back). The mode starts on its steady amplitude.
pub fn full_passage(k: i64, v_in: f64, params: &SystemParams) -> Result<Passage> {
    if v_in == 0.0 || !v_in.is_finite() {
        return Err(Error::Contract("passage needs a finite non-zero velocity".into()));
    }
    let model = ScaledModel::new(params)?;
    let u = model.units;
    let g = coupling_strength(params, k)?;
    let width = PASSAGE_HALFWIDTH_LINEWIDTHS * params.kappa / g;
    let d = u.length_to_scaled(width);
    let xk = k as f64;
    let dir = v_in.signum();
    let mut x = xk - dir * d;
    let mut v = u.velocity_to_scaled(v_in);
    let mut a = model.steady(k, x);
    let n_k = model.n + k as f64;
    let deriv = |x: f64, a: Complex64| {
        let inv = 1.0 / (model.n + x);
        let delta = model.detuning_scale * (xk - x) * inv;
        (model.mode_rhs(delta, a), model.force_scale * n_k * inv * inv * a.norm_sqr())
    };
    let v0 = v;
    let mut t = 0.0;
    let mut steps = 0usize;
    loop {
        let delta = model.detuning(k, x).abs();
        // resolve the mode rotation and keep position steps small
        let dt = (0.05 / delta.max(model.kappa)).min(1e-3 * d / v.abs());
        let good = (x, v, a);
        let (k1a, k1v) = deriv(x, a);
        let (k2a, k2v) = deriv(x + 0.5 * dt * v, a + k1a * (0.5 * dt));
        let (k3a, k3v) = deriv(x + 0.5 * dt * (v + 0.5 * dt * k1v), a + k2a * (0.5 * dt));
        let (k4a, k4v) = deriv(x + dt * (v + 0.5 * dt * k2v), a + k3a * dt);
        x += dt * (v + dt / 6.0 * (k1v + k2v + k3v));
        v += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        a += (k1a + (k2a + k3a) * 2.0 + k4a) * (dt / 6.0);
        steps += 1;
        t += dt;
        if !(x.is_finite() && v.is_finite()) {
            return Err(Error::Blowup {
                t: u.time_to_si(t),
                what: "single-passage integration".into(),
                last_good: Box::new(FullState {
                    mirror: MirrorState {
                        x: u.length_to_si(good.0),
                        p: params.mass * u.velocity_to_si(good.1),
                    },
                    modes: ModeSet::new(k..=k, vec![good.2 * u.amplitude_scale])?,
                    time: u.time_to_si(t - dt),
                }),
            });
        }
        let beyond = dir * (x - xk) >= d;
        let returned = dir * v < 0.0 && dir * (x - xk) <= -d;
        if beyond || returned {
            let crossed = beyond;
            let ke = 0.5 * (v * v - v0 * v0) * model.energy_unit;
            // work of the Lorentzian tails beyond ±d, once per side crossed
            let lead = kick_coefficients(k, params)?.lead;
            let tail = lead * (1.0 - 2.0 / PI * (g * width / params.kappa).atan());
            let work = if crossed { ke + dir * tail } else { ke };
            return Ok(Passage {
                v_in,
                v_out: u.velocity_to_si(v),
                work,
                crossed,
            });
        }
        if steps > 50_000_000 {
            return Err(Error::NoConvergence("passage did not leave the interval".into()));
        }
    }
}
