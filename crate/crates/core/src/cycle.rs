//! Limit-cycle detection on the Poincaré section `p = 0`, cycle shape
//! descriptors, and clustering of ensemble outcomes into branches.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::dynamics::{FullState, MirrorState};
use crate::error::{Error, Result};
use crate::integrator::{
    initial_state, EnergyLedger, Integrator, IntegratorConfig, Sample, Trajectory, TurnKind,
    TurningPoint,
};
use crate::model::{coupling_strength, resonance_position, SystemParams};

/// Half-width of the sawtooth measurement window in resonance linewidths.
const JUMP_HALFWIDTH_LINEWIDTHS: f64 = 5.0;

/// Momentum zero crossings of a sampled trajectory, by linear interpolation.
pub fn turning_points(samples: &[Sample]) -> Vec<TurningPoint> {
    samples
        .windows(2)
        .filter_map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let kind = if a.p > 0.0 && b.p <= 0.0 {
                TurnKind::Right
            } else if a.p < 0.0 && b.p >= 0.0 {
                TurnKind::Left
            } else {
                return None;
            };
            let s = a.p / (a.p - b.p);
            Some(TurningPoint {
                t: a.t + s * (b.t - a.t),
                x: a.x + s * (b.x - a.x),
                kind,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// Change of `|p|` across one resonance passage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityJump {
    pub k: i64,
    pub direction: Direction,
    /// `|p|` after minus `|p|` before the passage [kg·m/s].
    pub dp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitCycle {
    pub a_min: f64,
    pub a_max: f64,
    pub a_bar: f64,
    pub period: f64,
    /// One period of samples, starting just after a right turning point.
    pub points: Vec<Sample>,
    pub jumps: Vec<VelocityJump>,
    /// True for the trivial cycle of a mirror that came to rest.
    pub rest: bool,
}

/// `sqrt((a_min² + a_max²)/2)`.
pub fn average_amplitude(a_min: f64, a_max: f64) -> f64 {
    ((a_min * a_min + a_max * a_max) / 2.0).sqrt()
}

impl LimitCycle {
    pub fn new(a_min: f64, a_max: f64, period: f64, points: Vec<Sample>) -> Self {
        Self {
            a_min,
            a_max,
            a_bar: average_amplitude(a_min, a_max),
            period,
            points,
            jumps: Vec::new(),
            rest: false,
        }
    }

    fn at_rest(params: &SystemParams, points: Vec<Sample>) -> Self {
        Self {
            a_min: 0.0,
            a_max: 0.0,
            a_bar: 0.0,
            period: TAU / params.omega_m,
            points,
            jumps: Vec::new(),
            rest: true,
        }
    }

    /// Radiation work and dissipation accumulated over the stored period.
    pub fn energy_per_cycle(&self) -> Option<EnergyLedger> {
        let (first, last) = (self.points.first()?, self.points.last()?);
        Some(EnergyLedger {
            work_radiation: last.work - first.work,
            dissipated: last.dissipated - first.dissipated,
            mech_energy_start: 0.0,
            mech_energy_now: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Detection {
    Converged(LimitCycle),
    /// Largest relative spread of the turning amplitudes over the window.
    NotConverged { rel_spread: f64 },
}

impl Detection {
    pub fn cycle(&self) -> Option<&LimitCycle> {
        match self {
            Detection::Converged(c) => Some(c),
            Detection::NotConverged { .. } => None,
        }
    }
}

/// Default rest threshold: half peak-to-peak excursion below `λ/200`.
pub fn default_noise_floor(params: &SystemParams) -> f64 {
    params.lambda_l / 200.0
}

/// Tests the last `window_periods` turning points of `traj` for convergence
/// and extracts the cycle when converged.
pub fn detect_limit_cycle(traj: &Trajectory, rel_tol: f64, window_periods: usize) -> Result<Detection> {
    detect(
        &traj.params,
        &traj.turning_points,
        &traj.samples,
        rel_tol,
        window_periods,
        default_noise_floor(&traj.params),
    )
}

fn detect(
    params: &SystemParams,
    turning: &[TurningPoint],
    samples: &[Sample],
    rel_tol: f64,
    window_periods: usize,
    noise_floor: f64,
) -> Result<Detection> {
    if !(rel_tol > 0.0) {
        return Err(Error::Contract(format!("rel_tol must be > 0, got {rel_tol}")));
    }
    if window_periods < 1 {
        return Err(Error::Contract("window_periods must be >= 1".into()));
    }
    let Some(win) = window(turning, window_periods) else {
        // too few crossings: a mirror sitting still counts as rest
        let (lo, hi) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.x), hi.max(s.x)));
        if samples.len() > 1 && (hi - lo) / 2.0 < noise_floor {
            return Ok(Detection::Converged(LimitCycle::at_rest(params, rest_points(samples))));
        }
        return Ok(Detection::NotConverged {
            rel_spread: f64::INFINITY,
        });
    };
    let rights: Vec<f64> = win.iter().filter(|t| t.kind == TurnKind::Right).map(|t| t.x).collect();
    let lefts: Vec<f64> = win.iter().filter(|t| t.kind == TurnKind::Left).map(|t| -t.x).collect();
    let x_hi = rights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let x_lo = -lefts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if (x_hi - x_lo) / 2.0 < noise_floor {
        let tail = samples_after(samples, win[0].t);
        return Ok(Detection::Converged(LimitCycle::at_rest(params, rest_points(tail))));
    }
    let spread = |v: &[f64]| {
        let (lo, hi) = v
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (hi - lo) / mean.abs().max(noise_floor)
    };
    let rel_spread = spread(&rights).max(spread(&lefts));
    if rel_spread >= rel_tol {
        return Ok(Detection::NotConverged { rel_spread });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    // the cycle may sit entirely on one side of x = 0 at low drive
    let a_min = mean(&lefts).max(0.0);
    let a_max = mean(&rights).max(0.0);
    let right_times: Vec<f64> = win.iter().filter(|t| t.kind == TurnKind::Right).map(|t| t.t).collect();
    let period = if right_times.len() > 1 {
        (right_times[right_times.len() - 1] - right_times[0]) / (right_times.len() - 1) as f64
    } else {
        TAU / params.omega_m
    };
    let points = last_period(turning, samples);
    let mut cycle = LimitCycle::new(a_min, a_max, period, points);
    cycle.jumps = sawtooth_profile(&cycle, params)?;
    Ok(Detection::Converged(cycle))
}

/// The last `n` right and `n` left crossings, or `None` if there are fewer
/// than `n + 1` of either kind (the oldest is dropped as possibly partial).
fn window(turning: &[TurningPoint], n: usize) -> Option<&[TurningPoint]> {
    let (mut r, mut l) = (0usize, 0usize);
    for (i, tp) in turning.iter().enumerate().rev() {
        match tp.kind {
            TurnKind::Right => r += 1,
            TurnKind::Left => l += 1,
        }
        if r >= n && l >= n {
            return (i > 0).then(|| &turning[i..]);
        }
    }
    None
}

fn samples_after(samples: &[Sample], t: f64) -> &[Sample] {
    let i = samples.partition_point(|s| s.t < t);
    &samples[i..]
}

fn rest_points(samples: &[Sample]) -> Vec<Sample> {
    samples.last().copied().into_iter().collect()
}

/// Samples between the last two right turning points covered by `samples`.
fn last_period(turning: &[TurningPoint], samples: &[Sample]) -> Vec<Sample> {
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return Vec::new();
    };
    let mut rights = turning
        .iter()
        .rev()
        .filter(|t| t.kind == TurnKind::Right && t.t >= first.t && t.t <= last.t);
    match (rights.next(), rights.next()) {
        (Some(end), Some(start)) => samples
            .iter()
            .filter(|s| s.t >= start.t && s.t <= end.t)
            .copied()
            .collect(),
        _ => Vec::new(),
    }
}

/// Velocity jumps at every resonance inside the cycle's range.
///
/// Each jump compares the energy-equivalent momentum at `x_k` computed from
/// the mechanical energy on either side of a window of width `10κ/g`, which
/// removes the smooth change of `|p|` due to the spring across the window.
pub fn sawtooth_profile(cycle: &LimitCycle, params: &SystemParams) -> Result<Vec<VelocityJump>> {
    if cycle.rest || cycle.points.len() < 3 {
        return Ok(Vec::new());
    }
    let g = coupling_strength(params, 0)?;
    let w = JUMP_HALFWIDTH_LINEWIDTHS * params.kappa / g;
    let half = params.half_wavelength();
    let k_lo = (-cycle.a_min / half).ceil() as i64;
    let k_hi = (cycle.a_max / half).floor() as i64;
    let m = params.mass;
    let energy = |x: f64, p: f64| {
        crate::dynamics::mechanical_energy(params, MirrorState { x, p })
    };
    let mut jumps = Vec::new();
    for dir in [Direction::Forward, Direction::Backward] {
        let branch: Vec<&Sample> = cycle
            .points
            .iter()
            .filter(|s| match dir {
                Direction::Forward => s.p > 0.0,
                Direction::Backward => s.p < 0.0,
            })
            .collect();
        for k in k_lo..=k_hi {
            let xk = resonance_position(params, k);
            let (before, after) = match dir {
                Direction::Forward => (xk - w, xk + w),
                Direction::Backward => (xk + w, xk - w),
            };
            let (Some(pb), Some(pa)) = (crossing(&branch, before), crossing(&branch, after)) else {
                continue;
            };
            let vk = energy(xk, 0.0);
            let eb = energy(before, pb) - vk;
            let ea = energy(after, pa) - vk;
            if eb <= 0.0 || ea <= 0.0 {
                continue;
            }
            jumps.push(VelocityJump {
                k,
                direction: dir,
                dp: (2.0 * m * ea).sqrt() - (2.0 * m * eb).sqrt(),
            });
        }
    }
    Ok(jumps)
}

/// Momentum where a monotone branch first crosses `x`.
fn crossing(branch: &[&Sample], x: f64) -> Option<f64> {
    branch.windows(2).find_map(|w| {
        let (a, b) = (w[0], w[1]);
        // consecutive in time only (the branch filter may join two arcs)
        if (a.p > 0.0) != (b.p > 0.0) {
            return None;
        }
        let (lo, hi) = if a.x <= b.x { (a.x, b.x) } else { (b.x, a.x) };
        if x < lo || x > hi || lo == hi {
            return None;
        }
        let s = (x - a.x) / (b.x - a.x);
        Some(a.p + s * (b.p - a.p))
    })
}

/// Period average of `x` by the trapezoidal rule.
pub fn equilibrium_shift(cycle: &LimitCycle) -> f64 {
    let pts = &cycle.points;
    match pts.len() {
        0 => 0.0,
        1 => pts[0].x,
        _ => {
            let span = pts[pts.len() - 1].t - pts[0].t;
            if span <= 0.0 {
                return pts[0].x;
            }
            let area: f64 = pts.windows(2).map(|w| 0.5 * (w[0].x + w[1].x) * (w[1].t - w[0].t)).sum();
            area / span
        }
    }
}

/// Convergence settings for [`run_to_cycle`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub rel_tol: f64,
    pub window_periods: usize,
    pub transient_periods: usize,
    pub max_periods: usize,
    /// Rest threshold on half the peak-to-peak excursion [m].
    pub noise_floor: f64,
    /// Sampling stride (integrator steps) for the recorded period.
    pub record_stride: usize,
}

impl ConvergenceConfig {
    pub fn for_params(params: &SystemParams) -> Self {
        Self {
            rel_tol: 1e-3,
            window_periods: 20,
            transient_periods: 200,
            max_periods: 1500,
            noise_floor: default_noise_floor(params),
            record_stride: 1,
        }
    }
}

/// Outcome of integrating one seed until its cycle converges.
#[derive(Debug, Clone)]
pub struct CycleRun {
    pub detection: Detection,
    pub final_state: FullState,
    pub periods: f64,
    pub steps: u64,
}

/// Integrates from `seed` (modes adiabatic) until the turning amplitudes
/// settle, then records one period of the cycle.
pub fn run_to_cycle(
    params: &SystemParams,
    seed: MirrorState,
    cfg: &IntegratorConfig,
    conv: &ConvergenceConfig,
) -> Result<CycleRun> {
    let init = initial_state(params, seed.x, seed.p)?;
    run_from_state(params, &init, cfg, conv)
}

/// As [`run_to_cycle`], continuing from a full state.
pub fn run_from_state(
    params: &SystemParams,
    init: &FullState,
    cfg: &IntegratorConfig,
    conv: &ConvergenceConfig,
) -> Result<CycleRun> {
    let mut eng = Integrator::new(params, init, cfg)?;
    let t0 = eng.scaled_time();
    eng.advance_periods(conv.transient_periods as f64)?;
    let mut periods = conv.transient_periods;
    let detection = loop {
        let d = detect(
            params,
            eng.turning_points(),
            &[],
            conv.rel_tol,
            conv.window_periods,
            conv.noise_floor,
        )?;
        let rest_now = matches!(&d, Detection::NotConverged { rel_spread } if rel_spread.is_infinite())
            && resting(&eng, conv.noise_floor);
        if rest_now || matches!(&d, Detection::Converged(_)) || periods >= conv.max_periods {
            break d;
        }
        eng.advance_periods(1.0)?;
        periods += 1;
    };
    let detection = match detection {
        Detection::Converged(_) => record_cycle(&mut eng, conv)?,
        Detection::NotConverged { rel_spread } if rel_spread.is_infinite() && resting(&eng, conv.noise_floor) => {
            Detection::Converged(LimitCycle::at_rest(params, vec![eng.current_sample()]))
        }
        other => other,
    };
    Ok(CycleRun {
        final_state: eng.state(),
        periods: (eng.scaled_time() - t0) / TAU,
        steps: eng.steps(),
        detection,
    })
}

/// No crossings for a while and the mirror is not moving anywhere.
fn resting(eng: &Integrator, floor: f64) -> bool {
    let m = eng.mirror();
    let p = eng.params();
    let excursion = (m.p / (p.mass * p.omega_m)).abs();
    excursion < floor
}

fn record_cycle(eng: &mut Integrator, conv: &ConvergenceConfig) -> Result<Detection> {
    let skip = eng.turning_points().len();
    eng.set_sampling(Some(conv.record_stride));
    eng.advance_periods(2.2)?;
    eng.set_sampling(None);
    let samples = eng.take_samples();
    let tps = eng.turning_points();
    let all = tps.to_vec();
    let mut d = detect(
        eng.params(),
        &all,
        &samples,
        conv.rel_tol,
        conv.window_periods,
        conv.noise_floor,
    )?;
    // the extra periods may nudge the spread just over the tolerance;
    // judge convergence on the window that was accepted
    if let Detection::NotConverged { .. } = d {
        d = detect(
            eng.params(),
            &all[..skip],
            &[],
            conv.rel_tol,
            conv.window_periods,
            conv.noise_floor,
        )?;
        if let Detection::Converged(c) = &mut d {
            c.points = last_period(&all, &samples);
            c.jumps = sawtooth_profile(c, eng.params())?;
        }
    }
    Ok(d)
}

/// One attractor branch of a seed ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub center: f64,
    pub spread: f64,
    pub count: usize,
    pub representative: LimitCycle,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BranchSet {
    pub branches: Vec<Branch>,
}

impl BranchSet {
    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.center).collect()
    }

    /// Branch whose center is closest to `a_bar`.
    pub fn nearest(&self, a_bar: f64) -> Option<(usize, &Branch)> {
        self.branches
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1.center - a_bar).abs().total_cmp(&(b.1.center - a_bar).abs()))
    }
}

/// Single-linkage clustering of cycles on `a_bar`.
///
/// Sorted neighbours are split where their gap exceeds
/// `max(min_gap, gap_factor × median cluster spread)`; the spreads come
/// from a first pass split at `min_gap` alone.
pub fn cluster_branches(cycles: &[LimitCycle], gap_factor: f64, min_gap: f64) -> Result<BranchSet> {
    if cycles.is_empty() {
        return Err(Error::InvalidInput("cannot cluster an empty set of cycles".into()));
    }
    let mut sorted: Vec<&LimitCycle> = cycles.iter().collect();
    sorted.sort_by(|a, b| a.a_bar.total_cmp(&b.a_bar));
    let first = split(&sorted, min_gap);
    let mut spreads: Vec<f64> = first.iter().map(|c| c[c.len() - 1].a_bar - c[0].a_bar).collect();
    spreads.sort_by(f64::total_cmp);
    let median = spreads[spreads.len() / 2];
    let threshold = min_gap.max(gap_factor * median);
    let branches = split(&sorted, threshold)
        .into_iter()
        .map(|c| {
            let center = c.iter().map(|x| x.a_bar).sum::<f64>() / c.len() as f64;
            let representative = c
                .iter()
                .min_by(|a, b| (a.a_bar - center).abs().total_cmp(&(b.a_bar - center).abs()))
                .map(|x| (*x).clone())
                .expect("clusters are non-empty");
            Branch {
                center,
                spread: c[c.len() - 1].a_bar - c[0].a_bar,
                count: c.len(),
                representative,
            }
        })
        .collect();
    Ok(BranchSet { branches })
}

fn split<'a>(sorted: &[&'a LimitCycle], gap: f64) -> Vec<Vec<&'a LimitCycle>> {
    let mut out: Vec<Vec<&LimitCycle>> = vec![vec![sorted[0]]];
    for pair in sorted.windows(2) {
        if pair[1].a_bar - pair[0].a_bar > gap {
            out.push(Vec::new());
        }
        out.last_mut().expect("started non-empty").push(pair[1]);
    }
    out
}

/// Default minimum gap between branches, `λ/20`.
pub fn default_min_gap(params: &SystemParams) -> f64 {
    params.lambda_l / 20.0
}
