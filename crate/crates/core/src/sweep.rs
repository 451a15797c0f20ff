//! Parameter scans: seed ensembles over a grid of powers or Duffing
//! constants, branch continuation, and the comparison between the full
//! simulation and the kick map.
//!
//! Every (value, seed) pair is an independent work item. Items run on a
//! rayon pool and are collected in input order, so results do not depend on
//! scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cycle::{
    cluster_branches, default_min_gap, run_from_state, run_to_cycle, BranchSet, ConvergenceConfig,
    Detection, LimitCycle,
};
use crate::dynamics::{FullState, MirrorState};
use crate::error::{Error, Result};
use crate::integrator::IntegratorConfig;
use crate::kickmap::{default_grid, find_fixed_cycles, FixedCycle, DEFAULT_GRID_POINTS};
use crate::model::SystemParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    Power,
    DuffingAlpha,
}

impl SweepVariable {
    pub fn apply(self, params: &SystemParams, value: f64) -> SystemParams {
        match self {
            SweepVariable::Power => params.with_power(value),
            SweepVariable::DuffingAlpha => params.with_duffing(value),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    Independent,
    ContinueUp,
    ContinueDown,
}

/// Seeds `(x, p) = (0, m ω_m A)` with `A` uniform on `[a_lo, a_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub count: usize,
    pub a_lo: f64,
    pub a_hi: f64,
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self {
            count: 12,
            a_lo: 0.25e-6,
            a_hi: 6e-6,
        }
    }
}

/// Initial mirror states of the ensemble.
pub fn seed_ensemble(params: &SystemParams, spec: &SeedSpec) -> Vec<MirrorState> {
    let n = spec.count;
    (0..n)
        .map(|i| {
            let a = if n == 1 {
                spec.a_lo
            } else {
                spec.a_lo + (spec.a_hi - spec.a_lo) * i as f64 / (n - 1) as f64
            };
            MirrorState {
                x: 0.0,
                p: params.mass * params.omega_m * a,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub variable: SweepVariable,
    /// Strictly increasing.
    pub values: Vec<f64>,
    pub seeds: SeedSpec,
    pub mode: SweepMode,
}

impl SweepPlan {
    pub fn new(variable: SweepVariable, values: Vec<f64>, seeds: SeedSpec, mode: SweepMode) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("sweep needs at least one value".into()));
        }
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("sweep values must be finite and strictly increasing".into()));
        }
        if mode != SweepMode::Independent && values.len() < 2 {
            return Err(Error::InvalidInput("continuation needs at least two values".into()));
        }
        if seeds.count == 0 || !(seeds.a_lo > 0.0) || seeds.a_hi < seeds.a_lo {
            return Err(Error::InvalidInput("seed spec needs count >= 1 and 0 < a_lo <= a_hi".into()));
        }
        Ok(Self {
            variable,
            values,
            seeds,
            mode,
        })
    }

    /// `from, from + step, …` up to `to` (inclusive within a tenth of a step).
    pub fn grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
        if !(step > 0.0) || !(to >= from) {
            return Err(Error::InvalidInput(format!("bad grid {from}..{to} step {step}")));
        }
        let n = ((to - from) / step + 0.1).floor() as usize;
        Ok((0..=n).map(|i| from + step * i as f64).collect())
    }

    fn apply(&self, params: &SystemParams, value: f64) -> SystemParams {
        self.variable.apply(params, value)
    }
}

/// Knobs shared by all sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub integrator: IntegratorConfig,
    pub convergence: ConvergenceConfig,
    pub gap_factor: f64,
    pub min_gap: f64,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Relative change of Ā between neighbouring continuation steps that
    /// counts as a jump to another branch.
    pub jump_threshold: f64,
}

impl SweepSettings {
    pub fn for_params(params: &SystemParams) -> Self {
        Self {
            integrator: IntegratorConfig::for_params(params),
            convergence: ConvergenceConfig {
                record_stride: 10,
                ..ConvergenceConfig::for_params(params)
            },
            gap_factor: 3.0,
            min_gap: default_min_gap(params),
            threads: None,
            jump_threshold: 0.25,
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.threads {
            b = b.num_threads(n);
        }
        b.build()
            .map_err(|e| Error::InvalidInput(format!("cannot build worker pool: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    Rest,
    NotConverged,
    /// The mirror left a softening spring's potential well.
    Escaped,
    Failed(String),
}

impl RunStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::Rest => "rest",
            RunStatus::NotConverged => "not_converged",
            RunStatus::Escaped => "escaped",
            RunStatus::Failed(_) => "failed",
        }
    }
}

/// One seed of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub value: f64,
    pub seed_index: usize,
    pub seed: MirrorState,
    pub status: RunStatus,
    pub cycle: Option<LimitCycle>,
    pub periods: f64,
    /// True for a numerical failure (as opposed to a bad input).
    pub numerical: bool,
}

/// Ensemble outcome at one value of the swept variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub value: f64,
    pub branches: BranchSet,
    pub runs: Vec<RunRecord>,
}

impl PointResult {
    pub fn not_converged(&self) -> usize {
        self.runs.iter().filter(|r| r.status == RunStatus::NotConverged).count()
    }

    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| matches!(r.status, RunStatus::Failed(_))).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub plan: SweepPlan,
    pub points: Vec<PointResult>,
}

enum Start {
    Seed(MirrorState),
    State(Box<FullState>),
}

fn run_one(
    params: &SystemParams,
    value: f64,
    seed_index: usize,
    start: Start,
    settings: &SweepSettings,
) -> (RunRecord, Option<FullState>) {
    let seed = match &start {
        Start::Seed(s) => *s,
        Start::State(f) => f.mirror,
    };
    let out = match start {
        Start::Seed(s) => run_to_cycle(params, s, &settings.integrator, &settings.convergence),
        Start::State(f) => run_from_state(params, &f, &settings.integrator, &settings.convergence),
    };
    match out {
        Ok(run) => {
            let (status, cycle) = match run.detection {
                Detection::Converged(c) if c.rest => (RunStatus::Rest, Some(c)),
                Detection::Converged(c) => (RunStatus::Converged, Some(c)),
                Detection::NotConverged { .. } => (RunStatus::NotConverged, None),
            };
            log::debug!("value {value} seed {seed_index}: {} after {:.0} periods", status.label(), run.periods);
            (
                RunRecord {
                    value,
                    seed_index,
                    seed,
                    status,
                    cycle,
                    periods: run.periods,
                    numerical: false,
                },
                Some(run.final_state),
            )
        }
        Err(Error::Escaped { .. }) => (
            RunRecord {
                value,
                seed_index,
                seed,
                status: RunStatus::Escaped,
                cycle: None,
                periods: 0.0,
                numerical: false,
            },
            None,
        ),
        Err(e) => {
            log::warn!("value {value} seed {seed_index} failed: {e}");
            (
                RunRecord {
                    value,
                    seed_index,
                    seed,
                    numerical: e.is_numerical(),
                    status: RunStatus::Failed(e.to_string()),
                    cycle: None,
                    periods: 0.0,
                },
                None,
            )
        }
    }
}

fn cluster(value: f64, runs: Vec<RunRecord>, settings: &SweepSettings) -> Result<PointResult> {
    let cycles: Vec<LimitCycle> = runs.iter().filter_map(|r| r.cycle.clone()).collect();
    let branches = if cycles.is_empty() {
        BranchSet::default()
    } else {
        cluster_branches(&cycles, settings.gap_factor, settings.min_gap)?
    };
    Ok(PointResult { value, branches, runs })
}

/// Runs the seed ensemble (plus `extra` seeds per value) at every value of
/// the plan and clusters each ensemble into branches.
fn ensemble_sweep(
    plan: &SweepPlan,
    params: &SystemParams,
    settings: &SweepSettings,
    extra: &[Vec<MirrorState>],
) -> Result<SweepResult> {
    let items: Vec<(usize, usize, SystemParams, MirrorState)> = plan
        .values
        .iter()
        .enumerate()
        .flat_map(|(vi, &v)| {
            let p = plan.apply(params, v);
            let mut seeds = seed_ensemble(&p, &plan.seeds);
            if let Some(more) = extra.get(vi) {
                seeds.extend(more.iter().copied());
            }
            seeds.into_iter().enumerate().map(move |(si, s)| (vi, si, p, s)).collect::<Vec<_>>()
        })
        .collect();
    let pool = settings.pool()?;
    let records: Vec<(usize, RunRecord)> = pool.install(|| {
        items
            .par_iter()
            .map(|(vi, si, p, s)| (*vi, run_one(p, plan.values[*vi], *si, Start::Seed(*s), settings).0))
            .collect()
    });
    let mut per_value: Vec<Vec<RunRecord>> = vec![Vec::new(); plan.values.len()];
    for (vi, r) in records {
        per_value[vi].push(r);
    }
    let points = plan
        .values
        .iter()
        .zip(per_value)
        .map(|(&v, runs)| cluster(v, runs, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        plan: plan.clone(),
        points,
    })
}

/// Independent seed ensembles over a grid of drive powers.
pub fn power_sweep(plan: &SweepPlan, params: &SystemParams, settings: &SweepSettings) -> Result<SweepResult> {
    if plan.variable != SweepVariable::Power {
        return Err(Error::InvalidInput("power_sweep needs variable = power".into()));
    }
    ensemble_sweep(plan, params, settings, &[])
}

/// Independent seed ensembles over a grid of Duffing constants.
pub fn duffing_sweep(plan: &SweepPlan, params: &SystemParams, settings: &SweepSettings) -> Result<SweepResult> {
    if plan.variable != SweepVariable::DuffingAlpha {
        return Err(Error::InvalidInput("duffing_sweep needs variable = duffing_alpha".into()));
    }
    ensemble_sweep(plan, params, settings, &[])
}

/// Duffing constants with `|α|·a_ref²` uniform on `[0, max_product]`,
/// signed by `sign`, in increasing order.
pub fn duffing_grid(a_ref: f64, max_product: f64, points: usize, sign: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..points)
        .map(|i| sign.signum() * max_product * i as f64 / (points - 1).max(1) as f64 / (a_ref * a_ref))
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// One step of a continuation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub value: f64,
    pub status: RunStatus,
    pub cycle: Option<LimitCycle>,
    /// Ā moved by more than the jump threshold relative to the previous step.
    pub branch_jump: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationTrace {
    pub plan: SweepPlan,
    pub steps: Vec<TraceStep>,
    /// Value at which the oscillation was lost (decay to rest or failure).
    pub terminated_at: Option<f64>,
}

/// Follows one branch across the plan's values, seeding each run from the
/// final state of the previous one.
///
/// The trace starts on the smallest branch of the first ensemble for
/// `continue-up` and on the largest for `continue-down` (which walks the
/// values from the top).
pub fn continuation_sweep(
    plan: &SweepPlan,
    params: &SystemParams,
    settings: &SweepSettings,
) -> Result<ContinuationTrace> {
    let values: Vec<f64> = match plan.mode {
        SweepMode::ContinueUp => plan.values.clone(),
        SweepMode::ContinueDown => plan.values.iter().rev().copied().collect(),
        SweepMode::Independent => {
            return Err(Error::InvalidInput("continuation needs mode continue-up or continue-down".into()))
        }
    };
    let first = values[0];
    let p0 = plan.apply(params, first);
    let pool = settings.pool()?;
    let seeds = seed_ensemble(&p0, &plan.seeds);
    let runs: Vec<(RunRecord, Option<FullState>)> = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, s)| run_one(&p0, first, i, Start::Seed(*s), settings))
            .collect()
    });
    let pick = runs
        .iter()
        .filter(|(r, _)| r.status == RunStatus::Converged)
        .min_by(|a, b| {
            let (x, y) = (a.0.cycle.as_ref().map_or(0.0, |c| c.a_bar), b.0.cycle.as_ref().map_or(0.0, |c| c.a_bar));
            match plan.mode {
                SweepMode::ContinueDown => y.total_cmp(&x).then(a.0.seed_index.cmp(&b.0.seed_index)),
                _ => x.total_cmp(&y).then(a.0.seed_index.cmp(&b.0.seed_index)),
            }
        });
    let mut trace = ContinuationTrace {
        plan: plan.clone(),
        steps: Vec::new(),
        terminated_at: None,
    };
    let Some((rec, Some(state))) = pick.cloned() else {
        trace.terminated_at = Some(first);
        trace.steps.push(TraceStep {
            value: first,
            status: runs
                .first()
                .map(|r| r.0.status.clone())
                .unwrap_or(RunStatus::NotConverged),
            cycle: None,
            branch_jump: false,
        });
        return Ok(trace);
    };
    let prev_bar = rec.cycle.as_ref().map(|c| c.a_bar);
    trace.steps.push(TraceStep {
        value: first,
        status: rec.status,
        cycle: rec.cycle,
        branch_jump: false,
    });
    let (steps, terminated) = chain(plan.variable, &values[1..], params, settings, state, prev_bar);
    trace.steps.extend(steps);
    trace.terminated_at = terminated;
    Ok(trace)
}

/// Follows the branch through `start` across `values` (in the given
/// order), seeding every run from the final state of the previous one.
/// Returns the steps and the value at which the oscillation was lost.
pub fn follow_branch(
    variable: SweepVariable,
    values: &[f64],
    params: &SystemParams,
    settings: &SweepSettings,
    start: &FullState,
) -> (Vec<TraceStep>, Option<f64>) {
    chain(variable, values, params, settings, start.clone(), None)
}

fn chain(
    variable: SweepVariable,
    values: &[f64],
    params: &SystemParams,
    settings: &SweepSettings,
    mut state: FullState,
    mut prev_bar: Option<f64>,
) -> (Vec<TraceStep>, Option<f64>) {
    let mut steps = Vec::new();
    for &v in values {
        let p = variable.apply(params, v);
        let (rec, next) = run_one(&p, v, 0, Start::State(Box::new(state.clone())), settings);
        let bar = rec.cycle.as_ref().filter(|c| !c.rest).map(|c| c.a_bar);
        let jump = match (prev_bar, bar) {
            (Some(a), Some(b)) => (b - a).abs() > settings.jump_threshold * a,
            _ => false,
        };
        let lost = !matches!(rec.status, RunStatus::Converged | RunStatus::NotConverged);
        steps.push(TraceStep {
            value: v,
            status: rec.status,
            cycle: rec.cycle,
            branch_jump: jump,
        });
        match next {
            Some(s) if !lost => state = s,
            _ => return (steps, Some(v)),
        }
        if bar.is_some() {
            prev_bar = bar;
        }
    }
    (steps, None)
}

/// One row of the kick-map/full-simulation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub power: f64,
    pub a_bar_full: Option<f64>,
    pub a_bar_kickmap: Option<f64>,
    pub rel_diff: Option<f64>,
    pub matched: bool,
    /// The kick-map cycle involves a kick outside the approximation's range.
    pub advisory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerComparison {
    pub power: f64,
    pub full: PointResult,
    pub kickmap: Vec<FixedCycle>,
    pub rows: Vec<ComparisonRow>,
}

impl PowerComparison {
    pub fn stable_roots(&self) -> usize {
        self.kickmap.iter().filter(|c| c.stable).count()
    }

    /// Non-rest branches of the full simulation.
    pub fn full_branches(&self) -> usize {
        self.full.branches.branches.iter().filter(|b| !b.representative.rest).count()
    }
}

/// Relative Ā tolerance for a kick-map root to count as matched.
pub const MATCH_TOLERANCE: f64 = 0.10;

/// Pairs every stable kick-map root with the nearest full-simulation branch.
///
/// The full-simulation ensemble at each power is the standard seed set plus
/// one run started at each stable root's right turning point, so that
/// narrow basins predicted by the kick map are probed directly.
pub fn compare_oracles(powers: &[f64], params: &SystemParams, settings: &SweepSettings) -> Result<Vec<PowerComparison>> {
    let plan = SweepPlan::new(SweepVariable::Power, powers.to_vec(), SeedSpec::default(), SweepMode::Independent)?;
    compare_with_plan(&plan, params, settings)
}

/// As [`compare_oracles`] with an explicit seed ensemble.
pub fn compare_with_plan(plan: &SweepPlan, params: &SystemParams, settings: &SweepSettings) -> Result<Vec<PowerComparison>> {
    let grid = default_grid(DEFAULT_GRID_POINTS);
    let roots: Vec<Vec<FixedCycle>> = plan
        .values
        .iter()
        .map(|&pw| find_fixed_cycles(&params.with_power(pw), &grid).map(|s| s.cycles))
        .collect::<Result<_>>()?;
    let extra: Vec<Vec<MirrorState>> = roots
        .iter()
        .map(|rs| {
            rs.iter()
                .filter(|c| c.stable)
                .map(|c| MirrorState { x: c.a_max, p: 0.0 })
                .collect()
        })
        .collect();
    let full = ensemble_sweep(plan, params, settings, &extra)?;
    Ok(full
        .points
        .into_iter()
        .zip(roots)
        .map(|(point, kick)| {
            let rows = match_rows(point.value, &point.branches, &kick);
            PowerComparison {
                power: point.value,
                full: point,
                kickmap: kick,
                rows,
            }
        })
        .collect())
}

fn match_rows(power: f64, branches: &BranchSet, kick: &[FixedCycle]) -> Vec<ComparisonRow> {
    let live: Vec<f64> = branches
        .branches
        .iter()
        .filter(|b| !b.representative.rest)
        .map(|b| b.center)
        .collect();
    let mut used = vec![false; live.len()];
    let mut rows = Vec::new();
    for c in kick.iter().filter(|c| c.stable) {
        let nearest = live
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - c.a_bar).abs().total_cmp(&(b.1 - c.a_bar).abs()));
        match nearest {
            Some((i, &full)) => {
                used[i] = true;
                let rel = (c.a_bar - full).abs() / full;
                rows.push(ComparisonRow {
                    power,
                    a_bar_full: Some(full),
                    a_bar_kickmap: Some(c.a_bar),
                    rel_diff: Some(rel),
                    matched: rel < MATCH_TOLERANCE,
                    advisory: c.advisory,
                });
            }
            None => rows.push(ComparisonRow {
                power,
                a_bar_full: None,
                a_bar_kickmap: Some(c.a_bar),
                rel_diff: None,
                matched: false,
                advisory: c.advisory,
            }),
        }
    }
    for (i, &full) in live.iter().enumerate() {
        if !used[i] {
            rows.push(ComparisonRow {
                power,
                a_bar_full: Some(full),
                a_bar_kickmap: None,
                rel_diff: None,
                matched: false,
                advisory: false,
            });
        }
    }
    rows
}
