use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use optomech::cycle::{detect_limit_cycle, Detection};
use optomech::integrator::{initial_state, integrate};
use optomech::io::{self, ConfigValues, RunEntry, RunManifest};
use optomech::kickmap::{default_grid, find_fixed_cycles, FixedCycle, DEFAULT_GRID_POINTS};
use optomech::sweep::{
    compare_with_plan, continuation_sweep, duffing_sweep, power_sweep, RunStatus, SeedSpec, SweepMode, SweepPlan,
    SweepSettings, SweepVariable,
};
use optomech::{Error, IntegratorConfig, SystemParams};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "optomech", version, about = "Multimode optomechanics with large mirror excursions")]
struct Cli {
    /// Flat `key = value` config file; reference parameters when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for ensembles (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// One flag per config key; each replaces the file's value.
#[derive(Args, Debug)]
struct Overrides {
    #[arg(long, global = true)]
    omega_m_hz: Option<String>,
    #[arg(long, global = true)]
    mass_kg: Option<String>,
    #[arg(long, global = true)]
    gamma_over_omega_m: Option<String>,
    #[arg(long, global = true)]
    kappa_over_omega_m: Option<String>,
    #[arg(long, global = true)]
    lambda_nm: Option<String>,
    #[arg(long, global = true)]
    n_order: Option<String>,
    #[arg(long, global = true)]
    power_w: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    duffing_alpha_per_m2: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> [(&'static str, &Option<String>); 8] {
        [
            ("omega_m_hz", &self.omega_m_hz),
            ("mass_kg", &self.mass_kg),
            ("gamma_over_omega_m", &self.gamma_over_omega_m),
            ("kappa_over_omega_m", &self.kappa_over_omega_m),
            ("lambda_nm", &self.lambda_nm),
            ("n_order", &self.n_order),
            ("power_w", &self.power_w),
            ("duffing_alpha_per_m2", &self.duffing_alpha_per_m2),
        ]
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate one trajectory and extract its limit cycle.
    Simulate(SimulateArgs),
    /// Seed-ensemble scan over power or the Duffing constant.
    Sweep(SweepArgs),
    /// Fixed cycles of the kick map.
    Kickmap(KickmapArgs),
    /// Kick-map roots against full-simulation branches.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Integration length in mechanical periods.
    #[arg(long, default_value_t = 400.0)]
    periods: f64,
    /// Initial position [m].
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    x0_m: f64,
    /// Initial velocity amplitude: p0 = m ω_m A0 [m].
    #[arg(long, default_value_t = 1e-6, allow_hyphen_values = true)]
    a0_m: f64,
    /// Keep every n-th integrator step in the trajectory.
    #[arg(long, default_value_t = 20)]
    stride: usize,
    /// Also write the total photon number series.
    #[arg(long)]
    photons: bool,
    /// Also dump every mode amplitude at each sample.
    #[arg(long)]
    modes: bool,
    #[arg(long, default_value_t = 1e-3)]
    rel_tol: f64,
    #[arg(long, default_value_t = 20)]
    window_periods: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Variable {
    Power,
    #[value(alias = "duffing_alpha")]
    DuffingAlpha,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Independent,
    ContinueUp,
    ContinueDown,
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    /// Explicit comma-separated values (overrides the range).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    values: Vec<f64>,
    #[arg(long, allow_hyphen_values = true)]
    from: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    to: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
}

impl GridArgs {
    fn resolve(&self, default: (f64, f64, f64)) -> optomech::Result<Vec<f64>> {
        if !self.values.is_empty() {
            return Ok(self.values.clone());
        }
        SweepPlan::grid(
            self.from.unwrap_or(default.0),
            self.to.unwrap_or(default.1),
            self.step.unwrap_or(default.2),
        )
    }
}

#[derive(Args, Debug, Clone)]
struct SeedArgs {
    #[arg(long, default_value_t = 12)]
    seeds: usize,
    /// Smallest seed amplitude [m].
    #[arg(long, default_value_t = 0.25e-6)]
    a_lo: f64,
    /// Largest seed amplitude [m].
    #[arg(long, default_value_t = 6e-6)]
    a_hi: f64,
}

impl SeedArgs {
    fn spec(&self) -> SeedSpec {
        SeedSpec {
            count: self.seeds,
            a_lo: self.a_lo,
            a_hi: self.a_hi,
        }
    }
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "power")]
    variable: Variable,
    #[arg(long, value_enum, default_value = "independent")]
    mode: Mode,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    seeds: SeedArgs,
}

#[derive(Args, Debug)]
struct KickmapArgs {
    /// Powers [W]; defaults to the configured power.
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid_points: usize,
    /// Add the energy-balance audit columns.
    #[arg(long)]
    audit: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Powers [W].
    #[arg(long, value_delimiter = ',', default_value = "7,11,15")]
    powers: Vec<f64>,
    #[command(flatten)]
    seeds: SeedArgs,
}

/// Outcome of a subcommand that got far enough to write a manifest.
struct Report {
    status: &'static str,
    outputs: Vec<PathBuf>,
    runs: Vec<RunEntry>,
    settings: serde_json::Value,
    exit: u8,
}

impl Report {
    fn ok(outputs: Vec<PathBuf>, settings: serde_json::Value) -> Self {
        Self {
            status: "ok",
            outputs,
            runs: Vec::new(),
            settings,
            exit: 0,
        }
    }

    /// Exit 3 if any run failed numerically, else 4 if any did not converge.
    fn from_runs(outputs: Vec<PathBuf>, settings: serde_json::Value, runs: Vec<RunEntry>) -> Self {
        let (status, exit) = if runs.iter().any(|r| r.status == "failed") {
            ("numerical_failure", EXIT_NUMERICAL)
        } else if runs.iter().any(|r| r.status == "not_converged") {
            ("not_converged", EXIT_NOT_CONVERGED)
        } else {
            ("ok", 0)
        };
        Self {
            status,
            outputs,
            runs,
            settings,
            exit,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let params = match load_params(&cli) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let started = Instant::now();
    let started_unix_s = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let report = std::fs::create_dir_all(&cli.out)
        .map_err(Error::from)
        .and_then(|_| run(&cli, &params));
    let report = match report {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            let (status, code) = if e.is_numerical() {
                ("numerical_failure", EXIT_NUMERICAL)
            } else {
                ("config_error", EXIT_CONFIG)
            };
            Report {
                status,
                outputs: Vec::new(),
                runs: Vec::new(),
                settings: serde_json::json!({ "error": e.to_string() }),
                exit: code,
            }
        }
    };
    if cli.out.is_dir() {
        let manifest = RunManifest {
            tool: "optomech".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command_name(&cli.command).into(),
            args: std::env::args().skip(1).collect(),
            status: report.status.into(),
            params,
            settings: report.settings,
            outputs: report.outputs,
            runs: report.runs,
            warnings: params.validate().unwrap_or_default(),
            started_unix_s,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        if let Err(e) = manifest.write(&cli.out.join("manifest.json")) {
            eprintln!("error: cannot write manifest: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    ExitCode::from(report.exit)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Sweep(_) => "sweep",
        Command::Kickmap(_) => "kickmap",
        Command::Compare(_) => "compare",
    }
}

fn load_params(cli: &Cli) -> optomech::Result<SystemParams> {
    let mut values: ConfigValues = io::load_config(cli.config.as_deref())?;
    for (key, v) in cli.overrides.pairs() {
        if let Some(v) = v {
            values.set(key, v)?;
        }
    }
    values.to_params()
}

fn run(cli: &Cli, params: &SystemParams) -> optomech::Result<Report> {
    match &cli.command {
        Command::Simulate(a) => simulate(&cli.out, params, a),
        Command::Sweep(a) => sweep(&cli.out, params, a, cli.threads),
        Command::Kickmap(a) => kickmap(&cli.out, params, a),
        Command::Compare(a) => compare(&cli.out, params, a, cli.threads),
    }
}

fn write(out: &Path, name: &str, csv: &io::Csv, outputs: &mut Vec<PathBuf>) -> optomech::Result<()> {
    let path = out.join(name);
    csv.write(&path)?;
    outputs.push(path);
    Ok(())
}

fn simulate(out: &Path, params: &SystemParams, a: &SimulateArgs) -> optomech::Result<Report> {
    if !(a.periods > 0.0) || a.stride == 0 {
        return Err(Error::InvalidInput("--periods must be > 0 and --stride >= 1".into()));
    }
    let mut cfg = IntegratorConfig::for_params(params)
        .with_periods(a.periods)
        .with_stride(a.stride);
    cfg.record_modes = a.modes;
    let init = initial_state(params, a.x0_m, params.mass * params.omega_m * a.a0_m)?;
    let traj = integrate(&init, &cfg, params)?;
    let mut outputs = Vec::new();
    write(out, "trajectory.csv", &io::trajectory_csv(&traj.samples), &mut outputs)?;
    if a.photons {
        write(out, "photons.csv", &io::photon_csv(&traj.samples), &mut outputs)?;
    }
    if a.modes {
        write(out, "modes.csv", &io::mode_csv(&traj.mode_samples), &mut outputs)?;
    }
    let detection = detect_limit_cycle(&traj, a.rel_tol, a.window_periods)?;
    let settings = serde_json::json!({
        "integrator": cfg,
        "rel_tol": a.rel_tol,
        "window_periods": a.window_periods,
        "x0_m": a.x0_m,
        "a0_m": a.a0_m,
        "ledger_residual": optomech::integrator::ledger_residual(&traj),
        "steps": traj.steps,
    });
    let status = match &detection {
        Detection::Converged(c) => {
            write(out, "limit_cycle.csv", &io::limit_cycle_csv(c), &mut outputs)?;
            RunStatus::Converged
        }
        Detection::NotConverged { rel_spread } => {
            log::warn!("no limit cycle within tolerance (spread {rel_spread:.3e})");
            RunStatus::NotConverged
        }
    };
    Ok(Report::from_runs(
        outputs,
        settings,
        vec![RunEntry::from_status(params.power, 0, &status)],
    ))
}

fn settings_for(params: &SystemParams, threads: Option<usize>) -> SweepSettings {
    SweepSettings {
        threads,
        ..SweepSettings::for_params(params)
    }
}

fn sweep(out: &Path, params: &SystemParams, a: &SweepArgs, threads: Option<usize>) -> optomech::Result<Report> {
    let variable = match a.variable {
        Variable::Power => SweepVariable::Power,
        Variable::DuffingAlpha => SweepVariable::DuffingAlpha,
    };
    let mode = match a.mode {
        Mode::Independent => SweepMode::Independent,
        Mode::ContinueUp => SweepMode::ContinueUp,
        Mode::ContinueDown => SweepMode::ContinueDown,
    };
    let default = match variable {
        SweepVariable::Power => (0.5, 18.0, 0.5),
        SweepVariable::DuffingAlpha => (-7.5e11, 2.5e12, 2.5e11),
    };
    let plan = SweepPlan::new(variable, a.grid.resolve(default)?, a.seeds.spec(), mode)?;
    let settings = settings_for(params, threads);
    let json = serde_json::json!({ "plan": plan, "sweep": settings });
    let mut outputs = Vec::new();
    if mode != SweepMode::Independent {
        if variable != SweepVariable::Power {
            return Err(Error::InvalidInput("continuation is only defined over power".into()));
        }
        let trace = continuation_sweep(&plan, params, &settings)?;
        write(out, "continuation.csv", &io::continuation_csv(&trace), &mut outputs)?;
        let runs = trace
            .steps
            .iter()
            .map(|s| RunEntry::from_status(s.value, 0, &s.status))
            .collect();
        return Ok(Report::from_runs(outputs, json, runs));
    }
    let result = match variable {
        SweepVariable::Power => power_sweep(&plan, params, &settings)?,
        SweepVariable::DuffingAlpha => duffing_sweep(&plan, params, &settings)?,
    };
    match variable {
        SweepVariable::Power => {
            write(out, "attractor.csv", &io::attractor_csv(&result), &mut outputs)?;
            write(out, "branches.csv", &io::branch_csv(&result.points), &mut outputs)?;
        }
        SweepVariable::DuffingAlpha => {
            write(out, "duffing.csv", &io::duffing_csv(&result), &mut outputs)?;
        }
    }
    let runs = result
        .points
        .iter()
        .flat_map(|pt| pt.runs.iter())
        .map(|r| RunEntry::from_status(r.value, r.seed_index, &r.status))
        .collect();
    Ok(Report::from_runs(outputs, json, runs))
}

fn kickmap(out: &Path, params: &SystemParams, a: &KickmapArgs) -> optomech::Result<Report> {
    let powers = if a.grid.values.is_empty() && a.grid.from.is_none() {
        vec![params.power]
    } else {
        a.grid.resolve((params.power, params.power, 1.0))?
    };
    if a.grid_points < 2 {
        return Err(Error::InvalidInput("--grid-points must be >= 2".into()));
    }
    let grid = default_grid(a.grid_points);
    let mut rows: Vec<(f64, Vec<FixedCycle>)> = Vec::new();
    let mut discontinuities = Vec::new();
    for &pw in &powers {
        let scan = find_fixed_cycles(&params.with_power(pw), &grid)?;
        discontinuities.push(serde_json::json!({ "power_w": pw, "count": scan.discontinuities }));
        rows.push((pw, scan.cycles));
    }
    let mut outputs = Vec::new();
    write(out, "fixed_cycles.csv", &io::fixed_cycle_csv(&rows, a.audit), &mut outputs)?;
    Ok(Report::ok(
        outputs,
        serde_json::json!({
            "powers_w": powers,
            "grid_points": a.grid_points,
            "audit": a.audit,
            "discontinuities": discontinuities,
        }),
    ))
}

fn compare(out: &Path, params: &SystemParams, a: &CompareArgs, threads: Option<usize>) -> optomech::Result<Report> {
    let plan = SweepPlan::new(SweepVariable::Power, a.powers.clone(), a.seeds.spec(), SweepMode::Independent)?;
    let settings = settings_for(params, threads);
    let comps = compare_with_plan(&plan, params, &settings)?;
    let rows: Vec<_> = comps.iter().flat_map(|c| c.rows.iter().cloned()).collect();
    let fixed: Vec<(f64, Vec<FixedCycle>)> = comps.iter().map(|c| (c.power, c.kickmap.clone())).collect();
    let mut outputs = Vec::new();
    write(out, "comparison.csv", &io::comparison_csv(&rows), &mut outputs)?;
    write(out, "fixed_cycles.csv", &io::fixed_cycle_csv(&fixed, true), &mut outputs)?;
    let branches: Vec<_> = comps.iter().map(|c| c.full.clone()).collect();
    write(out, "branches.csv", &io::branch_csv(&branches), &mut outputs)?;
    let runs = comps
        .iter()
        .flat_map(|c| c.full.runs.iter())
        .map(|r| RunEntry::from_status(r.value, r.seed_index, &r.status))
        .collect();
    let counts: Vec<_> = comps
        .iter()
        .map(|c| {
            serde_json::json!({
                "power_w": c.power,
                "kickmap_stable": c.stable_roots(),
                "full_branches": c.full_branches(),
            })
        })
        .collect();
    Ok(Report::from_runs(
        outputs,
        serde_json::json!({ "plan": plan, "sweep": settings, "branch_counts": counts }),
        runs,
    ))
}
