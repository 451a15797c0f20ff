//! Config files, CSV outputs and the run manifest.
//!
//! Configs are flat `key = value` files with `#` comments. Every float in a
//! CSV is written with 17 significant digits, so a rerun with the same
//! inputs reproduces the files byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cycle::{BranchSet, LimitCycle};
use crate::error::{Error, Result};
use crate::integrator::{ModeSample, Sample};
use crate::kickmap::{balance_audit, FixedCycle};
use crate::model::SystemParams;
use crate::sweep::{ComparisonRow, ContinuationTrace, PointResult, RunStatus, SweepResult};

/// Config keys in file order.
pub const CONFIG_KEYS: [&str; 8] = [
    "omega_m_hz",
    "mass_kg",
    "gamma_over_omega_m",
    "kappa_over_omega_m",
    "lambda_nm",
    "n_order",
    "power_w",
    "duffing_alpha_per_m2",
];

/// Keys that may be left out of a config file.
const OPTIONAL_KEYS: [&str; 1] = ["duffing_alpha_per_m2"];

pub const TRAJECTORY_HEADER: &str = "t_s,x_m,p_kgms,n_photons_total,work_J,dissipated_J";
pub const LIMIT_CYCLE_HEADER: &str = "x_m,p_kgms";
pub const PHOTON_HEADER: &str = "t_s,n_photons_total";
pub const MODE_HEADER: &str = "t_s,k,re_alpha,im_alpha";
pub const BRANCH_HEADER: &str = "power_w,a_bar_m,a_min_m,a_max_m,branch_id,seed_count";
pub const ATTRACTOR_HEADER: &str = "power_w,a_bar_m,branch_id,n_seeds,status";
pub const FIXED_CYCLE_HEADER: &str = "power_w,a_min_m,a_max_m,a_bar_m,stable,balance_residual";
pub const FIXED_CYCLE_AUDIT_HEADER: &str =
    "power_w,a_min_m,a_max_m,a_bar_m,stable,balance_residual,work_sum_J,e_gamma_J,approx_valid";
pub const COMPARISON_HEADER: &str = "power_w,a_bar_full_m,a_bar_kickmap_m,rel_diff,matched";
pub const DUFFING_HEADER: &str = "duffing_alpha_per_m2,a_bar_m,a_min_m,a_max_m,branch_id,n_seeds,status";
pub const CONTINUATION_HEADER: &str = "power_w,a_bar_m,a_min_m,a_max_m,status,branch_jump";

/// Raw values of a parsed config, keyed by config key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigValues {
    values: BTreeMap<&'static str, f64>,
}

impl ConfigValues {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// Sets a key, rejecting unknown names and unparsable numbers.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_at(0, key, value)
    }

    fn set_at(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let err = |reason: String| Error::ConfigParse {
            line,
            key: key.to_string(),
            reason,
        };
        let name = CONFIG_KEYS
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| err("unknown key".into()))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| err(format!("`{}` is not a number", value.trim())))?;
        if !v.is_finite() {
            return Err(err("value must be finite".into()));
        }
        if *name == "n_order" && v.fract() != 0.0 {
            return Err(err("mode order must be an integer".into()));
        }
        self.values.insert(name, v);
        Ok(())
    }

    /// Values of a parameter set.
    pub fn from_params(p: &SystemParams) -> Self {
        let mut values = BTreeMap::new();
        values.insert("omega_m_hz", p.omega_m);
        values.insert("mass_kg", p.mass);
        values.insert("gamma_over_omega_m", p.gamma / p.omega_m);
        values.insert("kappa_over_omega_m", p.kappa / p.omega_m);
        values.insert("lambda_nm", p.lambda_l * 1e9);
        values.insert("n_order", p.n_order as f64);
        values.insert("power_w", p.power);
        values.insert("duffing_alpha_per_m2", p.duffing_alpha);
        Self { values }
    }

    /// Builds validated parameters; every key except the Duffing constant
    /// must be present.
    pub fn to_params(&self) -> Result<SystemParams> {
        for key in CONFIG_KEYS {
            if !OPTIONAL_KEYS.contains(&key) && !self.values.contains_key(key) {
                return Err(Error::ConfigMissing(key));
            }
        }
        let g = |k: &str| self.values[k];
        let omega_m = g("omega_m_hz");
        let p = SystemParams {
            omega_m,
            mass: g("mass_kg"),
            gamma: g("gamma_over_omega_m") * omega_m,
            kappa: g("kappa_over_omega_m") * omega_m,
            lambda_l: g("lambda_nm") * 1e-9,
            n_order: g("n_order") as i64,
            power: g("power_w"),
            duffing_alpha: self.get("duffing_alpha_per_m2").unwrap_or(0.0),
        };
        for w in p.validate()? {
            log::warn!("{w}");
        }
        Ok(p)
    }
}

/// Parses config text. Blank lines and `#` comments are ignored; a key may
/// appear only once.
pub fn parse_config(text: &str) -> Result<ConfigValues> {
    let mut cfg = ConfigValues::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(Error::ConfigParse {
                line,
                key: body.to_string(),
                reason: "expected `key = value`".into(),
            });
        };
        let key = key.trim();
        if cfg.values.contains_key(key) {
            return Err(Error::ConfigParse {
                line,
                key: key.to_string(),
                reason: "duplicate key".into(),
            });
        }
        cfg.set_at(line, key, value)?;
    }
    Ok(cfg)
}

/// Reads a config file, or the reference parameters when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<ConfigValues> {
    match path {
        Some(p) => parse_config(&fs::read_to_string(p)?),
        None => Ok(ConfigValues::from_params(&SystemParams::reference())),
    }
}

/// Config text that reproduces `p` when parsed.
pub fn config_text(p: &SystemParams) -> String {
    let v = ConfigValues::from_params(p);
    let mut s = String::new();
    for key in CONFIG_KEYS {
        let x = v.values[key];
        if key == "n_order" {
            let _ = writeln!(s, "{key} = {}", x as i64);
        } else {
            let _ = writeln!(s, "{key} = {}", fmt_f64(x));
        }
    }
    s
}

/// 17 significant digits, scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Line-oriented CSV builder.
#[derive(Debug)]
pub struct Csv {
    buf: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &str) -> Self {
        Self {
            buf: format!("{header}\n"),
            columns: header.split(',').count(),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        debug_assert_eq!(fields.len(), self.columns);
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.buf.as_bytes())?;
        Ok(())
    }
}

pub fn trajectory_csv(samples: &[Sample]) -> Csv {
    let mut c = Csv::new(TRAJECTORY_HEADER);
    for s in samples {
        c.row(&[s.t, s.x, s.p, s.n_photons, s.work, s.dissipated].map(fmt_f64));
    }
    c
}

pub fn photon_csv(samples: &[Sample]) -> Csv {
    let mut c = Csv::new(PHOTON_HEADER);
    for s in samples {
        c.row(&[fmt_f64(s.t), fmt_f64(s.n_photons)]);
    }
    c
}

pub fn mode_csv(samples: &[ModeSample]) -> Csv {
    let mut c = Csv::new(MODE_HEADER);
    for s in samples {
        for (k, a) in s.modes.iter() {
            c.row(&[fmt_f64(s.t), k.to_string(), fmt_f64(a.re), fmt_f64(a.im)]);
        }
    }
    c
}

pub fn limit_cycle_csv(cycle: &LimitCycle) -> Csv {
    let mut c = Csv::new(LIMIT_CYCLE_HEADER);
    for s in &cycle.points {
        c.row(&[fmt_f64(s.x), fmt_f64(s.p)]);
    }
    c
}

/// One row per branch and sweep point.
pub fn branch_csv(points: &[PointResult]) -> Csv {
    let mut c = Csv::new(BRANCH_HEADER);
    for pt in points {
        branch_rows(&mut c, pt.value, &pt.branches);
    }
    c
}

fn branch_rows(c: &mut Csv, power: f64, set: &BranchSet) {
    for (i, b) in set.branches.iter().enumerate() {
        let r = &b.representative;
        c.row(&[
            fmt_f64(power),
            fmt_f64(b.center),
            fmt_f64(r.a_min),
            fmt_f64(r.a_max),
            i.to_string(),
            b.count.to_string(),
        ]);
    }
}

/// Attractor diagram: one row per branch, plus one row per non-converged or
/// failed status with `branch_id = -1` and an empty amplitude.
pub fn attractor_csv(sweep: &SweepResult) -> Csv {
    let mut c = Csv::new(ATTRACTOR_HEADER);
    for pt in &sweep.points {
        for (i, b) in pt.branches.branches.iter().enumerate() {
            let status = if b.representative.rest { "rest" } else { "converged" };
            c.row(&[
                fmt_f64(pt.value),
                fmt_f64(b.center),
                i.to_string(),
                b.count.to_string(),
                status.to_string(),
            ]);
        }
        failure_rows(&mut c, pt, |v, n, status| {
            vec![fmt_f64(v), String::new(), "-1".into(), n.to_string(), status.into()]
        });
    }
    c
}

fn failure_rows(c: &mut Csv, pt: &PointResult, row: impl Fn(f64, usize, &str) -> Vec<String>) {
    for status in ["not_converged", "escaped", "failed"] {
        let n = pt.runs.iter().filter(|r| r.status.label() == status).count();
        if n > 0 {
            c.row(&row(pt.value, n, status));
        }
    }
}

pub fn duffing_csv(sweep: &SweepResult) -> Csv {
    let mut c = Csv::new(DUFFING_HEADER);
    for pt in &sweep.points {
        for (i, b) in pt.branches.branches.iter().enumerate() {
            let r = &b.representative;
            let status = if r.rest { "rest" } else { "converged" };
            c.row(&[
                fmt_f64(pt.value),
                fmt_f64(b.center),
                fmt_f64(r.a_min),
                fmt_f64(r.a_max),
                i.to_string(),
                b.count.to_string(),
                status.to_string(),
            ]);
        }
        failure_rows(&mut c, pt, |v, n, status| {
            vec![
                fmt_f64(v),
                String::new(),
                String::new(),
                String::new(),
                "-1".into(),
                n.to_string(),
                status.into(),
            ]
        });
    }
    c
}

pub fn continuation_csv(trace: &ContinuationTrace) -> Csv {
    let mut c = Csv::new(CONTINUATION_HEADER);
    for s in &trace.steps {
        let cy = s.cycle.as_ref();
        c.row(&[
            fmt_f64(s.value),
            opt(cy.map(|c| c.a_bar)),
            opt(cy.map(|c| c.a_min)),
            opt(cy.map(|c| c.a_max)),
            s.status.label().to_string(),
            u8::from(s.branch_jump).to_string(),
        ]);
    }
    c
}

/// Kick-map fixed cycles at one power. With `audit`, adds the summed kick
/// work, the arc dissipation and whether every kick lies inside the
/// approximation's range.
pub fn fixed_cycle_csv(rows: &[(f64, Vec<FixedCycle>)], audit: bool) -> Csv {
    let mut c = Csv::new(if audit { FIXED_CYCLE_AUDIT_HEADER } else { FIXED_CYCLE_HEADER });
    for (power, cycles) in rows {
        for fc in cycles {
            let a = balance_audit(&fc.candidate);
            let mut f = vec![
                fmt_f64(*power),
                fmt_f64(fc.a_min),
                fmt_f64(fc.a_max),
                fmt_f64(fc.a_bar),
                u8::from(fc.stable).to_string(),
                fmt_f64(a.residual),
            ];
            if audit {
                f.push(fmt_f64(a.lhs));
                f.push(fmt_f64(a.rhs));
                f.push(u8::from(!fc.advisory).to_string());
            }
            c.row(&f);
        }
    }
    c
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Csv {
    let mut c = Csv::new(COMPARISON_HEADER);
    for r in rows {
        c.row(&[
            fmt_f64(r.power),
            opt(r.a_bar_full),
            opt(r.a_bar_kickmap),
            opt(r.rel_diff),
            u8::from(r.matched).to_string(),
        ]);
    }
    c
}

/// Parses a CSV written by this module: checks the header and returns the
/// rows as strings (empty fields allowed).
pub fn read_csv(text: &str, header: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    let got = lines.next().unwrap_or("");
    if got != header {
        return Err(Error::InvalidInput(format!("header `{got}` != `{header}`")));
    }
    let n = header.split(',').count();
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<String> = l.split(',').map(str::to_string).collect();
            if f.len() != n {
                return Err(Error::InvalidInput(format!("row {}: {} fields, expected {n}", i + 1, f.len())));
            }
            Ok(f)
        })
        .collect()
}

/// Per-run entry of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub value: f64,
    pub seed_index: usize,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl RunEntry {
    pub fn from_status(value: f64, seed_index: usize, status: &RunStatus) -> Self {
        Self {
            value,
            seed_index,
            status: status.label().to_string(),
            message: match status {
                RunStatus::Failed(m) => Some(m.clone()),
                _ => None,
            },
        }
    }
}

/// Everything needed to reproduce a run, written as JSON next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    /// `ok`, `not_converged` or `numerical_failure`; anything but `ok`
    /// means some outputs are missing or partial.
    pub status: String,
    pub params: SystemParams,
    /// Subcommand-specific settings (integrator, convergence, sweep plan …).
    pub settings: serde_json::Value,
    pub outputs: Vec<PathBuf>,
    pub runs: Vec<RunEntry>,
    pub warnings: Vec<String>,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FULL: &str = "\
# reference setup
omega_m_hz = 1e7
mass_kg = 5e-15
gamma_over_omega_m = 0.01
kappa_over_omega_m = 100   # unresolved sideband
lambda_nm = 1000
n_order = 10000
power_w = 11
";

    #[test]
    fn parses_reference_config() {
        let p = parse_config(FULL).unwrap().to_params().unwrap();
        let want = SystemParams::reference().with_power(11.0);
        assert_eq!(p.omega_m, want.omega_m);
        assert_eq!(p.mass, want.mass);
        assert!((p.gamma - want.gamma).abs() < 1e-9);
        assert!((p.kappa - want.kappa).abs() < 1e-6);
        assert!((p.lambda_l - want.lambda_l).abs() < 1e-20);
        assert_eq!(p.n_order, 10_000);
        assert_eq!(p.duffing_alpha, 0.0);
    }

    #[test]
    fn missing_mass_is_named() {
        let text = FULL.replace("mass_kg = 5e-15\n", "");
        let e = parse_config(&text).unwrap().to_params().unwrap_err();
        assert!(matches!(e, Error::ConfigMissing("mass_kg")), "{e}");
    }

    #[test]
    fn errors_carry_line_and_key() {
        let text = FULL.replace("power_w = 11", "power_w = eleven");
        match parse_config(&text).unwrap_err() {
            Error::ConfigParse { line, key, .. } => {
                assert_eq!(line, 8);
                assert_eq!(key, "power_w");
            }
            e => panic!("{e}"),
        }
        let e = parse_config("speed = 3\n").unwrap_err();
        assert!(matches!(e, Error::ConfigParse { line: 1, .. }));
        let e = parse_config("power_w = 1\npower_w = 2\n").unwrap_err();
        assert!(matches!(e, Error::ConfigParse { line: 2, .. }));
        let e = parse_config("n_order = 1.5\n").unwrap_err();
        assert!(matches!(e, Error::ConfigParse { line: 1, .. }));
    }

    #[test]
    fn invalid_values_are_rejected_after_parse() {
        let text = FULL.replace("mass_kg = 5e-15", "mass_kg = -1");
        assert!(parse_config(&text).unwrap().to_params().is_err());
    }

    #[test]
    fn csv_roundtrip_header_and_width() {
        let s = Sample {
            t: 1.0,
            x: -2.5e-7,
            p: 3.0e-15,
            n_photons: 1e6,
            work: 1e-18,
            dissipated: 2e-18,
        };
        let c = trajectory_csv(&[s, s]);
        let rows = read_csv(c.as_str(), TRAJECTORY_HEADER).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0][1].parse::<f64>().unwrap(), -2.5e-7);
        assert!(read_csv(c.as_str(), PHOTON_HEADER).is_err());
    }

    proptest! {
        #[test]
        fn seventeen_digits_roundtrip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let s = fmt_f64(v);
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }

        #[test]
        fn config_text_roundtrips(power in 0.0f64..30.0, alpha in -1e13f64..1e13, mass in 1e-16f64..1e-12) {
            let p = SystemParams::reference().with_power(power).with_duffing(alpha);
            let p = SystemParams { mass, ..p };
            let back = parse_config(&config_text(&p)).unwrap().to_params().unwrap();
            prop_assert_eq!(back.power, p.power);
            prop_assert_eq!(back.mass, p.mass);
            prop_assert_eq!(back.duffing_alpha, p.duffing_alpha);
            prop_assert!((back.gamma - p.gamma).abs() <= 1e-15 * p.gamma);
        }
    }
}
