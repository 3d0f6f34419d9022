//! Command layer of the `dqid` binary: `run`, `compare` and `oracle`.
//!
//! Exit codes: 0 success, 1 threshold or oracle failure, 2 input error,
//! 3 simulation or identification error.

pub mod artifacts;
pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde_json::{json, Value};

use crate::admittance::{
    assemble_sem, assemble_sfra, bode, compare, compare_tables, principal_phase_deg,
    AgreementReport, BodeTable, Channel, DqAdmittance, Method,
};
use crate::era::{era_admittance, EraOptions, EraOrder};
use crate::experiments::{run_step_pair, run_sweep, StepExperimentPair, StepInjection, SweepPlan};
use crate::lti::log_grid;
use crate::plant::{build_rl_reference_plant, find_equilibrium, rl_admittance};
use crate::ratfit::FitOptions;
use crate::signals::Axis;
use artifacts::{pretty, ArtifactSet, Staged};
pub use config::{ConfigError, RunConfig};

/// Default `compare` thresholds: dB, degrees.
pub const DEFAULT_COMPARE_THRESHOLDS: (f64, f64) = (1.0, 5.0);
/// Default oracle tolerances: relative magnitude, degrees.
pub const DEFAULT_ORACLE_THRESHOLDS: (f64, f64) = (0.02, 2.0);
pub const DEFAULT_BAND: (f64, f64) = (1.0, 100.0);

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Thresholds exceeded or oracle failed.
    Failed(String),
    Input(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Failed(m) => write!(f, "{m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Input(format!("config {e}"))
    }
}

fn runtime(e: crate::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// `"LO:HI"` with `0 < LO < HI`.
pub fn parse_band(s: &str) -> Result<(f64, f64), CliError> {
    let (a, b) = parse_pair(s, "band")?;
    if !(a > 0.0 && b > a) {
        return Err(CliError::Input(format!("band {s:?}: expected 0 < LO < HI")));
    }
    Ok((a, b))
}

/// `"A:B"` with both values positive.
pub fn parse_thresholds(s: &str) -> Result<(f64, f64), CliError> {
    let (a, b) = parse_pair(s, "thresholds")?;
    if !(a > 0.0 && b > 0.0) {
        return Err(CliError::Input(format!(
            "thresholds {s:?}: both values must be positive"
        )));
    }
    Ok((a, b))
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Input(format!("{what} {s:?}: expected two numbers as A:B"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    if !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    Ok((a, b))
}

/// `"all"` or a comma-separated subset of `era,sem,sfra`, in canonical order.
pub fn parse_methods(s: &str) -> Result<Vec<Method>, CliError> {
    if s.trim() == "all" {
        return Ok(Method::ALL.to_vec());
    }
    let mut picked = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m: Method = part.parse().map_err(|_| {
            CliError::Input(format!(
                "methods: unknown method {part:?} (expected era, sem, sfra or all)"
            ))
        })?;
        picked.push(m);
    }
    if picked.is_empty() {
        return Err(CliError::Input(
            "methods: at least one method is required".into(),
        ));
    }
    Ok(Method::ALL
        .into_iter()
        .filter(|m| picked.contains(m))
        .collect())
}

/// Identified admittances and bookkeeping of one `run`.
#[derive(Debug)]
pub struct RunOutcome {
    pub artifacts: ArtifactSet,
    pub admittances: Vec<DqAdmittance>,
    pub reports: Vec<(Method, Method, AgreementReport)>,
    pub step_experiments: usize,
    pub sweep_simulations: usize,
}

impl RunOutcome {
    pub fn admittance(&self, m: Method) -> Option<&DqAdmittance> {
        self.admittances.iter().find(|y| y.method == m)
    }
}

fn check_run_band(cfg: &RunConfig, methods: &[Method], band: (f64, f64)) -> Result<(), CliError> {
    let nyquist = 0.5 * cfg.sampling.fs;
    if band.1 >= nyquist {
        return Err(CliError::Input(format!(
            "band {}:{} Hz reaches the Nyquist frequency {nyquist} Hz",
            band.0, band.1
        )));
    }
    if methods.contains(&Method::Sfra) && methods.len() > 1 {
        let plan = cfg.sweep_plan();
        let (lo, hi) = (
            plan.frequencies[0],
            plan.frequencies[plan.frequencies.len() - 1],
        );
        if band.0 < lo * (1.0 - 1e-9) || band.1 > hi * (1.0 + 1e-9) {
            return Err(CliError::Input(format!(
                "band {}:{} Hz lies outside the sweep range {lo}:{hi} Hz",
                band.0, band.1
            )));
        }
    }
    Ok(())
}

/// Builds the plant, runs the requested experiments and identifications and
/// writes every artifact into `out_dir` at the end.
pub fn cmd_run(
    cfg: &RunConfig,
    methods: &[Method],
    out_dir: &Path,
    band: (f64, f64),
) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    check_run_band(cfg, methods, band)?;
    let fs = cfg.sampling.fs;
    let plant = cfg
        .build_plant()
        .map_err(|e| CliError::Input(format!("config plant: {e}")))?;
    let eq = find_equilibrium(&plant).map_err(runtime)?;

    let want = |m| methods.contains(&m);
    let mut step_experiments = 0;
    let mut pairs: Vec<(f64, StepExperimentPair)> = Vec::new();
    let mut pair_for = |g: f64| -> Result<StepExperimentPair, CliError> {
        if let Some((_, p)) = pairs.iter().find(|(pg, _)| *pg == g) {
            return Ok(p.clone());
        }
        let p = run_step_pair(&plant, &eq, &cfg.step_injection(g), fs).map_err(runtime)?;
        step_experiments += 2;
        pairs.push((g, p.clone()));
        Ok(p)
    };
    let era_pair = if want(Method::Era) {
        Some(pair_for(cfg.era.g)?)
    } else {
        None
    };
    let sem_pair = if want(Method::Sem) {
        Some(pair_for(cfg.sem.g)?)
    } else {
        None
    };

    let mut admittances = Vec::new();
    if let Some(pair) = &era_pair {
        let opts = EraOptions {
            order: cfg.era_order(),
            f_min: cfg.sfra.f_min,
        };
        admittances.push(era_admittance(pair, &opts).map_err(runtime)?);
    }
    if let Some(pair) = &sem_pair {
        admittances.push(assemble_sem(pair, &cfg.sem_fit_options()).map_err(runtime)?);
    }
    let mut sweep_simulations = 0;
    if want(Method::Sfra) {
        let ds = run_sweep(&plant, &eq, &cfg.sweep_plan(), fs).map_err(runtime)?;
        sweep_simulations = ds.simulations;
        admittances.push(assemble_sfra(&ds, &cfg.sfra_fit_options()).map_err(runtime)?);
    }

    let mut reports = Vec::new();
    for (i, a) in admittances.iter().enumerate() {
        for b in &admittances[i + 1..] {
            // raw sweep points lead when SFRA takes part
            let (a, b) = if b.method == Method::Sfra {
                (b, a)
            } else {
                (a, b)
            };
            let r = compare(a, b, band, 200).map_err(runtime)?;
            reports.push((a.method, b.method, r));
        }
    }

    let mut staged = Staged::default();
    if cfg.output.emit_timeseries {
        if let Some((_, pair)) = pairs.first() {
            staged.add(
                "timeseries_step_d.csv",
                artifacts::timeseries_csv(pair.raw(Axis::D)),
            );
            staged.add(
                "timeseries_step_q.csv",
                artifacts::timeseries_csv(pair.raw(Axis::Q)),
            );
            staged.add(
                "fig3_step_d.gp",
                artifacts::step_figure("timeseries_step_d.csv", "fig3_step_d", "step on v_gd"),
            );
            staged.add(
                "fig4_step_q.gp",
                artifacts::step_figure("timeseries_step_q.csv", "fig4_step_q", "step on v_gq"),
            );
        }
    }
    let grid = cfg.sweep_plan().frequencies;
    let mut bode_files = Vec::new();
    for y in &admittances {
        let name = format!("bode_{}.csv", y.method);
        staged.add(name.clone(), bode(y, &grid).map_err(runtime)?.to_csv());
        bode_files.push(name);
    }
    if let (Some(pair), Some(sem)) = (
        &sem_pair,
        admittances.iter().find(|y| y.method == Method::Sem),
    ) {
        staged.add("sem_timefit.csv", artifacts::sem_timefit_csv(pair, sem));
        staged.add("fig5_sem_fit.gp", artifacts::sem_figure("sem_timefit.csv"));
    }
    if let Some(sfra) = admittances.iter().find(|y| y.method == Method::Sfra) {
        staged.add(
            "sfra_fit.csv",
            artifacts::sfra_fit_csv(sfra).map_err(runtime)?,
        );
        staged.add("fig6_sfra_fit.gp", artifacts::sfra_figure("sfra_fit.csv"));
    }
    if !bode_files.is_empty() {
        let names: Vec<&str> = bode_files.iter().map(String::as_str).collect();
        staged.add("fig7_bode.gp", artifacts::bode_figure(&names));
    }
    let mut summary = String::new();
    for (a, b, r) in &reports {
        staged.add(format!("report_{a}_vs_{b}.csv"), r.to_csv());
        summary.push_str(&format!("{a} vs {b}, {}", r.summary()));
    }
    if !summary.is_empty() {
        staged.add("report.txt", summary);
    }
    let diagnostics = json!({
        "plant": {
            "model": cfg.plant.model,
            "state_dim": plant.state_dim(),
            "equilibrium_residual": plant.residual(&eq),
        },
        "methods": admittances.iter().map(artifacts::admittance_json).collect::<Vec<_>>(),
        "agreement": reports.iter().map(|(a, b, r)| json!({
            "a": a.to_string(),
            "b": b.to_string(),
            "band_hz": [r.band.0, r.band.1],
            "max_dmag_db": r.max_dmag_db(),
            "max_dphase_deg": r.max_dphase_deg(),
        })).collect::<Vec<_>>(),
    });
    staged.add("diagnostics.json", pretty(&diagnostics));
    let mut effective = cfg.clone();
    effective.output.directory = out_dir.display().to_string();
    staged.add("effective_config.toml", effective.to_toml());

    let plan = cfg.sweep_plan();
    let manifest = json!({
        "methods": methods.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
        "counters": {
            "step_experiments": step_experiments,
            "sweep_simulations": sweep_simulations,
        },
        "protocol": {
            "fs_hz": cfg.sampling.fs,
            "record_length_s": cfg.sampling.record_length,
            "era_g": cfg.era.g,
            "sem_g": cfg.sem.g,
            "sweep_points": plan.frequencies.len(),
            "sweep_amplitude_pp_v": plan.amplitude_pp,
            "sweep_cycles": plan.cycles,
        },
    });
    let artifacts = staged
        .commit(out_dir, manifest)
        .map_err(|e| io_error(out_dir, e))?;
    Ok(RunOutcome {
        artifacts,
        admittances,
        reports,
        step_experiments,
        sweep_simulations,
    })
}

fn read_bode(path: &Path) -> Result<BodeTable, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    BodeTable::from_csv(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Result of `compare`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareOutcome {
    pub report: AgreementReport,
    pub within: bool,
    pub summary_path: PathBuf,
}

/// Compares two Bode CSV files over `band`; writes the report CSV to `out`
/// and a readable summary next to it.
pub fn cmd_compare(
    a: &Path,
    b: &Path,
    band: (f64, f64),
    out: &Path,
    thresholds: (f64, f64),
) -> Result<CompareOutcome, CliError> {
    let ta = read_bode(a)?;
    let tb = read_bode(b)?;
    let report = compare_tables(&ta, &tb, band).map_err(|e| {
        CliError::Input(format!(
            "no shared frequencies of common channels in band: {e}"
        ))
    })?;
    let within = report.within(thresholds.0, thresholds.1);
    let verdict = if within { "within" } else { "EXCEEDS" };
    let summary = format!(
        "{} vs {}\n{}{verdict} thresholds {} dB / {} deg\n",
        a.display(),
        b.display(),
        report.summary(),
        thresholds.0,
        thresholds.1
    );
    let summary_path = out.with_extension("txt");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(out, report.to_csv()).map_err(|e| io_error(out, e))?;
    std::fs::write(&summary_path, &summary).map_err(|e| io_error(&summary_path, e))?;
    Ok(CompareOutcome {
        report,
        within,
        summary_path,
    })
}

/// One checked point of the oracle suite.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub method: Method,
    pub channel: Channel,
    pub f: f64,
    pub rel_mag_error: f64,
    pub phase_error_deg: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub rows: Vec<OracleRow>,
    pub artifacts: ArtifactSet,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OracleRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    /// Pass/fail per method and channel.
    pub fn table(&self) -> String {
        let mut s = String::from("method channel  max_rel_mag  max_phase_deg  result\n");
        for m in Method::ALL {
            for c in Channel::ALL {
                let rows: Vec<&OracleRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == m && r.channel == c)
                    .collect();
                let mag = rows.iter().map(|r| r.rel_mag_error).fold(0.0, f64::max);
                let ph = rows.iter().map(|r| r.phase_error_deg).fold(0.0, f64::max);
                let ok = rows.iter().all(|r| r.pass);
                s.push_str(&format!(
                    "{:<6} {:<7} {:>11.3e} {:>14.3e}  {}\n",
                    m.to_string(),
                    c.to_string(),
                    mag,
                    ph,
                    if ok { "pass" } else { "FAIL" }
                ));
            }
        }
        s
    }
}

/// RL branch of the oracle suite.
pub const ORACLE_RL: (f64, f64, f64) = (0.23, 318e-6, 377.0);

/// Identifies the RL reference plant with all three methods and checks
/// each against the closed-form admittance on 30 points over 1-100 Hz.
/// `sign_flip` negates the identified `Ydq` channel (negative control).
pub fn cmd_oracle(
    out_dir: &Path,
    thresholds: (f64, f64),
    sign_flip: bool,
) -> Result<OracleOutcome, CliError> {
    let (r, l, w0) = ORACLE_RL;
    let fs = 2500.0;
    let grid = log_grid(1.0, 100.0, 30);
    let plant = build_rl_reference_plant(r, l, w0).map_err(runtime)?;
    let eq = find_equilibrium(&plant).map_err(runtime)?;
    let pair = run_step_pair(&plant, &eq, &StepInjection::new(Axis::D), fs).map_err(runtime)?;
    let era = era_admittance(
        &pair,
        &EraOptions {
            order: EraOrder::Fixed(2),
            f_min: 1.0,
        },
    )
    .map_err(runtime)?;
    let sem = assemble_sem(&pair, &FitOptions::new(2)).map_err(runtime)?;
    let plan = SweepPlan {
        frequencies: grid.clone(),
        ..SweepPlan::default()
    };
    let ds = run_sweep(&plant, &eq, &plan, fs).map_err(runtime)?;
    let sfra = assemble_sfra(&ds, &FitOptions::new(2)).map_err(runtime)?;

    let mut rows = Vec::new();
    for y in [&era, &sem, &sfra] {
        for c in Channel::ALL {
            for &f in &grid {
                let s = Complex64::new(0.0, 2.0 * std::f64::consts::PI * f);
                let truth = rl_admittance(r, l, w0, s)[(c.output().index(), c.input().index())];
                let mut v = y.value_at(c, f).map_err(runtime)?;
                if sign_flip && c == Channel::Ydq {
                    v = -v;
                }
                let q = v / truth;
                let rel = (q.norm() - 1.0).abs();
                let ph = principal_phase_deg(q).abs();
                rows.push(OracleRow {
                    method: y.method,
                    channel: c,
                    f,
                    rel_mag_error: rel,
                    phase_error_deg: ph,
                    pass: rel <= thresholds.0 && ph <= thresholds.1,
                });
            }
        }
    }
    let mut csv = String::from("method,channel,f_hz,rel_mag_error,phase_error_deg,pass\n");
    for o in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            o.method,
            o.channel,
            artifacts::num(o.f),
            artifacts::num(o.rel_mag_error),
            artifacts::num(o.phase_error_deg),
            o.pass
        ));
    }
    let mut staged = Staged::default();
    staged.add("oracle.csv", csv);
    let partial = OracleOutcome {
        rows,
        artifacts: ArtifactSet {
            directory: out_dir.to_path_buf(),
            files: Vec::new(),
            manifest: out_dir.join("manifest.json"),
        },
    };
    staged.add("oracle_summary.txt", partial.table());
    let manifest = json!({
        "oracle": {
            "R_ohm": r,
            "L_h": l,
            "omega0_rad_s": w0,
            "rel_mag_tolerance": thresholds.0,
            "phase_tolerance_deg": thresholds.1,
            "passed": partial.passed(),
        },
    });
    let artifacts = staged
        .commit(out_dir, manifest)
        .map_err(|e| io_error(out_dir, e))?;
    Ok(OracleOutcome {
        artifacts,
        ..partial
    })
}

/// First failing point per method and channel, for the exit message.
pub fn oracle_failure_message(o: &OracleOutcome) -> String {
    let mut lines = Vec::new();
    for m in Method::ALL {
        for c in Channel::ALL {
            if let Some(r) = o.failures().find(|r| r.method == m && r.channel == c) {
                let count = o
                    .failures()
                    .filter(|x| x.method == m && x.channel == c)
                    .count();
                lines.push(format!(
                    "oracle failure: {m} {c} at {:.4} Hz (rel mag {:.3e}, phase {:.3e} deg; {count} failing points)",
                    r.f, r.rel_mag_error, r.phase_error_deg
                ));
            }
        }
    }
    lines.join("\n")
}

/// Counters and protocol values as recorded in a run manifest.
pub fn read_manifest(dir: &Path) -> Result<Value, CliError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        assert_eq!(parse_band("1:100").unwrap(), (1.0, 100.0));
        assert!(parse_band("100:1").is_err());
        assert!(parse_band("1-100").is_err());
        assert_eq!(parse_thresholds("0.02:2").unwrap(), (0.02, 2.0));
        assert!(parse_thresholds("0:2").is_err());
        assert_eq!(parse_methods("all").unwrap(), Method::ALL.to_vec());
        assert_eq!(
            parse_methods("sfra,era").unwrap(),
            vec![Method::Era, Method::Sfra]
        );
        assert_eq!(parse_methods("sem,bogus").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Failed(String::new()).exit_code(), 1);
        assert_eq!(CliError::Input(String::new()).exit_code(), 2);
        assert_eq!(CliError::Runtime(String::new()).exit_code(), 3);
    }
}
