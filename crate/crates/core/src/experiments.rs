//! Perturbation protocols: paired dq step experiments and the discrete
//! frequency sweep.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lti::{log_grid, FrequencyResponse};
use crate::plant::{simulate, Plant, SimulationRecord, SinePerturbation, StepPerturbation};
use crate::signals::{extract_phasor, remove_dc_offset, Axis, DqSignal, TimeSeries};

/// Environment variable that caps the sweep worker count.
pub const WORKERS_ENV: &str = "DQID_WORKERS";
/// Minimum pre-step baseline.
pub const MIN_BASELINE: f64 = 0.1;

/// Step of `g` times the axis voltage (or `|V_g|` when the axis voltage is
/// zero) applied at `t_step`; `record_length` seconds are kept after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInjection {
    pub axis: Axis,
    pub g: f64,
    pub t_step: f64,
    pub record_length: f64,
}

impl StepInjection {
    pub fn new(axis: Axis) -> Self {
        Self {
            axis,
            g: 0.01,
            t_step: MIN_BASELINE,
            record_length: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g > 0.0) || self.g > 0.05 {
            return Err(Error::invalid(
                "g",
                format!("step fraction must be in (0, 0.05], got {}", self.g),
            ));
        }
        if !(self.t_step >= MIN_BASELINE - 1e-12) {
            return Err(Error::invalid(
                "t_step",
                "at least 0.1 s of pre-step baseline is required",
            ));
        }
        if !(self.record_length > 0.0) || !self.record_length.is_finite() {
            return Err(Error::invalid("record_length", "must be positive"));
        }
        Ok(())
    }

    /// Step height in volts for `plant`.
    pub fn magnitude(&self, plant: &Plant) -> f64 {
        let v = plant.source_voltage();
        let axis_v = v[self.axis.index()].abs();
        let base = if axis_v > 0.0 {
            axis_v
        } else {
            v[0].hypot(v[1])
        };
        self.g * base
    }
}

/// Sinusoid of `amplitude_pp` volts peak-to-peak at `frequency`; the
/// phasor is measured over the final `cycles` periods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineInjection {
    pub axis: Axis,
    pub amplitude_pp: f64,
    pub frequency: f64,
    pub cycles: usize,
}

impl SineInjection {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_pp > 0.0) || !self.amplitude_pp.is_finite() {
            return Err(Error::invalid("amplitude_pp", "must be positive"));
        }
        if self.cycles == 0 {
            return Err(Error::invalid("cycles", "at least one cycle is required"));
        }
        if !(self.frequency > 0.0) || !self.frequency.is_finite() {
            return Err(Error::invalid("frequency", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub frequencies: Vec<f64>,
    pub amplitude_pp: f64,
    pub cycles: usize,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            frequencies: log_grid(0.1, 1000.0, 100),
            amplitude_pp: 0.1,
            cycles: 2,
        }
    }
}

impl SweepPlan {
    pub fn validate(&self, fs: f64) -> Result<()> {
        let f = &self.frequencies;
        if f.is_empty() || !(f[0] > 0.0) || f.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(
                "frequencies",
                "must be positive and strictly increasing",
            ));
        }
        let nyquist = 0.5 * fs;
        if let Some(&bad) = f.iter().find(|&&x| x >= nyquist) {
            return Err(Error::AboveNyquist {
                frequency: bad,
                nyquist,
            });
        }
        SineInjection {
            axis: Axis::D,
            amplitude_pp: self.amplitude_pp,
            frequency: f[0],
            cycles: self.cycles,
        }
        .validate()
    }

    pub fn injection(&self, index: usize, axis: Axis) -> SineInjection {
        SineInjection {
            axis,
            amplitude_pp: self.amplitude_pp,
            frequency: self.frequencies[index],
            cycles: self.cycles,
        }
    }
}

/// Two step experiments from the same equilibrium. Superscript (1) of the
/// admittance equations is `record_d`, superscript (2) is `record_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepExperimentPair {
    /// Raw records of the d-axis and q-axis steps.
    pub raw_d: SimulationRecord,
    pub raw_q: SimulationRecord,
    /// Same records with the pre-step mean removed from every signal.
    pub record_d: SimulationRecord,
    pub record_q: SimulationRecord,
    /// Step as a fraction of the axis voltage.
    pub g: f64,
    /// Step height in volts, per injected axis.
    pub g_abs: [f64; 2],
    /// First sample at which the step is applied.
    pub step_index: usize,
    pub dt: f64,
}

impl StepExperimentPair {
    pub fn record(&self, injected: Axis) -> &SimulationRecord {
        match injected {
            Axis::D => &self.record_d,
            Axis::Q => &self.record_q,
        }
    }

    pub fn raw(&self, injected: Axis) -> &SimulationRecord {
        match injected {
            Axis::D => &self.raw_d,
            Axis::Q => &self.raw_q,
        }
    }

    /// Baseline-free input and output from the step instant onward.
    pub fn response(&self, injected: Axis, measured: Axis) -> (TimeSeries, TimeSeries) {
        let rec = self.record(injected);
        let n = rec.len();
        let u = rec
            .v_g
            .axis(injected)
            .slice(self.step_index..n)
            .expect("step within record");
        let y = rec
            .i_o
            .axis(measured)
            .slice(self.step_index..n)
            .expect("step within record");
        (u, y)
    }
}

fn remove_baseline(
    rec: &SimulationRecord,
    window: std::ops::Range<usize>,
) -> Result<SimulationRecord> {
    let strip = |s: &DqSignal| -> Result<DqSignal> {
        DqSignal::new(
            remove_dc_offset(&s.d, window.clone())?,
            remove_dc_offset(&s.q, window.clone())?,
        )
    };
    Ok(SimulationRecord {
        v_g: strip(&rec.v_g)?,
        i_o: strip(&rec.i_o)?,
        steady_state_reached: rec.steady_state_reached,
        final_state: rec.final_state.clone(),
    })
}

/// Runs one step per axis from `equilibrium`. `template.axis` is ignored.
pub fn run_step_pair(
    plant: &Plant,
    equilibrium: &[f64],
    template: &StepInjection,
    fs: f64,
) -> Result<StepExperimentPair> {
    template.validate()?;
    let dt = 1.0 / fs;
    let step_index = (template.t_step * fs).round() as usize;
    if (step_index as f64) < (MIN_BASELINE * fs).round() {
        return Err(Error::invalid(
            "t_step",
            "at least 0.1 s of pre-step baseline is required",
        ));
    }
    let t_step = step_index as f64 * dt;
    let duration = t_step + template.record_length;
    let tolerance = 1e-6 * plant.nominal_current();

    let mut g_abs = [0.0; 2];
    let mut runs = Vec::with_capacity(2);
    for axis in Axis::BOTH {
        let inj = StepInjection { axis, ..*template };
        let magnitude = inj.magnitude(plant);
        g_abs[axis.index()] = magnitude;
        let step = StepPerturbation {
            axis,
            magnitude,
            t_step,
        };
        let raw = simulate(plant, &step, duration, fs, equilibrium)?;
        if raw.len() <= step_index + 1 {
            return Err(Error::NotEnoughData {
                required: step_index + 2,
                available: raw.len(),
            });
        }
        let drift = [&raw.i_o.d, &raw.i_o.q]
            .iter()
            .map(|s| {
                let w = &s.samples()[..step_index];
                w.iter().cloned().fold(f64::MIN, f64::max)
                    - w.iter().cloned().fold(f64::MAX, f64::min)
            })
            .fold(0.0, f64::max);
        if drift > tolerance {
            return Err(Error::NotAtEquilibrium {
                drift: drift / plant.nominal_current(),
            });
        }
        let record = remove_baseline(&raw, 0..step_index)?;
        runs.push((raw, record));
    }
    let (raw_q, record_q) = runs.pop().expect("two runs");
    let (raw_d, record_d) = runs.pop().expect("two runs");
    Ok(StepExperimentPair {
        raw_d,
        raw_q,
        record_d,
        record_q,
        g: template.g,
        g_abs,
        step_index,
        dt,
    })
}

/// Measured admittance points, minus sign applied.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepDataset {
    pub ydd: FrequencyResponse,
    pub ydq: FrequencyResponse,
    pub yqd: FrequencyResponse,
    pub yqq: FrequencyResponse,
    /// Number of simulations executed.
    pub simulations: usize,
}

impl SweepDataset {
    pub fn frequencies(&self) -> &[f64] {
        self.ydd.freqs()
    }
}

/// Record timing for one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepTiming {
    /// Samples per injection period; the record rate is `f * samples_per_period`.
    pub samples_per_period: usize,
    pub prelude_periods: usize,
    pub cycles: usize,
}

impl SweepTiming {
    pub fn sample_rate(&self, f: f64) -> f64 {
        f * self.samples_per_period as f64
    }

    pub fn duration(&self, f: f64) -> f64 {
        (self.prelude_periods + self.cycles) as f64 / f
    }
}

/// Chooses a coherent record for an injection at `f`: the sample period is
/// shortened to the nearest `1/(f P)` not above `1/fs`, and the settling
/// prelude is rounded up to whole periods.
pub fn sweep_timing(f: f64, fs: f64, cycles: usize, settle: f64) -> SweepTiming {
    let samples_per_period = (fs / f - 1e-9).ceil().max(1.0) as usize;
    let prelude = settle.max(2.0 / f);
    SweepTiming {
        samples_per_period,
        prelude_periods: (prelude * f - 1e-9).ceil() as usize,
        cycles,
    }
}

/// Settling time before phasors are measured: `max(5/omega_c, 10 tau)`
/// where `tau` is the slowest small-signal time constant.
pub fn settling_prelude(plant: &Plant, equilibrium: &[f64]) -> f64 {
    let slowest = plant
        .linearize(equilibrium)
        .poles()
        .iter()
        .map(|p| -p.re)
        .filter(|&r| r > 0.0)
        .fold(f64::INFINITY, f64::min);
    let tau = if slowest.is_finite() {
        10.0 / slowest
    } else {
        0.0
    };
    plant.settling_time().max(tau)
}

fn worker_count() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

/// Injects each planned frequency on each axis separately and forms the
/// four admittance ratios `Y_ij = -I_i / V_j`.
pub fn run_sweep(
    plant: &Plant,
    equilibrium: &[f64],
    plan: &SweepPlan,
    fs: f64,
) -> Result<SweepDataset> {
    plan.validate(fs)?;
    let settle = settling_prelude(plant, equilibrium);
    let jobs: Vec<(usize, Axis)> = (0..plan.frequencies.len())
        .flat_map(|i| Axis::BOTH.map(|a| (i, a)))
        .collect();
    let run = |&(i, axis): &(usize, Axis)| -> Result<[Complex64; 2]> {
        let inj = plan.injection(i, axis);
        measure_point(plant, equilibrium, &inj, fs, settle)
    };
    let results: Vec<Result<[Complex64; 2]>> = match worker_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(WORKERS_ENV, e.to_string()))?
            .install(|| jobs.par_iter().map(run).collect()),
        None => jobs.par_iter().map(run).collect(),
    };
    let mut cols = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for (&(_, axis), r) in jobs.iter().zip(results) {
        let [yd, yq] = r?;
        // column of the admittance matrix belonging to the injected axis
        let j = axis.index();
        cols[j].push(yd);
        cols[2 + j].push(yq);
    }
    let f = plan.frequencies.clone();
    let [ydd, ydq, yqd, yqq] = cols;
    Ok(SweepDataset {
        ydd: FrequencyResponse::new(f.clone(), ydd)?,
        ydq: FrequencyResponse::new(f.clone(), ydq)?,
        yqd: FrequencyResponse::new(f.clone(), yqd)?,
        yqq: FrequencyResponse::new(f, yqq)?,
        simulations: jobs.len(),
    })
}

/// Simulates one injection and returns `(-I_d/V, -I_q/V)`.
pub fn measure_point(
    plant: &Plant,
    equilibrium: &[f64],
    inj: &SineInjection,
    fs: f64,
    settle: f64,
) -> Result<[Complex64; 2]> {
    inj.validate()?;
    let f = inj.frequency;
    let timing = sweep_timing(f, fs, inj.cycles, settle);
    let rate = timing.sample_rate(f);
    let pert = SinePerturbation {
        axis: inj.axis,
        amplitude: 0.5 * inj.amplitude_pp,
        frequency: f,
    };
    let rec = simulate(plant, &pert, timing.duration(f), rate, equilibrium)?;
    let window = inj.cycles * timing.samples_per_period;
    let n = rec.len();
    if n < window {
        return Err(Error::NonCoherentWindow {
            periods: n as f64 / timing.samples_per_period as f64,
        });
    }
    let tail = |s: &TimeSeries| s.slice(n - window..n);
    let v = extract_phasor(&tail(rec.v_g.axis(inj.axis))?, f)?.value;
    let id = extract_phasor(&tail(&rec.i_o.d)?, f)?.value;
    let iq = extract_phasor(&tail(&rec.i_o.q)?, f)?.value;
    Ok([-id / v, -iq / v])
}

/// Expected sinusoid of the injection at time `t` (for plotting).
pub fn injection_value(inj: &SineInjection, t: f64) -> f64 {
    0.5 * inj.amplitude_pp * (2.0 * PI * inj.frequency * t).sin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{
        build_rl_plant, build_rl_reference_plant, find_equilibrium, rl_admittance, RlParameters,
    };

    fn rl(omega0: f64) -> (Plant, Vec<f64>) {
        let p = build_rl_plant(&RlParameters {
            r: 0.23,
            l: 318e-6,
            omega0,
            v_d: 380.0,
            v_q: 0.0,
        })
        .unwrap();
        let x = find_equilibrium(&p).unwrap();
        (p, x)
    }

    #[test]
    fn step_magnitude_uses_dq_axis_or_magnitude() {
        let p = build_rl_reference_plant(0.23, 318e-6, 377.0).unwrap();
        assert!((StepInjection::new(Axis::D).magnitude(&p) - 3.8).abs() < 1e-12);
        assert!((StepInjection::new(Axis::Q).magnitude(&p) - 3.8).abs() < 1e-12);
    }

    #[test]
    fn step_injection_guards() {
        let mut s = StepInjection::new(Axis::D);
        s.g = 0.0;
        assert!(s.validate().is_err());
        s.g = 0.06;
        assert!(s.validate().is_err());
        s.g = 0.01;
        s.t_step = 0.05;
        assert!(s.validate().is_err());
    }

    #[test]
    fn decoupled_branch_keeps_channels_separate() {
        let (p, x) = rl(0.0);
        let pair = run_step_pair(&p, &x, &StepInjection::new(Axis::D), 2500.0).unwrap();
        assert!(pair.record_d.i_o.q.samples().iter().all(|&v| v == 0.0));
        assert!(pair.record_q.i_o.d.samples().iter().all(|&v| v == 0.0));
        assert!(pair.record_d.i_o.d.samples().iter().any(|&v| v != 0.0));
        assert_eq!(pair.step_index, 250);
        let (u, _) = pair.response(Axis::D, Axis::D);
        assert!(u.samples().iter().all(|&v| (v - 3.8).abs() < 1e-9));
    }

    #[test]
    fn step_responses_scale_linearly() {
        let (p, x) = rl(377.0);
        let mut t = StepInjection::new(Axis::D);
        let a = run_step_pair(&p, &x, &t, 2500.0).unwrap();
        t.g = 0.02;
        let b = run_step_pair(&p, &x, &t, 2500.0).unwrap();
        for (ra, rb) in [(&a.record_d, &b.record_d), (&a.record_q, &b.record_q)] {
            for (sa, sb) in [(&ra.i_o.d, &rb.i_o.d), (&ra.i_o.q, &rb.i_o.q)] {
                let scale = sa.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (u, v) in sa.samples().iter().zip(sb.samples()) {
                    assert!((2.0 * u - v).abs() < 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn gfm_step_pair_couples_axes() {
        use crate::plant::{build_gfm_plant, GfmParameters, GridParameters};
        let p = build_gfm_plant(&GfmParameters::default(), &GridParameters::default()).unwrap();
        let x = find_equilibrium(&p).unwrap();
        let pair = run_step_pair(&p, &x, &StepInjection::new(Axis::D), 2500.0).unwrap();
        let peak = |s: &TimeSeries| s.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak(&pair.record_d.i_o.d) > 1e-3);
        assert!(peak(&pair.record_d.i_o.q) > 1e-3);
        assert_eq!(pair.record_d.len(), 2750);
    }

    #[test]
    fn timing_is_coherent() {
        for &f in &log_grid(0.1, 1000.0, 100) {
            let t = sweep_timing(f, 2500.0, 2, 0.1);
            assert!(t.sample_rate(f) >= 2500.0 * (1.0 - 1e-12));
            assert!(t.prelude_periods as f64 / f >= 2.0 / f - 1e-12);
            let n = (t.duration(f) * t.sample_rate(f)).round() as usize;
            assert_eq!(n, (t.prelude_periods + t.cycles) * t.samples_per_period);
        }
    }

    fn sparse_plan() -> SweepPlan {
        SweepPlan {
            frequencies: vec![1.0, 7.3, 42.0, 100.0, 640.0],
            ..SweepPlan::default()
        }
    }

    #[test]
    fn sweep_matches_closed_form() {
        let (p, x) = rl(377.0);
        let ds = run_sweep(&p, &x, &sparse_plan(), 2500.0).unwrap();
        assert_eq!(ds.simulations, 10);
        for (k, &f) in ds.frequencies().iter().enumerate() {
            let y = rl_admittance(0.23, 318e-6, 377.0, Complex64::new(0.0, 2.0 * PI * f));
            for (meas, exact) in [
                (ds.ydd.values()[k], y[(0, 0)]),
                (ds.ydq.values()[k], y[(0, 1)]),
                (ds.yqd.values()[k], y[(1, 0)]),
                (ds.yqq.values()[k], y[(1, 1)]),
            ] {
                assert!(
                    (meas - exact).norm() < 5e-3 * exact.norm(),
                    "f={f}: {meas} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn sweep_is_amplitude_independent_and_schedule_independent() {
        let (p, x) = rl(377.0);
        let mut plan = sparse_plan();
        plan.amplitude_pp = 0.05;
        let a = run_sweep(&p, &x, &plan, 2500.0).unwrap();
        plan.amplitude_pp = 0.2;
        let b = run_sweep(&p, &x, &plan, 2500.0).unwrap();
        for (u, v) in a.ydd.values().iter().zip(b.ydd.values()) {
            assert!((u - v).norm() <= 1e-6 * u.norm());
        }
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_sweep(&p, &x, &plan, 2500.0).unwrap());
        assert_eq!(serial, b);
    }

    #[test]
    fn sweep_rejects_bad_plans() {
        let (p, x) = rl(377.0);
        let mut plan = sparse_plan();
        plan.frequencies = vec![1.0, 1300.0];
        assert!(matches!(
            run_sweep(&p, &x, &plan, 2500.0),
            Err(Error::AboveNyquist { .. })
        ));
        plan.frequencies = vec![2.0, 1.0];
        assert!(run_sweep(&p, &x, &plan, 2500.0).is_err());
        plan = sparse_plan();
        plan.cycles = 0;
        assert!(run_sweep(&p, &x, &plan, 2500.0).is_err());
    }
}
