//! Python bindings: plants, step and sweep experiments, the three
//! identification methods and the command-line workflows.

use std::path::PathBuf;

use dqid_core::admittance::{self, Channel, DqAdmittance, Method};
use dqid_core::cli::{self, RunConfig};
use dqid_core::era::{era_admittance, EraOptions, EraOrder};
use dqid_core::experiments::{self, StepExperimentPair, StepInjection, SweepDataset, SweepPlan};
use dqid_core::lti::log_grid;
use dqid_core::plant::{self, GfmParameters, GridParameters};
use dqid_core::ratfit::FitOptions;
use dqid_core::signals::{self, Axis};
use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn axis(name: &str) -> PyResult<Axis> {
    match name {
        "d" => Ok(Axis::D),
        "q" => Ok(Axis::Q),
        other => Err(PyValueError::new_err(format!(
            "axis must be 'd' or 'q', got {other:?}"
        ))),
    }
}

/// Parameters from a dict keyed by the configuration symbols (`L_f`,
/// `R_grid`, ...); missing keys keep their defaults.
fn overrides<T: serde::de::DeserializeOwned>(d: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let mut map = serde_json::Map::new();
    if let Some(d) = d {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value: f64 = v.extract()?;
            map.insert(key, serde_json::Value::from(value));
        }
    }
    serde_json::from_value(serde_json::Value::Object(map)).map_err(err)
}

#[pyclass(name = "Plant", module = "dqid", frozen)]
struct PyPlant {
    inner: plant::Plant,
}

#[pymethods]
impl PyPlant {
    /// Grid-forming inverter on an RL grid with a series RL load.
    #[staticmethod]
    #[pyo3(signature = (gfm=None, grid=None))]
    fn gfm(gfm: Option<&Bound<'_, PyDict>>, grid: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let g: GfmParameters = overrides(gfm)?;
        let n: GridParameters = overrides(grid)?;
        Ok(Self {
            inner: plant::build_gfm_plant(&g, &n).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (r=0.23, l=318e-6, omega0=377.0))]
    fn rl_reference(r: f64, l: f64, omega0: f64) -> PyResult<Self> {
        Ok(Self {
            inner: plant::build_rl_reference_plant(r, l, omega0).map_err(err)?,
        })
    }

    #[getter]
    fn state_names(&self) -> Vec<&'static str> {
        self.inner.state_names().to_vec()
    }

    fn equilibrium(&self) -> PyResult<Vec<f64>> {
        plant::find_equilibrium(&self.inner).map_err(err)
    }

    /// Exact 2x2 admittance at `f` Hz when the plant has one.
    fn closed_form_admittance(&self, f: f64) -> Option<[[Complex64; 2]; 2]> {
        let s = Complex64::new(0.0, 2.0 * std::f64::consts::PI * f);
        self.inner
            .closed_form_admittance(s)
            .map(|m| [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]])
    }

    fn __repr__(&self) -> String {
        format!(
            "Plant({:?}, {} states)",
            self.inner.kind(),
            self.inner.state_dim()
        )
    }
}

/// Step records for injections on both axes.
#[pyclass(name = "StepPair", module = "dqid", frozen)]
struct PyStepPair {
    inner: StepExperimentPair,
}

#[pymethods]
impl PyStepPair {
    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    /// Injected voltage and measured current from the step instant.
    fn response(&self, injected: &str, measured: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (u, y) = self.inner.response(axis(injected)?, axis(measured)?);
        Ok((u.into_samples(), y.into_samples()))
    }
}

#[pyclass(name = "Sweep", module = "dqid", frozen)]
struct PySweep {
    inner: SweepDataset,
}

#[pymethods]
impl PySweep {
    #[getter]
    fn frequencies(&self) -> Vec<f64> {
        self.inner.frequencies().to_vec()
    }

    #[getter]
    fn simulations(&self) -> usize {
        self.inner.simulations
    }

    /// Measured points of one channel.
    fn channel(&self, name: &str) -> PyResult<Vec<Complex64>> {
        let fr = match name.parse::<Channel>().map_err(err)? {
            Channel::Ydd => &self.inner.ydd,
            Channel::Ydq => &self.inner.ydq,
            Channel::Yqd => &self.inner.yqd,
            Channel::Yqq => &self.inner.yqq,
        };
        Ok(fr.values().to_vec())
    }
}

/// Identified dq admittance.
#[pyclass(name = "Admittance", module = "dqid", frozen)]
struct PyAdmittance {
    inner: DqAdmittance,
}

#[pymethods]
impl PyAdmittance {
    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    fn value_at(&self, channel: &str, f: f64) -> PyResult<Complex64> {
        let c = channel.parse::<Channel>().map_err(err)?;
        self.inner.value_at(c, f).map_err(err)
    }

    fn matrix_at(&self, f: f64) -> PyResult<[[Complex64; 2]; 2]> {
        let m = self.inner.matrix_at(f).map_err(err)?;
        Ok([[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]])
    }

    /// Rows `(f_hz, channel, mag_db, phase_deg)` on `grid`.
    fn bode(&self, grid: Vec<f64>) -> PyResult<Vec<(f64, &'static str, f64, f64)>> {
        let t = admittance::bode(&self.inner, &grid).map_err(err)?;
        Ok(t.rows
            .iter()
            .map(|r| (r.f, r.channel.name(), r.mag_db, r.phase_deg))
            .collect())
    }

    fn bode_csv(&self, grid: Vec<f64>) -> PyResult<String> {
        Ok(admittance::bode(&self.inner, &grid).map_err(err)?.to_csv())
    }

    /// NRMSE fit percentage per channel, for fitted methods.
    fn fit_percent(&self) -> Vec<(&'static str, f64)> {
        self.inner
            .fits()
            .map(|(c, f)| (c.name(), f.nrmse_percent))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Admittance({})", self.inner.method)
    }
}

#[pyfunction]
#[pyo3(signature = (plant, g=0.01, fs=2500.0, record_length=1.0))]
fn run_step_pair(plant: &PyPlant, g: f64, fs: f64, record_length: f64) -> PyResult<PyStepPair> {
    let eq = plant::find_equilibrium(&plant.inner).map_err(err)?;
    let inj = StepInjection {
        g,
        record_length,
        ..StepInjection::new(Axis::D)
    };
    let inner = experiments::run_step_pair(&plant.inner, &eq, &inj, fs).map_err(err)?;
    Ok(PyStepPair { inner })
}

#[pyfunction]
#[pyo3(signature = (plant, frequencies, amplitude_pp=0.1, cycles=2, fs=2500.0))]
fn run_sweep(
    plant: &PyPlant,
    frequencies: Vec<f64>,
    amplitude_pp: f64,
    cycles: usize,
    fs: f64,
) -> PyResult<PySweep> {
    let eq = plant::find_equilibrium(&plant.inner).map_err(err)?;
    let plan = SweepPlan {
        frequencies,
        amplitude_pp,
        cycles,
    };
    let inner = experiments::run_sweep(&plant.inner, &eq, &plan, fs).map_err(err)?;
    Ok(PySweep { inner })
}

/// ERA on a step pair; `order=None` picks the largest singular value gap.
#[pyfunction]
#[pyo3(signature = (pair, order=Some(6), f_min=0.1))]
fn era(pair: &PyStepPair, order: Option<usize>, f_min: f64) -> PyResult<PyAdmittance> {
    let opts = EraOptions {
        order: order.map_or(EraOrder::Auto, EraOrder::Fixed),
        f_min,
    };
    Ok(PyAdmittance {
        inner: era_admittance(&pair.inner, &opts).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (pair, n_poles=4, f_min=0.1, f_max=1000.0))]
fn sem(pair: &PyStepPair, n_poles: usize, f_min: f64, f_max: f64) -> PyResult<PyAdmittance> {
    let opts = FitOptions {
        frequency_grid: log_grid(f_min, f_max, 200),
        ..FitOptions::new(n_poles)
    };
    Ok(PyAdmittance {
        inner: admittance::assemble_sem(&pair.inner, &opts).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (sweep, n_poles=4))]
fn sfra(sweep: &PySweep, n_poles: usize) -> PyResult<PyAdmittance> {
    Ok(PyAdmittance {
        inner: admittance::assemble_sfra(&sweep.inner, &FitOptions::new(n_poles)).map_err(err)?,
    })
}

/// Largest magnitude (dB) and phase (deg) deviation per channel in `band`.
#[pyfunction]
#[pyo3(signature = (a, b, band=(1.0, 100.0), points=200))]
fn compare(
    a: &PyAdmittance,
    b: &PyAdmittance,
    band: (f64, f64),
    points: usize,
) -> PyResult<Vec<(&'static str, f64, f64)>> {
    let r = admittance::compare(&a.inner, &b.inner, band, points).map_err(err)?;
    Ok(r.channels
        .iter()
        .map(|c| (c.channel.name(), c.max_dmag_db, c.max_dphase_deg))
        .collect())
}

#[pyfunction]
fn park(a: f64, b: f64, c: f64, theta: f64) -> (f64, f64) {
    signals::park(a, b, c, theta)
}

#[pyfunction]
fn inverse_park(d: f64, q: f64, theta: f64) -> (f64, f64, f64) {
    signals::inverse_park(d, q, theta)
}

/// Full run into `out`; `config` is TOML text. Returns the artifact names.
#[pyfunction]
#[pyo3(signature = (out, config=None, methods=None, band=(1.0, 100.0)))]
fn run(
    py: Python<'_>,
    out: PathBuf,
    config: Option<&str>,
    methods: Option<Vec<String>>,
    band: (f64, f64),
) -> PyResult<Vec<String>> {
    let cfg = match config {
        Some(text) => RunConfig::from_toml(text).map_err(err)?,
        None => RunConfig::default(),
    };
    let methods = match methods {
        Some(m) => m
            .iter()
            .map(|s| s.parse::<Method>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?,
        None => Method::ALL.to_vec(),
    };
    let outcome = py
        .detach(|| cli::cmd_run(&cfg, &methods, &out, band))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(outcome
        .artifacts
        .files
        .iter()
        .map(|f| f.name.clone())
        .collect())
}

/// Closed-form RL check of all methods; returns `(passed, table)`.
#[pyfunction]
#[pyo3(signature = (out, thresholds=(0.02, 2.0)))]
fn oracle(py: Python<'_>, out: PathBuf, thresholds: (f64, f64)) -> PyResult<(bool, String)> {
    let o = py
        .detach(|| cli::cmd_oracle(&out, thresholds, false))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((o.passed(), o.table()))
}

#[pymodule]
fn dqid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPlant>()?;
    m.add_class::<PyStepPair>()?;
    m.add_class::<PySweep>()?;
    m.add_class::<PyAdmittance>()?;
    m.add_function(wrap_pyfunction!(run_step_pair, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(era, m)?)?;
    m.add_function(wrap_pyfunction!(sem, m)?)?;
    m.add_function(wrap_pyfunction!(sfra, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(park, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_park, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    Ok(())
}
