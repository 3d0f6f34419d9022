//! Averaged dq-frame models of the admittance testbed and a fixed-step
//! simulator.
//!
//! The testbed is a droop-controlled grid-forming inverter (LC filter with
//! cascaded PI voltage/current loops) connected through a coupling branch to
//! a point of common coupling (PCC). A constant-impedance series R-L load sits
//! at the PCC, and a grid branch links the PCC to an ideal dq voltage source
//! that carries the perturbation. Electrical states are expressed in the grid
//! frame rotating at `omega_g`; the controller runs in the inverter frame,
//! whose angle relative to the grid is the state `delta`.
//!
//! The measured output is the coupling-branch current `i_o`, positive from
//! the inverter toward the grid.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::ContinuousStateSpace;
use crate::signals::{Axis, DqSignal, TimeSeries};

const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Minimum record rate accepted by [`simulate`].
pub const MIN_SAMPLE_RATE: f64 = 2500.0;

/// Inverter and controller parameters. Defaults are the testbed values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GfmParameters {
    #[serde(rename = "V_ni")]
    pub v_ni: f64,
    pub omega_ni: f64,
    #[serde(rename = "V_DC")]
    pub v_dc: f64,
    #[serde(rename = "m_P")]
    pub m_p: f64,
    #[serde(rename = "n_Q")]
    pub n_q: f64,
    #[serde(rename = "R_c")]
    pub r_c: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "R_f")]
    pub r_f: f64,
    #[serde(rename = "L_f")]
    pub l_f: f64,
    #[serde(rename = "C_f")]
    pub c_f: f64,
    #[serde(rename = "K_PV")]
    pub k_pv: f64,
    #[serde(rename = "K_IV")]
    pub k_iv: f64,
    #[serde(rename = "K_PC")]
    pub k_pc: f64,
    #[serde(rename = "K_IC")]
    pub k_ic: f64,
    pub omega_b: f64,
    /// Output-current feedforward gain.
    #[serde(rename = "F")]
    pub f: f64,
    /// Power low-pass cutoff.
    pub omega_c: f64,
}

impl Default for GfmParameters {
    fn default() -> Self {
        Self {
            v_ni: 381.0,
            omega_ni: 377.0,
            v_dc: 1000.0,
            m_p: 9.4e-5,
            n_q: 1.3e-3,
            r_c: 0.03,
            l_c: 1e-3,
            r_f: 0.001,
            l_f: 0.3e-3,
            c_f: 10e-6,
            k_pv: 0.1,
            k_iv: 420.0,
            k_pc: 15.0,
            k_ic: 20000.0,
            omega_b: 377.0,
            f: 0.75,
            omega_c: 37.7,
        }
    }
}

/// Grid branch, source and PCC load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParameters {
    pub omega_g: f64,
    #[serde(rename = "R_grid")]
    pub r_grid: f64,
    #[serde(rename = "L_grid")]
    pub l_grid: f64,
    #[serde(rename = "V_gd")]
    pub v_gd: f64,
    #[serde(rename = "V_gq")]
    pub v_gq: f64,
    #[serde(rename = "P_load")]
    pub p_load: f64,
    #[serde(rename = "Q_load")]
    pub q_load: f64,
}

impl Default for GridParameters {
    fn default() -> Self {
        Self {
            omega_g: 377.0,
            r_grid: 0.23,
            l_grid: 318e-6,
            v_gd: 380.0,
            v_gq: 0.0,
            p_load: 12e3,
            q_load: 12e3,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be positive, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("must be nonnegative, got {v}"),
        ))
    }
}

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(field, "must be finite"))
    }
}

impl GfmParameters {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("V_ni", self.v_ni),
            ("omega_ni", self.omega_ni),
            ("V_DC", self.v_dc),
            ("R_c", self.r_c),
            ("L_c", self.l_c),
            ("R_f", self.r_f),
            ("L_f", self.l_f),
            ("C_f", self.c_f),
            ("omega_b", self.omega_b),
            ("omega_c", self.omega_c),
        ] {
            positive(name, v)?;
        }
        for (name, v) in [
            ("m_P", self.m_p),
            ("n_Q", self.n_q),
            ("K_PV", self.k_pv),
            ("K_IV", self.k_iv),
            ("K_PC", self.k_pc),
            ("K_IC", self.k_ic),
            ("F", self.f),
        ] {
            nonnegative(name, v)?;
        }
        if self.k_iv == 0.0 {
            return Err(Error::invalid("K_IV", "integral gain must be positive"));
        }
        if self.k_ic == 0.0 {
            return Err(Error::invalid("K_IC", "integral gain must be positive"));
        }
        if self.omega_c >= self.omega_b {
            return Err(Error::invalid("omega_c", "must be below omega_b"));
        }
        Ok(())
    }
}

impl GridParameters {
    pub fn validate(&self) -> Result<()> {
        positive("omega_g", self.omega_g)?;
        positive("R_grid", self.r_grid)?;
        positive("L_grid", self.l_grid)?;
        finite("V_gd", self.v_gd)?;
        finite("V_gq", self.v_gq)?;
        nonnegative("P_load", self.p_load)?;
        nonnegative("Q_load", self.q_load)?;
        Ok(())
    }

    fn nominal_voltage(&self) -> f64 {
        self.v_gd.hypot(self.v_gq)
    }
}

/// Series R-L load sized to draw `P_load + j Q_load` at the nominal source voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Load {
    r: f64,
    l: f64,
}

impl Load {
    fn size(p: f64, q: f64, v: f64, omega: f64) -> Result<Self> {
        let s2 = p * p + q * q;
        if s2 == 0.0 {
            return Err(Error::invalid(
                "P_load",
                "the constant-impedance load needs P_load or Q_load to be positive",
            ));
        }
        if !(v > 0.0) {
            return Err(Error::invalid(
                "V_gd",
                "load sizing needs a nonzero source voltage",
            ));
        }
        Ok(Self {
            r: v * v * p / s2,
            l: v * v * q / s2 / omega,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GfmModel {
    gfm: GfmParameters,
    grid: GridParameters,
    load: Load,
    v_base: f64,
    i_base: f64,
    s_base: f64,
}

/// Series R-L branch fed by the source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlParameters {
    pub r: f64,
    pub l: f64,
    pub omega0: f64,
    pub v_d: f64,
    pub v_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantKind {
    GfmTestbed,
    RlReference,
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Gfm(Box<GfmModel>),
    Rl(RlParameters),
}

/// Integrator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Upper bound on the RK4 step; the actual step divides the record period.
    pub max_step: f64,
    /// Peak-to-peak tolerance (fraction of nominal current) for the trailing
    /// 0.1 s steady-state check.
    pub steady_tolerance: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            max_step: 1.0 / 25_000.0,
            steady_tolerance: 1e-6,
        }
    }
}

/// A testbed model with a dq voltage perturbation input and the dq PCC
/// current output.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    model: Model,
    pub options: SimOptions,
}

/// Index of each GFM testbed state.
pub mod gfm_state {
    pub const DELTA: usize = 0;
    pub const P: usize = 1;
    pub const Q: usize = 2;
    pub const PHI_D: usize = 3;
    pub const PHI_Q: usize = 4;
    pub const GAMMA_D: usize = 5;
    pub const GAMMA_Q: usize = 6;
    pub const IL_D: usize = 7;
    pub const IL_Q: usize = 8;
    pub const VO_D: usize = 9;
    pub const VO_Q: usize = 10;
    pub const IO_D: usize = 11;
    pub const IO_Q: usize = 12;
    pub const IG_D: usize = 13;
    pub const IG_Q: usize = 14;
    pub const COUNT: usize = 15;
}

const GFM_STATE_NAMES: [&str; gfm_state::COUNT] = [
    "delta", "P", "Q", "phi_d", "phi_q", "gamma_d", "gamma_q", "i_ld", "i_lq", "v_od", "v_oq",
    "i_od", "i_oq", "i_gd", "i_gq",
];
const RL_STATE_NAMES: [&str; 2] = ["i_d", "i_q"];

/// Builds the grid-forming inverter testbed.
pub fn build_gfm_plant(gfm: &GfmParameters, grid: &GridParameters) -> Result<Plant> {
    gfm.validate()?;
    grid.validate()?;
    let v_base = if grid.nominal_voltage() > 0.0 {
        grid.nominal_voltage()
    } else {
        gfm.v_ni
    };
    let load = Load::size(grid.p_load, grid.q_load, v_base, grid.omega_g)?;
    let s_base = grid.p_load.hypot(grid.q_load);
    Ok(Plant {
        model: Model::Gfm(Box::new(GfmModel {
            gfm: *gfm,
            grid: *grid,
            load,
            v_base,
            i_base: s_base / v_base,
            s_base,
        })),
        options: SimOptions::default(),
    })
}

/// Builds the two-state R-L reference branch driven by the default source
/// (`380 + j0` V).
pub fn build_rl_reference_plant(r: f64, l: f64, omega0: f64) -> Result<Plant> {
    build_rl_plant(&RlParameters {
        r,
        l,
        omega0,
        v_d: 380.0,
        v_q: 0.0,
    })
}

pub fn build_rl_plant(params: &RlParameters) -> Result<Plant> {
    positive("R", params.r)?;
    positive("L", params.l)?;
    nonnegative("omega0", params.omega0)?;
    finite("V_d", params.v_d)?;
    finite("V_q", params.v_q)?;
    Ok(Plant {
        model: Model::Rl(*params),
        options: SimOptions::default(),
    })
}

/// Closed-form admittance `[[R + sL, -w0 L], [w0 L, R + sL]]^-1`.
pub fn rl_admittance(r: f64, l: f64, omega0: f64, s: Complex64) -> Matrix2<Complex64> {
    let z = Complex64::new(r, 0.0) + s * l;
    let x = Complex64::new(omega0 * l, 0.0);
    let det = z * z + x * x;
    Matrix2::new(z / det, x / det, -x / det, z / det)
}

/// Input signal added to the source voltage.
pub trait Perturbation: Sync {
    /// `(dv_gd, dv_gq)` at time `t`.
    fn value(&self, t: f64) -> [f64; 2];

    /// Piecewise-constant signals switch only on sample instants and are
    /// held over each integrator step (zero-order hold); other signals are
    /// evaluated at every Runge-Kutta stage.
    fn held(&self) -> bool {
        false
    }
}

impl<F: Fn(f64) -> [f64; 2] + Sync> Perturbation for F {
    fn value(&self, t: f64) -> [f64; 2] {
        self(t)
    }
}

pub struct NoPerturbation;

impl Perturbation for NoPerturbation {
    fn value(&self, _t: f64) -> [f64; 2] {
        [0.0, 0.0]
    }

    fn held(&self) -> bool {
        true
    }
}

/// Step of `magnitude` volts on one axis at `t_step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPerturbation {
    pub axis: Axis,
    pub magnitude: f64,
    pub t_step: f64,
}

impl Perturbation for StepPerturbation {
    fn value(&self, t: f64) -> [f64; 2] {
        let mut v = [0.0; 2];
        if t >= self.t_step {
            v[self.axis.index()] = self.magnitude;
        }
        v
    }

    fn held(&self) -> bool {
        true
    }
}

/// `amplitude * sin(2 pi f t)` on one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinePerturbation {
    pub axis: Axis,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Perturbation for SinePerturbation {
    fn value(&self, t: f64) -> [f64; 2] {
        let mut v = [0.0; 2];
        v[self.axis.index()] = self.amplitude * (2.0 * PI * self.frequency * t).sin();
        v
    }
}

/// Sampled source voltage and PCC current of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRecord {
    pub v_g: DqSignal,
    pub i_o: DqSignal,
    pub steady_state_reached: bool,
    pub final_state: Vec<f64>,
}

impl SimulationRecord {
    pub fn dt(&self) -> f64 {
        self.v_g.dt()
    }

    pub fn len(&self) -> usize {
        self.v_g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_g.is_empty()
    }
}

/// Active power flows at a state (unperturbed source). All powers use
/// `p = v_d i_d + v_q i_q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerBalance {
    pub source: f64,
    pub inverter: f64,
    pub load: f64,
    pub losses: f64,
}

impl Plant {
    pub fn kind(&self) -> PlantKind {
        match self.model {
            Model::Gfm(_) => PlantKind::GfmTestbed,
            Model::Rl(_) => PlantKind::RlReference,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.model {
            Model::Gfm(_) => gfm_state::COUNT,
            Model::Rl(_) => 2,
        }
    }

    pub fn state_names(&self) -> &'static [&'static str] {
        match self.model {
            Model::Gfm(_) => &GFM_STATE_NAMES,
            Model::Rl(_) => &RL_STATE_NAMES,
        }
    }

    pub fn with_options(mut self, options: SimOptions) -> Self {
        self.options = options;
        self
    }

    pub fn gfm_parameters(&self) -> Option<(&GfmParameters, &GridParameters)> {
        match &self.model {
            Model::Gfm(m) => Some((&m.gfm, &m.grid)),
            Model::Rl(_) => None,
        }
    }

    pub fn rl_parameters(&self) -> Option<&RlParameters> {
        match &self.model {
            Model::Rl(p) => Some(p),
            Model::Gfm(_) => None,
        }
    }

    /// Unperturbed source voltage `(v_gd, v_gq)`.
    pub fn source_voltage(&self) -> [f64; 2] {
        match &self.model {
            Model::Gfm(m) => [m.grid.v_gd, m.grid.v_gq],
            Model::Rl(p) => [p.v_d, p.v_q],
        }
    }

    /// Current scale used for tolerances.
    pub fn nominal_current(&self) -> f64 {
        match &self.model {
            Model::Gfm(m) => m.i_base,
            Model::Rl(p) => {
                let i = p.v_d.hypot(p.v_q) / p.r.hypot(p.omega0 * p.l);
                if i > 0.0 {
                    i
                } else {
                    1.0
                }
            }
        }
    }

    /// Time for the slowest designed loop to settle: `5/omega_c` for the
    /// inverter, `5 L/R` for the reference branch.
    pub fn settling_time(&self) -> f64 {
        match &self.model {
            Model::Gfm(m) => 5.0 / m.gfm.omega_c,
            Model::Rl(p) => 5.0 * p.l / p.r,
        }
    }

    /// Closed-form admittance of the reference branch at `s`.
    pub fn closed_form_admittance(&self, s: Complex64) -> Option<Matrix2<Complex64>> {
        match &self.model {
            Model::Rl(p) => Some(rl_admittance(p.r, p.l, p.omega0, s)),
            Model::Gfm(_) => None,
        }
    }

    /// State derivative with the source at nominal plus `dv`.
    pub fn derivative(&self, x: &[f64], dv: [f64; 2], dx: &mut [f64]) {
        match &self.model {
            Model::Gfm(m) => m.derivative(x, dv, dx),
            Model::Rl(p) => {
                let i = Complex64::new(x[0], x[1]);
                let v = Complex64::new(p.v_d + dv[0], p.v_q + dv[1]);
                let di = (v - p.r * i - J * p.omega0 * p.l * i) / p.l;
                dx[0] = di.re;
                dx[1] = di.im;
            }
        }
    }

    /// PCC current `(i_od, i_oq)`, inverter toward grid.
    pub fn output(&self, x: &[f64]) -> [f64; 2] {
        match &self.model {
            Model::Gfm(_) => [x[gfm_state::IO_D], x[gfm_state::IO_Q]],
            // The branch current flows out of the source; seen from the
            // device side it flows toward the grid with opposite sign.
            Model::Rl(_) => [-x[0], -x[1]],
        }
    }

    /// Per-state derivative scales: `f_i / scale_i` is the per-unit residual.
    pub fn rate_scale(&self) -> Vec<f64> {
        match &self.model {
            Model::Gfm(m) => m.rate_scale(),
            Model::Rl(p) => {
                let v = p.v_d.hypot(p.v_q).max(1.0);
                vec![v / p.l; 2]
            }
        }
    }

    /// Per-state magnitude scales.
    pub fn state_scale(&self) -> Vec<f64> {
        match &self.model {
            Model::Gfm(m) => m.state_scale(),
            Model::Rl(_) => vec![self.nominal_current(); 2],
        }
    }

    /// Starting point for the equilibrium search.
    pub fn initial_guess(&self) -> Vec<f64> {
        match &self.model {
            Model::Gfm(m) => m.initial_guess(),
            Model::Rl(p) => {
                let i = Complex64::new(p.v_d, p.v_q) / Complex64::new(p.r, p.omega0 * p.l);
                vec![i.re, i.im]
            }
        }
    }

    pub fn power_balance(&self, x: &[f64]) -> Option<PowerBalance> {
        match &self.model {
            Model::Gfm(m) => Some(m.power_balance(x)),
            Model::Rl(_) => None,
        }
    }

    /// Per-unit residual `max |f_i(x) / scale_i|` with no perturbation.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let mut dx = vec![0.0; self.state_dim()];
        self.derivative(x, [0.0, 0.0], &mut dx);
        dx.iter()
            .zip(self.rate_scale())
            .map(|(d, s)| (d / s).abs())
            .fold(0.0, f64::max)
    }

    /// Small-signal model around `x` from `(dv_gd, dv_gq)` to `(i_od, i_oq)`,
    /// by central differences.
    pub fn linearize(&self, x: &[f64]) -> ContinuousStateSpace {
        let n = self.state_dim();
        let scale = self.state_scale();
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut c = DMatrix::<f64>::zeros(2, n);
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        let mut xp = x.to_vec();
        for j in 0..n {
            let h = 1e-6 * (x[j].abs() + scale[j]);
            xp[j] = x[j] + h;
            self.derivative(&xp, [0.0; 2], &mut fp);
            let yp = self.output(&xp);
            xp[j] = x[j] - h;
            self.derivative(&xp, [0.0; 2], &mut fm);
            let ym = self.output(&xp);
            xp[j] = x[j];
            for i in 0..n {
                a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
            for i in 0..2 {
                c[(i, j)] = (yp[i] - ym[i]) / (2.0 * h);
            }
        }
        let mut b = DMatrix::<f64>::zeros(n, 2);
        let hv = 1e-4
            * self.source_voltage()[0]
                .hypot(self.source_voltage()[1])
                .max(1.0);
        for j in 0..2 {
            let mut dv = [0.0; 2];
            dv[j] = hv;
            self.derivative(x, dv, &mut fp);
            dv[j] = -hv;
            self.derivative(x, dv, &mut fm);
            for i in 0..n {
                b[(i, j)] = (fp[i] - fm[i]) / (2.0 * hv);
            }
        }
        ContinuousStateSpace::new(a, b, c, DMatrix::zeros(2, 2)).expect("consistent dimensions")
    }
}

impl GfmModel {
    fn state_scale(&self) -> Vec<f64> {
        use gfm_state::*;
        let g = &self.gfm;
        let mut s = vec![0.0; COUNT];
        s[DELTA] = 1.0;
        s[P] = self.s_base;
        s[Q] = self.s_base;
        s[PHI_D] = self.i_base / g.k_iv;
        s[PHI_Q] = self.i_base / g.k_iv;
        s[GAMMA_D] = self.v_base / g.k_ic;
        s[GAMMA_Q] = self.v_base / g.k_ic;
        for i in [IL_D, IL_Q, IO_D, IO_Q, IG_D, IG_Q] {
            s[i] = self.i_base;
        }
        s[VO_D] = self.v_base;
        s[VO_Q] = self.v_base;
        s
    }

    fn rate_scale(&self) -> Vec<f64> {
        use gfm_state::*;
        let g = &self.gfm;
        let mut s = vec![0.0; COUNT];
        s[DELTA] = self.grid.omega_g;
        s[P] = g.omega_c * self.s_base;
        s[Q] = g.omega_c * self.s_base;
        s[PHI_D] = self.v_base;
        s[PHI_Q] = self.v_base;
        s[GAMMA_D] = self.i_base;
        s[GAMMA_Q] = self.i_base;
        s[IL_D] = self.v_base / g.l_f;
        s[IL_Q] = self.v_base / g.l_f;
        s[VO_D] = self.i_base / g.c_f;
        s[VO_Q] = self.i_base / g.c_f;
        s[IO_D] = self.v_base / g.l_c;
        s[IO_Q] = self.v_base / g.l_c;
        s[IG_D] = self.v_base / self.grid.l_grid;
        s[IG_Q] = self.v_base / self.grid.l_grid;
        s
    }

    fn pcc_voltage(&self, vo: Complex64, io: Complex64, ig: Complex64, vg: Complex64) -> Complex64 {
        let (g, n, ld) = (&self.gfm, &self.grid, &self.load);
        if ld.l > 0.0 {
            // Three inductive branches meet at the PCC, so the node voltage is
            // fixed by requiring the load current to stay i_o + i_g.
            let num = (vo - g.r_c * io) / g.l_c
                + (vg - n.r_grid * ig) / n.l_grid
                + ld.r * (io + ig) / ld.l;
            num / (1.0 / g.l_c + 1.0 / n.l_grid + 1.0 / ld.l)
        } else {
            ld.r * (io + ig)
        }
    }

    fn derivative(&self, x: &[f64], dv: [f64; 2], dx: &mut [f64]) {
        use gfm_state::*;
        let (g, n) = (&self.gfm, &self.grid);
        let delta = x[DELTA];
        let phi = Complex64::new(x[PHI_D], x[PHI_Q]);
        let gamma = Complex64::new(x[GAMMA_D], x[GAMMA_Q]);
        let il = Complex64::new(x[IL_D], x[IL_Q]);
        let vo = Complex64::new(x[VO_D], x[VO_Q]);
        let io = Complex64::new(x[IO_D], x[IO_Q]);
        let ig = Complex64::new(x[IG_D], x[IG_Q]);
        let vg = Complex64::new(n.v_gd + dv[0], n.v_gq + dv[1]);

        // grid frame -> inverter frame
        let rot = Complex64::from_polar(1.0, -delta);
        let vo_c = vo * rot;
        let io_c = io * rot;
        let il_c = il * rot;

        let omega = g.omega_ni - g.m_p * x[P];
        let v_ref = Complex64::new(g.v_ni - g.n_q * x[Q], 0.0);
        let il_ref =
            g.f * io_c + J * g.omega_b * g.c_f * vo_c + g.k_pv * (v_ref - vo_c) + g.k_iv * phi;
        let mut vi_c = J * g.omega_b * g.l_f * il_c + g.k_pc * (il_ref - il_c) + g.k_ic * gamma;
        let limit = 0.5 * g.v_dc;
        let mag = vi_c.norm();
        if mag > limit {
            vi_c *= limit / mag;
        }
        let vi = vi_c * rot.conj();

        let p = vo.re * io.re + vo.im * io.im;
        let q = vo.im * io.re - vo.re * io.im;
        dx[DELTA] = omega - n.omega_g;
        dx[P] = g.omega_c * (p - x[P]);
        dx[Q] = g.omega_c * (q - x[Q]);
        let dphi = v_ref - vo_c;
        dx[PHI_D] = dphi.re;
        dx[PHI_Q] = dphi.im;
        let dgamma = il_ref - il_c;
        dx[GAMMA_D] = dgamma.re;
        dx[GAMMA_Q] = dgamma.im;

        let jw = J * n.omega_g;
        let vp = self.pcc_voltage(vo, io, ig, vg);
        let dil = (vi - vo - g.r_f * il - jw * g.l_f * il) / g.l_f;
        let dvo = (il - io - jw * g.c_f * vo) / g.c_f;
        let dio = (vo - vp - g.r_c * io - jw * g.l_c * io) / g.l_c;
        let dig = (vg - vp - n.r_grid * ig - jw * n.l_grid * ig) / n.l_grid;
        dx[IL_D] = dil.re;
        dx[IL_Q] = dil.im;
        dx[VO_D] = dvo.re;
        dx[VO_Q] = dvo.im;
        dx[IO_D] = dio.re;
        dx[IO_Q] = dio.im;
        dx[IG_D] = dig.re;
        dx[IG_Q] = dig.im;
    }

    /// Phasor solution with the capacitor held at `V_ni` in phase with the
    /// grid, plus controller states consistent with it.
    fn initial_guess(&self) -> Vec<f64> {
        use gfm_state::*;
        let (g, n, ld) = (&self.gfm, &self.grid, &self.load);
        let jw = J * n.omega_g;
        let vo = Complex64::new(g.v_ni, 0.0);
        let vg = Complex64::new(n.v_gd, n.v_gq);
        let zc = g.r_c + jw * g.l_c;
        let zg = n.r_grid + jw * n.l_grid;
        let zl = ld.r + jw * ld.l;
        // node equation at the PCC
        let vp = (vo / zc + vg / zg) / (1.0 / zc + 1.0 / zg + 1.0 / zl);
        let io = (vo - vp) / zc;
        let ig = (vg - vp) / zg;
        let il = io + jw * g.c_f * vo;
        let vi = vo + (g.r_f + jw * g.l_f) * il;
        let q = vo.im * io.re - vo.re * io.im;
        let v_ref = Complex64::new(g.v_ni - g.n_q * q, 0.0);
        let gamma = (vi - J * g.omega_b * g.l_f * il) / g.k_ic;
        let phi = (il - g.f * io - J * g.omega_b * g.c_f * vo - g.k_pv * (v_ref - vo)) / g.k_iv;
        let mut x = vec![0.0; COUNT];
        x[DELTA] = 0.0;
        x[P] = vo.re * io.re + vo.im * io.im;
        x[Q] = q;
        for (i, z) in [
            (PHI_D, phi),
            (GAMMA_D, gamma),
            (IL_D, il),
            (VO_D, vo),
            (IO_D, io),
            (IG_D, ig),
        ] {
            x[i] = z.re;
            x[i + 1] = z.im;
        }
        x
    }

    fn power_balance(&self, x: &[f64]) -> PowerBalance {
        use gfm_state::*;
        let (g, n, ld) = (&self.gfm, &self.grid, &self.load);
        let vo = Complex64::new(x[VO_D], x[VO_Q]);
        let io = Complex64::new(x[IO_D], x[IO_Q]);
        let ig = Complex64::new(x[IG_D], x[IG_Q]);
        let vg = Complex64::new(n.v_gd, n.v_gq);
        let il = io + ig;
        PowerBalance {
            source: (vg * ig.conj()).re,
            inverter: (vo * io.conj()).re,
            load: ld.r * il.norm_sqr(),
            losses: g.r_c * io.norm_sqr() + n.r_grid * ig.norm_sqr(),
        }
    }
}

fn rk4_step(
    plant: &Plant,
    pert: &dyn Perturbation,
    t: f64,
    h: f64,
    x: &mut [f64],
    work: &mut [Vec<f64>; 5],
) {
    let n = x.len();
    let [k1, k2, k3, k4, tmp] = work;
    let held = pert.held();
    let u_mid = pert.value(t + 0.5 * h);
    let (u0, u1, u2) = if held {
        (u_mid, u_mid, u_mid)
    } else {
        (pert.value(t), u_mid, pert.value(t + h))
    };
    plant.derivative(x, u0, k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    plant.derivative(tmp, u1, k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    plant.derivative(tmp, u1, k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    plant.derivative(tmp, u2, k4);
    for i in 0..n {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Integrates `plant` from `initial_state` for `duration` seconds and
/// samples source voltage and PCC current at `fs`.
///
/// The record holds `round(duration * fs)` samples at `t = k / fs`. RK4 runs
/// at the largest step not above `plant.options.max_step` that divides the
/// record period, so identical arguments give bit-identical records.
pub fn simulate(
    plant: &Plant,
    perturbation: &dyn Perturbation,
    duration: f64,
    fs: f64,
    initial_state: &[f64],
) -> Result<SimulationRecord> {
    if !(fs >= MIN_SAMPLE_RATE * (1.0 - 1e-12)) || !fs.is_finite() {
        return Err(Error::invalid(
            "fs",
            format!("sample rate must be at least {MIN_SAMPLE_RATE} Hz, got {fs}"),
        ));
    }
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::invalid("duration", "must be positive"));
    }
    let n = plant.state_dim();
    if initial_state.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} entries, plant has {n} states",
            initial_state.len()
        )));
    }
    let dt = 1.0 / fs;
    let samples = (duration * fs).round().max(1.0) as usize;
    let substeps = (dt / plant.options.max_step - 1e-9).ceil().max(1.0) as usize;
    let h = dt / substeps as f64;

    let base = plant.source_voltage();
    let scale = plant.state_scale();
    let bound: Vec<f64> = scale
        .iter()
        .zip(initial_state)
        .map(|(s, x0)| 1e6 * (s + x0.abs()))
        .collect();

    let mut x = initial_state.to_vec();
    let mut work: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    let mut series: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(samples));
    for k in 0..samples {
        let t = k as f64 * dt;
        let u = perturbation.value(t);
        let y = plant.output(&x);
        series[0].push(base[0] + u[0]);
        series[1].push(base[1] + u[1]);
        series[2].push(y[0]);
        series[3].push(y[1]);
        if k + 1 == samples {
            break;
        }
        for j in 0..substeps {
            let ts = (k * substeps + j) as f64 * h;
            rk4_step(plant, perturbation, ts, h, &mut x, &mut work);
        }
        if x.iter()
            .zip(&bound)
            .any(|(v, b)| !v.is_finite() || v.abs() > *b)
        {
            return Err(Error::SimulationDiverged { t: t + dt });
        }
    }

    let [vd, vq, id, iq] = series;
    let tail = ((0.1 * fs).round() as usize).clamp(1, samples);
    let tol = plant.options.steady_tolerance * plant.nominal_current();
    let ptp = |s: &[f64]| {
        let w = &s[s.len() - tail..];
        w.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - w.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let steady = ptp(&id) < tol && ptp(&iq) < tol;
    Ok(SimulationRecord {
        v_g: DqSignal::new(TimeSeries::new(vd, dt)?, TimeSeries::new(vq, dt)?)?,
        i_o: DqSignal::new(TimeSeries::new(id, dt)?, TimeSeries::new(iq, dt)?)?,
        steady_state_reached: steady,
        final_state: x,
    })
}

/// Steady operating point: simulate toward quiescence, then polish with
/// Newton iterations on the per-unit residual.
pub fn find_equilibrium(plant: &Plant) -> Result<Vec<f64>> {
    let mut x = plant.initial_guess();
    if let Some(sol) = newton(plant, &x) {
        return Ok(sol);
    }
    let mut residual = plant.residual(&x);
    for _ in 0..4 {
        let duration = (4.0 * plant.settling_time()).clamp(0.05, 5.0);
        let rec = simulate(plant, &NoPerturbation, duration, MIN_SAMPLE_RATE, &x)?;
        x = rec.final_state;
        if let Some(sol) = newton(plant, &x) {
            return Ok(sol);
        }
        residual = plant.residual(&x);
    }
    Err(Error::EquilibriumNotFound { residual })
}

fn newton(plant: &Plant, start: &[f64]) -> Option<Vec<f64>> {
    let n = plant.state_dim();
    let rate = plant.rate_scale();
    let scaled_residual = |x: &[f64], out: &mut [f64]| {
        plant.derivative(x, [0.0; 2], out);
        for (o, s) in out.iter_mut().zip(&rate) {
            *o /= s;
        }
    };
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut x = start.to_vec();
    let mut r = vec![0.0; n];
    scaled_residual(&x, &mut r);
    let mut best = norm(&r);
    for _ in 0..60 {
        if best < 1e-13 {
            break;
        }
        let lin = plant.linearize(&x);
        let jac = DMatrix::from_fn(n, n, |i, j| lin.a[(i, j)] / rate[i]);
        let rhs = DMatrix::from_column_slice(n, 1, &r);
        let step = jac.lu().solve(&rhs)?;
        let mut lambda = 1.0;
        let mut improved = false;
        let mut trial = vec![0.0; n];
        let mut rt = vec![0.0; n];
        for _ in 0..30 {
            for i in 0..n {
                trial[i] = x[i] - lambda * step[i];
            }
            scaled_residual(&trial, &mut rt);
            let nt = norm(&rt);
            if nt.is_finite() && nt < best {
                x.copy_from_slice(&trial);
                r.copy_from_slice(&rt);
                best = nt;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (best < 1e-9).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gfm() -> Plant {
        build_gfm_plant(&GfmParameters::default(), &GridParameters::default()).unwrap()
    }

    #[test]
    fn parameter_guards() {
        let bad = GfmParameters {
            l_f: 0.0,
            ..Default::default()
        };
        match build_gfm_plant(&bad, &GridParameters::default()) {
            Err(Error::InvalidParameters { field, .. }) => assert_eq!(field, "L_f"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = GfmParameters {
            omega_c: 400.0,
            ..Default::default()
        };
        assert!(build_gfm_plant(&bad, &GridParameters::default()).is_err());
        assert!(build_rl_reference_plant(0.0, 1e-3, 377.0).is_err());
        assert!(build_rl_reference_plant(0.2, -1e-3, 377.0).is_err());
    }

    #[test]
    fn table_values_build_and_settle() {
        let p = gfm();
        assert_eq!(p.state_dim(), gfm_state::COUNT);
        let x = find_equilibrium(&p).unwrap();
        assert!(p.residual(&x) < 1e-9);
        let poles = p.linearize(&x).poles();
        assert!(poles.iter().all(|s| s.re < 0.0), "unstable: {poles:?}");
    }

    #[test]
    fn droop_locks_frequency_and_inverter_carries_reactive_power() {
        let p = gfm();
        let x = find_equilibrium(&p).unwrap();
        // omega_ni equals omega_g, so the droop law settles at zero filtered power.
        assert!(x[gfm_state::P].abs() < 1e-6);
        assert!(x[gfm_state::Q] > 0.0);
        let bal = p.power_balance(&x).unwrap();
        let lhs = bal.source + bal.inverter;
        let rhs = bal.load + bal.losses;
        assert!((lhs - rhs).abs() < 1e-6 * rhs.abs(), "{bal:?}");
    }

    #[test]
    fn zero_droop_locks_to_nominal_frequency() {
        let g = GfmParameters {
            m_p: 0.0,
            ..Default::default()
        };
        let p = build_gfm_plant(&g, &GridParameters::default()).unwrap();
        let x = find_equilibrium(&p).unwrap();
        let mut dx = vec![0.0; p.state_dim()];
        p.derivative(&x, [0.0; 2], &mut dx);
        assert!(dx[gfm_state::DELTA].abs() < 1e-9);
    }

    #[test]
    fn rl_closed_forms() {
        let (r, l, w) = (0.23, 318e-6, 377.0);
        let s = Complex64::new(0.0, 2.0 * PI * 10.0);
        let y = rl_admittance(r, l, w, s);
        let z = Matrix2::new(
            r + s * l,
            Complex64::new(-w * l, 0.0),
            Complex64::new(w * l, 0.0),
            r + s * l,
        );
        let prod = z * y;
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - e).norm() < 1e-12);
            }
        }
        let y0 = rl_admittance(r, l, w, Complex64::new(0.0, 0.0));
        let z0 = Matrix2::new(r, -w * l, w * l, r).map(|v| Complex64::new(v, 0.0));
        assert!(((z0 * y0)[(0, 1)]).norm() < 1e-12);
        let yd = rl_admittance(r, l, 0.0, s);
        assert!(yd[(0, 1)].norm() == 0.0 && yd[(1, 0)].norm() == 0.0);
        assert!((yd[(0, 0)] - 1.0 / (r + s * l)).norm() < 1e-12);
    }

    #[test]
    fn rl_equilibrium_is_the_phasor_solution() {
        let p = build_rl_reference_plant(0.23, 318e-6, 377.0).unwrap();
        let x = find_equilibrium(&p).unwrap();
        let i = Complex64::new(380.0, 0.0) / Complex64::new(0.23, 377.0 * 318e-6);
        assert!((x[0] - i.re).abs() < 1e-9 * i.norm());
        assert!((x[1] - i.im).abs() < 1e-9 * i.norm());

        let zero = build_rl_plant(&RlParameters {
            r: 0.23,
            l: 318e-6,
            omega0: 377.0,
            v_d: 0.0,
            v_q: 0.0,
        })
        .unwrap();
        assert_eq!(find_equilibrium(&zero).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn equilibrium_is_a_fixed_point_of_the_simulator() {
        for p in [
            gfm(),
            build_rl_reference_plant(0.23, 318e-6, 377.0).unwrap(),
        ] {
            let x = find_equilibrium(&p).unwrap();
            let rec = simulate(&p, &NoPerturbation, 1.0, 2500.0, &x).unwrap();
            for s in [&rec.i_o.d, &rec.i_o.q] {
                let first = s.samples()[0];
                let scale = p.nominal_current();
                assert!(s.samples().iter().all(|v| (v - first).abs() < 1e-9 * scale));
            }
            assert!(rec.steady_state_reached);
        }
    }

    #[test]
    fn simulation_is_deterministic_and_converged() {
        let p = gfm();
        let x = find_equilibrium(&p).unwrap();
        let step = StepPerturbation {
            axis: Axis::D,
            magnitude: 3.8,
            t_step: 0.1,
        };
        let a = simulate(&p, &step, 0.5, 2500.0, &x).unwrap();
        let b = simulate(&p, &step, 0.5, 2500.0, &x).unwrap();
        assert_eq!(a, b);

        let fine = p.clone().with_options(SimOptions {
            max_step: 0.5 / 25_000.0,
            ..Default::default()
        });
        let c = simulate(&fine, &step, 0.5, 2500.0, &x).unwrap();
        let base = x[gfm_state::IO_D];
        let swing = a
            .i_o
            .d
            .samples()
            .iter()
            .map(|v| (v - base).abs())
            .fold(0.0, f64::max);
        for (u, v) in a.i_o.d.samples().iter().zip(c.i_o.d.samples()) {
            assert!((u - v).abs() < 1e-6 * swing, "{u} vs {v}");
        }
    }

    #[test]
    fn step_response_is_bounded_and_settles() {
        let p = gfm();
        let x = find_equilibrium(&p).unwrap();
        let step = StepPerturbation {
            axis: Axis::D,
            magnitude: 3.8,
            t_step: 0.1,
        };
        let rec = simulate(&p, &step, 1.1, 2500.0, &x).unwrap();
        assert!(rec.i_o.d.samples().iter().all(|v| v.is_finite()));
        let tail = &rec.i_o.d.samples()[rec.len() - 250..];
        let ptp = tail.iter().cloned().fold(f64::MIN, f64::max)
            - tail.iter().cloned().fold(f64::MAX, f64::min);
        assert!(ptp < 1e-3 * p.nominal_current(), "not settled: {ptp}");
    }

    #[test]
    fn rl_step_settles_to_dc_gain() {
        let p = build_rl_reference_plant(0.23, 318e-6, 377.0).unwrap();
        let x = find_equilibrium(&p).unwrap();
        let step = StepPerturbation {
            axis: Axis::D,
            magnitude: 3.8,
            t_step: 0.0,
        };
        let rec = simulate(&p, &step, 0.5, 2500.0, &x).unwrap();
        let y0 = rl_admittance(0.23, 318e-6, 377.0, Complex64::new(0.0, 0.0));
        let n = rec.len();
        // inverter-convention current: delta i_o = -Y * delta v
        let did = rec.i_o.d.samples()[n - 1] - rec.i_o.d.samples()[0];
        let diq = rec.i_o.q.samples()[n - 1] - rec.i_o.q.samples()[0];
        let expect_d = -(y0[(0, 0)].re * 3.8);
        let expect_q = -(y0[(1, 0)].re * 3.8);
        assert!((did - expect_d).abs() < 1e-3 * expect_d.abs());
        assert!((diq - expect_q).abs() < 1e-3 * expect_q.abs());
    }

    #[test]
    fn simulate_rejects_bad_arguments() {
        let p = build_rl_reference_plant(0.23, 318e-6, 377.0).unwrap();
        assert!(simulate(&p, &NoPerturbation, 1.0, 1000.0, &[0.0, 0.0]).is_err());
        assert!(simulate(&p, &NoPerturbation, 0.0, 2500.0, &[0.0, 0.0]).is_err());
        assert!(simulate(&p, &NoPerturbation, 1.0, 2500.0, &[0.0]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let g = GfmParameters {
            k_pc: 0.0,
            k_ic: 1e9,
            ..Default::default()
        };
        let p = build_gfm_plant(&g, &GridParameters::default()).unwrap();
        let x = p.initial_guess();
        match simulate(&p, &NoPerturbation, 2.0, 2500.0, &x) {
            Err(Error::SimulationDiverged { t }) => assert!(t > 0.0),
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|r| r.steady_state_reached)
            ),
        }
    }
}
