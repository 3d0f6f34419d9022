//! The 2x2 dq admittance per identification method, Bode tables and
//! cross-method agreement.
//!
//! Every channel follows the inverter-to-grid sign convention: measured
//! current responses are negated so that `Y_ij = -i_oi / v_gj`.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix2;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::era::EraDiagnostics;
use crate::error::{Error, Result};
use crate::experiments::{StepExperimentPair, SweepDataset};
use crate::lti::{log_grid, ContinuousStateSpace, FrequencyResponse};
use crate::ratfit::{
    fit_frequency_domain, fit_time_domain, FitOptions, FitResult, RationalTransferFunction,
};
use crate::signals::Axis;

pub const SIGN_CONVENTION: &str = "inverter-to-grid current, negated (Y = -i_o / v_g)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Era,
    Sem,
    Sfra,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Era, Method::Sem, Method::Sfra];

    pub fn name(self) -> &'static str {
        match self {
            Method::Era => "era",
            Method::Sem => "sem",
            Method::Sfra => "sfra",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "era" => Ok(Method::Era),
            "sem" => Ok(Method::Sem),
            "sfra" => Ok(Method::Sfra),
            other => Err(Error::invalid(
                "method",
                format!("unknown method {other:?}"),
            )),
        }
    }
}

/// Admittance entry `Y_{out,in}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Ydd,
    Ydq,
    Yqd,
    Yqq,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Ydd, Channel::Ydq, Channel::Yqd, Channel::Yqq];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Ydd => "Ydd",
            Channel::Ydq => "Ydq",
            Channel::Yqd => "Yqd",
            Channel::Yqq => "Yqq",
        }
    }

    /// Measured current axis.
    pub fn output(self) -> Axis {
        match self {
            Channel::Ydd | Channel::Ydq => Axis::D,
            Channel::Yqd | Channel::Yqq => Axis::Q,
        }
    }

    /// Injected voltage axis.
    pub fn input(self) -> Axis {
        match self {
            Channel::Ydd | Channel::Yqd => Axis::D,
            Channel::Ydq | Channel::Yqq => Axis::Q,
        }
    }

    pub fn of(output: Axis, input: Axis) -> Self {
        match (output, input) {
            (Axis::D, Axis::D) => Channel::Ydd,
            (Axis::D, Axis::Q) => Channel::Ydq,
            (Axis::Q, Axis::D) => Channel::Yqd,
            (Axis::Q, Axis::Q) => Channel::Yqq,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::invalid("channel", format!("unknown channel {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelModel {
    /// Single-input single-output realization (ERA).
    StateSpace(ContinuousStateSpace),
    Rational(RationalTransferFunction),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceChannel {
    pub model: ChannelModel,
    /// Rational form of a state-space model; `rational_exact` is false when
    /// the integrator pole could not be cancelled analytically.
    pub rational: Option<RationalTransferFunction>,
    pub rational_exact: bool,
    pub fit: Option<FitResult>,
    /// Raw sweep points (SFRA).
    pub measured: Option<FrequencyResponse>,
    pub era: Option<EraDiagnostics>,
}

impl AdmittanceChannel {
    pub fn rational(tf: RationalTransferFunction, fit: Option<FitResult>) -> Self {
        Self {
            model: ChannelModel::Rational(tf.clone()),
            rational: Some(tf),
            rational_exact: true,
            fit,
            measured: None,
            era: None,
        }
    }

    /// Model value at `f` Hz.
    pub fn model_at(&self, f: f64) -> Result<Complex64> {
        match &self.model {
            ChannelModel::StateSpace(sys) => sys.entry_response(0, 0, f),
            ChannelModel::Rational(tf) => tf.response_at(f),
        }
    }

    /// Raw measured point at `f` when one exists, otherwise the model.
    pub fn value_at(&self, f: f64) -> Result<Complex64> {
        if let Some(v) = self.measured.as_ref().and_then(|m| m.lookup(f)) {
            return Ok(v);
        }
        self.model_at(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqAdmittance {
    pub method: Method,
    /// Indexed by [`Channel::index`].
    pub channels: [AdmittanceChannel; 4],
    /// Frequency range (Hz) the identification supports.
    pub valid_range: (f64, f64),
}

impl DqAdmittance {
    pub fn channel(&self, c: Channel) -> &AdmittanceChannel {
        &self.channels[c.index()]
    }

    pub fn sign_convention(&self) -> &'static str {
        SIGN_CONVENTION
    }

    pub fn value_at(&self, c: Channel, f: f64) -> Result<Complex64> {
        self.channel(c).value_at(f).map_err(|e| e.in_channel(c))
    }

    /// `[[Ydd, Ydq], [Yqd, Yqq]]` at `f`.
    pub fn matrix_at(&self, f: f64) -> Result<Matrix2<Complex64>> {
        let v = |c| self.value_at(c, f);
        Ok(Matrix2::new(
            v(Channel::Ydd)?,
            v(Channel::Ydq)?,
            v(Channel::Yqd)?,
            v(Channel::Yqq)?,
        ))
    }

    pub fn fits(&self) -> impl Iterator<Item = (Channel, &FitResult)> {
        Channel::ALL
            .into_iter()
            .filter_map(|c| self.channel(c).fit.as_ref().map(|f| (c, f)))
    }

    /// Raw measurement frequencies, when present.
    pub fn measured_frequencies(&self) -> Option<&[f64]> {
        self.channels[0].measured.as_ref().map(|m| m.freqs())
    }
}

fn collect_channels(v: Vec<AdmittanceChannel>) -> [AdmittanceChannel; 4] {
    v.try_into().expect("four channels")
}

/// Fits the four step-response channels. Record (1) supplies `Ydd` and
/// `Yqd`, record (2) supplies `Ydq` and `Yqq`.
pub fn assemble_sem(pair: &StepExperimentPair, opts: &FitOptions) -> Result<DqAdmittance> {
    opts.validate()?;
    let channels = Channel::ALL
        .par_iter()
        .map(|&c| {
            let (u, y) = pair.response(c.input(), c.output());
            let fit = fit_time_domain(&u, &y, opts).map_err(|e| e.in_channel(c))?;
            let negated = FitResult {
                tf: fit.tf.scaled(-1.0),
                ..fit
            };
            Ok(AdmittanceChannel::rational(
                negated.tf.clone(),
                Some(negated),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DqAdmittance {
        method: Method::Sem,
        channels: collect_channels(channels),
        valid_range: (0.0, 0.5 / pair.dt),
    })
}

/// Keeps the measured sweep points and fits a rational model to each channel.
pub fn assemble_sfra(ds: &SweepDataset, opts: &FitOptions) -> Result<DqAdmittance> {
    opts.validate()?;
    let data = [&ds.ydd, &ds.ydq, &ds.yqd, &ds.yqq];
    let freqs = ds.frequencies();
    if data.iter().any(|d| d.freqs() != freqs) {
        return Err(Error::DimensionMismatch(
            "sweep channels must share a frequency grid".into(),
        ));
    }
    let channels = Channel::ALL
        .par_iter()
        .map(|&c| {
            let points = data[c.index()];
            let fit = fit_frequency_domain(points, opts).map_err(|e| e.in_channel(c))?;
            let mut ch = AdmittanceChannel::rational(fit.tf.clone(), Some(fit));
            ch.measured = Some(points.clone());
            Ok(ch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DqAdmittance {
        method: Method::Sfra,
        channels: collect_channels(channels),
        valid_range: (freqs[0], freqs[freqs.len() - 1]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodeRow {
    pub f: f64,
    pub channel: Channel,
    pub method: Method,
    pub mag_db: f64,
    pub phase_deg: f64,
}

pub const BODE_HEADER: &str = "f_hz,channel,method,mag_db,phase_deg";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BodeTable {
    pub rows: Vec<BodeRow>,
}

/// Phase in degrees on `(-180, 180]`.
pub fn principal_phase_deg(z: Complex64) -> f64 {
    wrap_deg(z.arg().to_degrees())
}

pub fn wrap_deg(x: f64) -> f64 {
    let mut p = x % 360.0;
    if p <= -180.0 {
        p += 360.0;
    } else if p > 180.0 {
        p -= 360.0;
    }
    p
}

/// Removes +-360 degree jumps walking up the list; the first entry stays on
/// its principal branch.
pub fn unwrap_deg(phases: &mut [f64]) {
    for i in 1..phases.len() {
        let prev = phases[i - 1];
        let mut p = phases[i];
        while p - prev > 180.0 {
            p -= 360.0;
        }
        while p - prev <= -180.0 {
            p += 360.0;
        }
        phases[i] = p;
    }
}

fn push_channel(rows: &mut Vec<BodeRow>, method: Method, c: Channel, pts: &[(f64, Complex64)]) {
    let mut phases: Vec<f64> = pts.iter().map(|(_, z)| principal_phase_deg(*z)).collect();
    unwrap_deg(&mut phases);
    for ((f, z), ph) in pts.iter().zip(phases) {
        rows.push(BodeRow {
            f: *f,
            channel: c,
            method,
            mag_db: 20.0 * z.norm().log10(),
            phase_deg: ph,
        });
    }
}

/// Magnitude (dB) and unwrapped phase of each channel on `grid`. Measured
/// sweeps list only their raw points that coincide with grid frequencies.
pub fn bode(y: &DqAdmittance, grid: &[f64]) -> Result<BodeTable> {
    if grid.iter().any(|&f| !(f > 0.0)) || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(
            "grid",
            "must be positive and strictly increasing",
        ));
    }
    let mut rows = Vec::new();
    for c in Channel::ALL {
        let ch = y.channel(c);
        let pts: Vec<(f64, Complex64)> = match &ch.measured {
            Some(m) => grid
                .iter()
                .filter_map(|&f| m.lookup(f).map(|v| (f, v)))
                .collect(),
            None => grid
                .iter()
                .map(|&f| ch.model_at(f).map(|v| (f, v)).map_err(|e| e.in_channel(c)))
                .collect::<Result<_>>()?,
        };
        push_channel(&mut rows, y.method, c, &pts);
    }
    Ok(BodeTable { rows })
}

/// Bode rows of the rational fit of each channel, ignoring raw points.
pub fn bode_model(y: &DqAdmittance, grid: &[f64]) -> Result<BodeTable> {
    let mut rows = Vec::new();
    for c in Channel::ALL {
        let ch = y.channel(c);
        let pts = grid
            .iter()
            .map(|&f| ch.model_at(f).map(|v| (f, v)).map_err(|e| e.in_channel(c)))
            .collect::<Result<Vec<_>>>()?;
        push_channel(&mut rows, y.method, c, &pts);
    }
    Ok(BodeTable { rows })
}

fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else if x > 0.0 {
        "inf".into()
    } else if x < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

/// Parse failure with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for CsvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for CsvError {}

impl BodeTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(BODE_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_num(r.f),
                r.channel,
                r.method,
                fmt_num(r.mag_db),
                fmt_num(r.phase_deg)
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, CsvError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == BODE_HEADER => {}
            _ => {
                return Err(CsvError {
                    line: 1,
                    message: format!("expected header {BODE_HEADER:?}"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: String| CsvError {
                line: line_no,
                message: m,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            }
            let num = |s: &str, name: &str| {
                s.parse::<f64>()
                    .map_err(|_| err(format!("bad {name} value {s:?}")))
            };
            let f = num(fields[0], "f_hz")?;
            if !(f > 0.0) || !f.is_finite() {
                return Err(err(format!("f_hz must be positive, got {f}")));
            }
            rows.push(BodeRow {
                f,
                channel: fields[1].parse().map_err(|e: Error| err(e.to_string()))?,
                method: fields[2].parse().map_err(|e: Error| err(e.to_string()))?,
                mag_db: num(fields[3], "mag_db")?,
                phase_deg: num(fields[4], "phase_deg")?,
            });
        }
        Ok(Self { rows })
    }

    /// Rows of one channel in frequency order.
    pub fn channel_rows(&self, c: Channel) -> Vec<BodeRow> {
        let mut v: Vec<BodeRow> = self
            .rows
            .iter()
            .filter(|r| r.channel == c)
            .copied()
            .collect();
        v.sort_by(|a, b| a.f.total_cmp(&b.f));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelAgreement {
    pub channel: Channel,
    pub points: usize,
    pub max_dmag_db: f64,
    pub max_dphase_deg: f64,
    pub mean_dmag_db: f64,
    pub mean_dphase_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub band: (f64, f64),
    pub channels: Vec<ChannelAgreement>,
}

pub const REPORT_HEADER: &str =
    "channel,f_lo,f_hi,max_dmag_db,max_dphase_deg,mean_dmag_db,mean_dphase_deg";

impl AgreementReport {
    pub fn max_dmag_db(&self) -> f64 {
        self.channels
            .iter()
            .map(|c| c.max_dmag_db)
            .fold(0.0, f64::max)
    }

    pub fn max_dphase_deg(&self) -> f64 {
        self.channels
            .iter()
            .map(|c| c.max_dphase_deg)
            .fold(0.0, f64::max)
    }

    pub fn within(&self, mag_db: f64, phase_deg: f64) -> bool {
        self.channels
            .iter()
            .all(|c| c.max_dmag_db <= mag_db && c.max_dphase_deg <= phase_deg)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for c in &self.channels {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.channel,
                fmt_num(self.band.0),
                fmt_num(self.band.1),
                fmt_num(c.max_dmag_db),
                fmt_num(c.max_dphase_deg),
                fmt_num(c.mean_dmag_db),
                fmt_num(c.mean_dphase_deg)
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("band {} to {} Hz\n", self.band.0, self.band.1);
        for c in &self.channels {
            s.push_str(&format!(
                "  {}: {} points, max |dmag| {:.4} dB, max |dphase| {:.4} deg, mean {:.4} dB / {:.4} deg\n",
                c.channel, c.points, c.max_dmag_db, c.max_dphase_deg, c.mean_dmag_db, c.mean_dphase_deg
            ));
        }
        s
    }
}

/// `(|20 log10 |a/b||, |wrapped arg(a/b)|)`, with two negligible values
/// counted as equal.
fn deviation(a: Complex64, b: Complex64, negligible: f64) -> (f64, f64) {
    let (ma, mb) = (a.norm(), b.norm());
    if ma <= negligible && mb <= negligible {
        return (0.0, 0.0);
    }
    if ma == 0.0 || mb == 0.0 {
        return (f64::INFINITY, 180.0);
    }
    let r = a / b;
    (
        (20.0 * r.norm().log10()).abs(),
        principal_phase_deg(r).abs(),
    )
}

struct Accumulator {
    channel: Channel,
    points: usize,
    max: (f64, f64),
    sum: (f64, f64),
}

impl Accumulator {
    fn new(channel: Channel) -> Self {
        Self {
            channel,
            points: 0,
            max: (0.0, 0.0),
            sum: (0.0, 0.0),
        }
    }

    fn add(&mut self, (m, p): (f64, f64)) {
        self.points += 1;
        self.max = (self.max.0.max(m), self.max.1.max(p));
        self.sum = (self.sum.0 + m, self.sum.1 + p);
    }

    fn finish(self) -> ChannelAgreement {
        let n = self.points.max(1) as f64;
        ChannelAgreement {
            channel: self.channel,
            points: self.points,
            max_dmag_db: self.max.0,
            max_dphase_deg: self.max.1,
            mean_dmag_db: self.sum.0 / n,
            mean_dphase_deg: self.sum.1 / n,
        }
    }
}

fn check_band(band: (f64, f64), valid: (f64, f64)) -> Result<()> {
    let tol = 1e-9 * valid.1.abs().max(1.0);
    let ok = band.0 > 0.0 && band.0 < band.1 && band.0 >= valid.0 - tol && band.1 <= valid.1 + tol;
    if ok {
        Ok(())
    } else {
        Err(Error::BandOutOfRange {
            lo: band.0,
            hi: band.1,
            valid_lo: valid.0,
            valid_hi: valid.1,
        })
    }
}

fn in_band(f: f64, band: (f64, f64)) -> bool {
    f >= band.0 * (1.0 - 1e-9) && f <= band.1 * (1.0 + 1e-9)
}

/// Per-channel deviation between two admittances over `band`.
///
/// When either side carries raw sweep points the comparison runs on those
/// frequencies; otherwise on `grid_points` log-spaced frequencies.
pub fn compare(
    a: &DqAdmittance,
    b: &DqAdmittance,
    band: (f64, f64),
    grid_points: usize,
) -> Result<AgreementReport> {
    check_band(band, a.valid_range)?;
    check_band(band, b.valid_range)?;
    let grid: Vec<f64> = match a.measured_frequencies().or(b.measured_frequencies()) {
        Some(raw) => raw.iter().copied().filter(|&f| in_band(f, band)).collect(),
        None => {
            if grid_points < 10 {
                return Err(Error::invalid(
                    "grid_points",
                    "at least 10 points are required",
                ));
            }
            log_grid(band.0, band.1, grid_points)
        }
    };
    if grid.is_empty() {
        let raw = a
            .measured_frequencies()
            .or(b.measured_frequencies())
            .unwrap_or(&[]);
        return Err(Error::BandOutOfRange {
            lo: band.0,
            hi: band.1,
            valid_lo: raw.first().copied().unwrap_or(0.0),
            valid_hi: raw.last().copied().unwrap_or(0.0),
        });
    }
    let mut acc: Vec<Accumulator> = Channel::ALL.into_iter().map(Accumulator::new).collect();
    for &f in &grid {
        let ya = a.matrix_at(f)?;
        let yb = b.matrix_at(f)?;
        let scale = ya
            .iter()
            .chain(yb.iter())
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        for c in Channel::ALL {
            let (i, j) = (c.output().index(), c.input().index());
            acc[c.index()].add(deviation(ya[(i, j)], yb[(i, j)], 1e-12 * scale));
        }
    }
    Ok(AgreementReport {
        band,
        channels: acc.into_iter().map(Accumulator::finish).collect(),
    })
}

/// Agreement between two Bode tables on the frequencies they share within
/// `band`, per channel present in both.
pub fn compare_tables(a: &BodeTable, b: &BodeTable, band: (f64, f64)) -> Result<AgreementReport> {
    if !(band.0 > 0.0 && band.0 < band.1) {
        return Err(Error::invalid("band", "expected 0 < lo < hi"));
    }
    let mut out = Vec::new();
    for c in Channel::ALL {
        let ra = a.channel_rows(c);
        let rb = b.channel_rows(c);
        if ra.is_empty() || rb.is_empty() {
            continue;
        }
        let mut acc = Accumulator::new(c);
        for x in ra.iter().filter(|r| in_band(r.f, band)) {
            let Some(y) = rb.iter().find(|r| (r.f - x.f).abs() <= 1e-9 * x.f) else {
                continue;
            };
            let dmag = if x.mag_db == y.mag_db {
                0.0
            } else {
                (x.mag_db - y.mag_db).abs()
            };
            let both_zero = x.mag_db == f64::NEG_INFINITY && y.mag_db == f64::NEG_INFINITY;
            let dphase = if both_zero {
                0.0
            } else {
                wrap_deg(x.phase_deg - y.phase_deg).abs()
            };
            acc.add((dmag, dphase));
        }
        if acc.points > 0 {
            out.push(acc.finish());
        }
    }
    if out.is_empty() {
        return Err(Error::BandOutOfRange {
            lo: band.0,
            hi: band.1,
            valid_lo: 0.0,
            valid_hi: 0.0,
        });
    }
    Ok(AgreementReport {
        band,
        channels: out,
    })
}
