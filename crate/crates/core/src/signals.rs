//! Sampled signals and the small set of transforms every identification
//! method shares: Park transforms, baseline removal, single-bin phasor
//! extraction and the NRMSE fit score.
//!
//! # Park convention
//!
//! All dq quantities in this crate use the amplitude-invariant Park
//! transform with the d axis aligned to phase a at `theta = 0` and the q
//! axis lagging:
//!
//! ```text
//! d =  2/3 [a cos(t) + b cos(t - 2pi/3) + c cos(t + 2pi/3)]
//! q = -2/3 [a sin(t) + b sin(t - 2pi/3) + c sin(t + 2pi/3)]
//! ```
//!
//! In complex form `x_dq = x_ab * exp(-j theta)`, so a balanced set of peak
//! amplitude `V` maps to `d = V`. Voltages such as `V_gd = 380 V` therefore
//! read as peak phase quantities, and every admittance value depends on
//! this choice.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Uniformly sampled real signal. Sample `k` sits at `t0 + k * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    samples: Vec<f64>,
    dt: f64,
    t0: f64,
}

impl TimeSeries {
    pub fn new(samples: Vec<f64>, dt: f64) -> Result<Self> {
        Self::with_start(samples, dt, 0.0)
    }

    pub fn with_start(samples: Vec<f64>, dt: f64, t0: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid("dt", "sample period must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("samples", "series must not be empty"));
        }
        Ok(Self { samples, dt, t0 })
    }

    /// Builds a series by sampling `f` at `n` instants.
    pub fn from_fn(n: usize, dt: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new((0..n).map(|k| f(k as f64 * dt)).collect(), dt)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.dt
    }

    /// Sub-series over a sample range, keeping absolute time.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        check_window(&range, self.len())?;
        if range.is_empty() {
            return Err(Error::invalid("range", "slice must not be empty"));
        }
        Ok(Self {
            t0: self.time(range.start),
            samples: self.samples[range].to_vec(),
            dt: self.dt,
        })
    }

    pub fn mean(&self) -> f64 {
        mean(&self.samples)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            samples: self.samples.iter().map(|&x| f(x)).collect(),
            dt: self.dt,
            t0: self.t0,
        }
    }

    pub(crate) fn same_grid(&self, other: &TimeSeries) -> bool {
        self.len() == other.len() && ((self.dt - other.dt).abs() <= 1e-12 * self.dt)
    }
}

/// A pair of d and q series on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DqSignal {
    pub d: TimeSeries,
    pub q: TimeSeries,
}

impl DqSignal {
    pub fn new(d: TimeSeries, q: TimeSeries) -> Result<Self> {
        if !d.same_grid(&q) || d.t0 != q.t0 {
            return Err(Error::DimensionMismatch(
                "d and q series must share dt, t0 and length".into(),
            ));
        }
        Ok(Self { d, q })
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.d.dt()
    }

    pub fn axis(&self, axis: Axis) -> &TimeSeries {
        match axis {
            Axis::D => &self.d,
            Axis::Q => &self.q,
        }
    }
}

/// dq axis selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    D,
    Q,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::D, Axis::Q];

    pub fn index(self) -> usize {
        match self {
            Axis::D => 0,
            Axis::Q => 1,
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::D => "d",
            Axis::Q => "q",
        })
    }
}

/// Complex amplitude of a tone, referenced to a cosine at the window start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phasor {
    pub frequency: f64,
    pub value: Complex64,
}

impl Phasor {
    pub fn amplitude(&self) -> f64 {
        self.value.norm()
    }

    pub fn phase_deg(&self) -> f64 {
        self.value.arg().to_degrees()
    }
}

const TWO_PI_3: f64 = 2.0 * PI / 3.0;

/// abc to dq (amplitude invariant, q lagging). See the module docs.
pub fn park(a: f64, b: f64, c: f64, theta: f64) -> (f64, f64) {
    let (s0, c0) = theta.sin_cos();
    let (s1, c1) = (theta - TWO_PI_3).sin_cos();
    let (s2, c2) = (theta + TWO_PI_3).sin_cos();
    let d = 2.0 / 3.0 * (a * c0 + b * c1 + c * c2);
    let q = -2.0 / 3.0 * (a * s0 + b * s1 + c * s2);
    (d, q)
}

/// dq to abc; right inverse of [`park`] for zero-sequence-free signals.
pub fn inverse_park(d: f64, q: f64, theta: f64) -> (f64, f64, f64) {
    let (s0, c0) = theta.sin_cos();
    let (s1, c1) = (theta - TWO_PI_3).sin_cos();
    let (s2, c2) = (theta + TWO_PI_3).sin_cos();
    (d * c0 - q * s0, d * c1 - q * s1, d * c2 - q * s2)
}

/// Subtracts the mean of `s` over `window` from every sample.
pub fn remove_dc_offset(s: &TimeSeries, window: Range<usize>) -> Result<TimeSeries> {
    if window.is_empty() {
        return Err(Error::EmptyBaselineWindow);
    }
    check_window(&window, s.len())?;
    // average the deviations from the first sample so a constant baseline
    // cancels exactly
    let w = &s.samples[window];
    let x0 = w[0];
    let offset = x0 + w.iter().map(|x| x - x0).sum::<f64>() / w.len() as f64;
    Ok(s.map(|x| x - offset))
}

/// Single-bin DFT of `s` at `f` over the whole series.
///
/// The series must span an integer number of periods of `f`. The result is
/// scaled so that `A cos(2 pi f t + phi)` yields `A exp(j phi)`, with `t`
/// measured from the first sample.
pub fn extract_phasor(s: &TimeSeries, f: f64) -> Result<Phasor> {
    let nyquist = 0.5 / s.dt;
    if !(f > 0.0) {
        return Err(Error::invalid("frequency", "must be positive"));
    }
    if f >= nyquist {
        return Err(Error::AboveNyquist {
            frequency: f,
            nyquist,
        });
    }
    let n = s.len();
    let periods = n as f64 * s.dt * f;
    let whole = periods.round();
    if whole < 1.0 || (periods - whole).abs() > 1e-9 * periods.max(1.0) {
        return Err(Error::NonCoherentWindow { periods });
    }
    // With an integer period count P the phase of sample k is 2 pi (k P mod N) / N,
    // which keeps the angle exact for long windows.
    let p = whole as u128;
    let nn = n as u128;
    let mut acc = Complex64::new(0.0, 0.0);
    for (k, &x) in s.samples.iter().enumerate() {
        let m = ((k as u128 * p) % nn) as f64;
        let angle = -2.0 * PI * m / n as f64;
        acc += Complex64::from_polar(x, angle);
    }
    Ok(Phasor {
        frequency: f,
        value: acc * (2.0 / n as f64),
    })
}

/// Fit percentage `100 (1 - |measured - model| / |measured - mean(measured)|)`.
pub fn nrmse_fit_percent(measured: &TimeSeries, model: &TimeSeries) -> Result<f64> {
    if !measured.same_grid(model) {
        return Err(Error::DimensionMismatch(format!(
            "measured ({} samples) and model ({} samples) must share length and dt",
            measured.len(),
            model.len()
        )));
    }
    nrmse_slices(measured.samples(), model.samples())
}

pub(crate) fn nrmse_slices(measured: &[f64], model: &[f64]) -> Result<f64> {
    let m = mean(measured);
    let residual: f64 = measured
        .iter()
        .zip(model)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let spread: f64 = measured
        .iter()
        .map(|a| (a - m) * (a - m))
        .sum::<f64>()
        .sqrt();
    if spread == 0.0 || spread <= 1e-14 * m.abs() {
        return Err(Error::DegenerateReference);
    }
    Ok(100.0 * (1.0 - residual / spread))
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn check_window(window: &Range<usize>, len: usize) -> Result<()> {
    if window.start > window.end || window.end > len {
        return Err(Error::WindowOutOfRange {
            start: window.start,
            end: window.end,
            len,
        });
    }
    Ok(())
}
