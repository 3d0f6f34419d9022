//! Eigensystem Realization Algorithm on sampled step responses.
//!
//! A step record of height `g` is the impulse response of the extended
//! system `W(z) = g z/(z-1) P_d(z)`, where `P_d` is the ZOH image of the
//! plant channel. The integrator is known exactly, so ERA realizes
//! `P_d = (1 - z^-1) W / g` from the differenced record and `d2c_zoh`
//! returns the continuous channel. Multiplying `W(s)` by `s/g` therefore
//! cancels its origin pole analytically.

use faer::Mat;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::admittance::{AdmittanceChannel, Channel, ChannelModel, DqAdmittance, Method};
use crate::error::{Error, Result};
use crate::experiments::StepExperimentPair;
pub use crate::lti::d2c_zoh;
use crate::lti::{ContinuousStateSpace, DiscreteStateSpace};
use crate::ratfit::RationalTransferFunction;

/// `entries[(i, j)] = h[i + j + 1 + shift]`; `h[0]` is the feedthrough.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub shift: usize,
    pub entries: DMatrix<f64>,
}

pub fn build_hankel(h: &[f64], rows: usize, cols: usize, shift: usize) -> Result<HankelMatrix> {
    if shift > 1 {
        return Err(Error::invalid("shift", "must be 0 or 1"));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("rows", "Hankel dimensions must be positive"));
    }
    let required = rows + cols + shift;
    if h.len() < required {
        return Err(Error::NotEnoughData {
            required,
            available: h.len(),
        });
    }
    Ok(HankelMatrix {
        rows,
        cols,
        shift,
        entries: DMatrix::from_fn(rows, cols, |i, j| h[i + j + 1 + shift]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EraOrder {
    Fixed(usize),
    /// Knee of the singular-value curve (largest log gap).
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EraDiagnostics {
    /// Hankel singular values, descending.
    pub singular_values: Vec<f64>,
    pub chosen_order: usize,
    /// Numerical rank of the Hankel matrix.
    pub rank: usize,
    pub hankel_shape: (usize, usize),
    /// Realized modes on the negative real axis folded into the feedthrough.
    pub residualized_modes: usize,
}

/// Near-square Hankel dimensions using the whole record.
pub fn hankel_shape(len: usize) -> (usize, usize) {
    let usable = len.saturating_sub(2);
    let rows = usable / 2;
    (rows, usable - rows)
}

/// Thin SVD of the Hankel matrix `h0` built from `h`, singular values
/// descending.
///
/// faer can return the singular values out of order when the Hankel tail is
/// sparse rounding noise, so they are sorted here; a result whose energy does
/// not match the Frobenius norm is recomputed with nalgebra.
fn hankel_svd(
    h0: &Mat<f64>,
    h: &[f64],
    rows: usize,
    cols: usize,
) -> Result<(Vec<f64>, Mat<f64>, Mat<f64>)> {
    let frob2: f64 = (1..rows + cols)
        .map(|k| {
            let count = k.min(rows).min(cols).min(rows + cols - k) as f64;
            count * h[k] * h[k]
        })
        .sum();
    let sorted =
        |sv: Vec<f64>, u: &dyn Fn(usize, usize) -> f64, v: &dyn Fn(usize, usize) -> f64| {
            let mut order: Vec<usize> = (0..sv.len()).collect();
            order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
            (
                order.iter().map(|&k| sv[k]).collect::<Vec<_>>(),
                Mat::<f64>::from_fn(rows, order.len(), |i, k| u(i, order[k])),
                Mat::<f64>::from_fn(cols, order.len(), |j, k| v(j, order[k])),
            )
        };
    if let Ok(svd) = h0.thin_svd() {
        let s = svd.S().column_vector();
        let sv: Vec<f64> = (0..s.nrows()).map(|i| s[i]).collect();
        let sum2: f64 = sv.iter().map(|x| x * x).sum();
        if (sum2 - frob2).abs() <= 1e-10 * frob2 {
            let (u, v) = (svd.U(), svd.V());
            return Ok(sorted(sv, &|i, k| u[(i, k)], &|j, k| v[(j, k)]));
        }
    }
    let m = DMatrix::<f64>::from_fn(rows, cols, |i, j| h0[(i, j)]);
    let svd = m
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or(Error::IllConditionedFit {
            condition: f64::INFINITY,
        })?;
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let sv = svd.singular_values.iter().copied().collect();
    Ok(sorted(sv, &|i, k| u[(i, k)], &|j, k| vt[(k, j)]))
}

/// Classical ERA on the impulse response `h` (`h[0]` = feedthrough).
pub fn era_realize(
    h: &[f64],
    dt: f64,
    order: EraOrder,
) -> Result<(DiscreteStateSpace, EraDiagnostics)> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be positive"));
    }
    let min_order = match order {
        EraOrder::Fixed(0) => return Err(Error::invalid("order", "must be at least 1")),
        EraOrder::Fixed(n) => n,
        EraOrder::Auto => 1,
    };
    let (rows, cols) = hankel_shape(h.len());
    if rows < 2 * min_order || cols < 2 * min_order {
        return Err(Error::NotEnoughData {
            required: 4 * min_order + 2,
            available: h.len(),
        });
    }
    let h0 = Mat::<f64>::from_fn(rows, cols, |i, j| h[i + j + 1]);
    let (sv, u, v) = hankel_svd(&h0, h, rows, cols)?;
    let s1 = sv.first().copied().unwrap_or(0.0);
    let threshold = rows.max(cols) as f64 * f64::EPSILON * s1;
    let rank = sv.iter().take_while(|&&x| x > threshold && x > 0.0).count();
    let n = match order {
        EraOrder::Fixed(n) => n,
        EraOrder::Auto => {
            let floor = f64::EPSILON * s1;
            (1..=rank)
                .map(|k| {
                    let next = sv.get(k).copied().unwrap_or(0.0).max(floor);
                    (k, sv[k - 1].ln() - next.ln())
                })
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, c| if c.1 > best.1 { c } else { best },
                )
                .0
                .max(1)
        }
    };
    if n > rank {
        return Err(Error::OrderExceedsRank { order: n, rank });
    }

    // H1 V_n without forming H1
    let mut h1v = DMatrix::<f64>::zeros(rows, n);
    for k in 0..n {
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += h[i + j + 2] * v[(j, k)];
            }
            h1v[(i, k)] = acc;
        }
    }
    let root: Vec<f64> = sv[..n].iter().map(|x| x.sqrt()).collect();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for p in 0..n {
        for k in 0..n {
            let mut acc = 0.0;
            for i in 0..rows {
                acc += u[(i, p)] * h1v[(i, k)];
            }
            a[(p, k)] = acc / (root[p] * root[k]);
        }
    }
    let b = DMatrix::from_fn(n, 1, |k, _| root[k] * v[(0, k)]);
    let c = DMatrix::from_fn(1, n, |_, k| u[(0, k)] * root[k]);
    let d = DMatrix::from_element(1, 1, h[0]);
    let sys = DiscreteStateSpace::new(a, b, c, d, dt)?;
    Ok((
        sys,
        EraDiagnostics {
            singular_values: sv,
            chosen_order: n,
            rank,
            hankel_shape: (rows, cols),
            residualized_modes: 0,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EraOptions {
    pub order: EraOrder,
    /// Lowest frequency of interest; modes within `1e-3 * 2 pi f_min` of the
    /// origin mark the rational form as approximate.
    pub f_min: f64,
}

impl Default for EraOptions {
    fn default() -> Self {
        Self {
            order: EraOrder::Fixed(6),
            f_min: 0.1,
        }
    }
}

/// One identified channel.
#[derive(Debug, Clone, PartialEq)]
pub struct EraChannel {
    /// Continuous plant channel, not yet negated.
    pub plant: ContinuousStateSpace,
    /// Realized extended system `W(z) = g z/(z-1) P_d(z)`, whose impulse
    /// response is the step record.
    pub extended: DiscreteStateSpace,
    pub diagnostics: EraDiagnostics,
}

/// Realizes the plant channel from a step response `y` (samples from the
/// step instant) to a step of height `g`.
///
/// The Markov parameters of `(1 - z^-1) W(z) = g P_d(z)` are the first
/// differences of the step samples, so the realization is computed for the
/// plant directly and the integrator of `W` stays exact instead of being
/// approximated by a truncated mode.
pub fn era_channel(y: &[f64], dt: f64, g: f64, order: EraOrder) -> Result<EraChannel> {
    if !(g > 0.0) {
        return Err(Error::invalid("g", "step height must be positive"));
    }
    let markov: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(k, &v)| if k == 0 { v } else { v - y[k - 1] })
        .collect();
    let (pd, diagnostics) = if markov.len() > 1 && markov[1..].iter().all(|&v| v == 0.0) {
        // pure feedthrough: no dynamics to realize
        let (rows, cols) = hankel_shape(markov.len());
        let sys = DiscreteStateSpace::new(
            DMatrix::zeros(0, 0),
            DMatrix::zeros(0, 1),
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, markov[0] / g),
            dt,
        )?;
        let diag = EraDiagnostics {
            singular_values: vec![0.0; rows.min(cols)],
            chosen_order: 0,
            rank: 0,
            hankel_shape: (rows, cols),
            residualized_modes: 0,
        };
        (sys, diag)
    } else {
        let (mut sys, diag) = era_realize(&markov, dt, order)?;
        sys.b /= g;
        sys.d /= g;
        (sys, diag)
    };
    let (reduced, removed) = residualize_negative_real(&pd)?;
    let mut diagnostics = diagnostics;
    diagnostics.residualized_modes = removed;
    Ok(EraChannel {
        plant: d2c_zoh(&reduced)?,
        extended: with_integrator(&pd, g),
        diagnostics,
    })
}

/// Folds real modes `lambda <= 0` into the feedthrough with their DC gain
/// `c b / (1 - lambda)`. Such a mode decays within a sample and has no
/// continuous ZOH preimage; at the frequencies the record resolves its
/// contribution is close to that constant.
fn residualize_negative_real(sys: &DiscreteStateSpace) -> Result<(DiscreteStateSpace, usize)> {
    let mut cur = sys.clone();
    let mut removed = 0;
    loop {
        let n = cur.order();
        if n == 0 {
            return Ok((cur, removed));
        }
        let eig = crate::poly::eigenvalues(&cur.a).unwrap_or_default();
        let Some(lambda) = eig
            .iter()
            .find(|ev| ev.re <= 0.0 && ev.im.abs() <= 1e-8 * ev.norm().max(1.0))
            .map(|ev| ev.re)
        else {
            return Ok((cur, removed));
        };
        let shifted = &cur.a - DMatrix::<f64>::identity(n, n) * lambda;
        let v = null_vector(&shifted);
        let mut w = null_vector(&shifted.transpose());
        let wv = w.dot(&v);
        if wv.abs() < 1e-10 {
            // defective eigenvalue; leave it for d2c_zoh to report
            return Ok((cur, removed));
        }
        w /= wv;
        let residue = (&cur.c * &v)[(0, 0)] * (w.transpose() * &cur.b)[(0, 0)];
        // orthonormal basis of the complementary invariant subspace
        let q = DMatrix::<f64>::identity(n, n) - &v * w.transpose();
        let svd = q.clone().svd(true, false);
        let u = svd.u.expect("left vectors requested");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let t = DMatrix::from_fn(n, n - 1, |i, k| u[(i, order[k])]);
        let a = t.transpose() * &cur.a * &t;
        let b = t.transpose() * &q * &cur.b;
        let c = &cur.c * &t;
        let d = DMatrix::from_element(1, 1, cur.d[(0, 0)] + residue / (1.0 - lambda));
        cur = DiscreteStateSpace::new(a, b, c, d, cur.dt)?;
        removed += 1;
    }
}

/// Right singular vector of the smallest singular value.
fn null_vector(m: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("right vectors requested");
    let k = svd.singular_values.argmin().0;
    vt.row(k).transpose()
}

/// `g z/(z-1) P(z)`: the plant followed by an accumulator with feedthrough.
fn with_integrator(p: &DiscreteStateSpace, g: f64) -> DiscreteStateSpace {
    let n = p.order();
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(&p.a);
    // accumulator state sums the plant output
    for j in 0..n {
        a[(n, j)] = p.c[(0, j)];
    }
    a[(n, n)] = 1.0;
    let mut b = DMatrix::<f64>::zeros(n + 1, 1);
    for i in 0..n {
        b[(i, 0)] = g * p.b[(i, 0)];
    }
    b[(n, 0)] = g * p.d[(0, 0)];
    let mut c = DMatrix::<f64>::zeros(1, n + 1);
    for j in 0..n {
        c[(0, j)] = p.c[(0, j)];
    }
    c[(0, n)] = 1.0;
    let d = DMatrix::from_element(1, 1, g * p.d[(0, 0)]);
    DiscreteStateSpace::new(a, b, c, d, p.dt).expect("consistent dimensions")
}

fn zero_channel() -> AdmittanceChannel {
    let zero = ContinuousStateSpace::new(
        DMatrix::zeros(0, 0),
        DMatrix::zeros(0, 1),
        DMatrix::zeros(1, 0),
        DMatrix::zeros(1, 1),
    )
    .expect("empty system");
    AdmittanceChannel {
        model: ChannelModel::StateSpace(zero),
        rational: Some(RationalTransferFunction::zero()),
        rational_exact: true,
        fit: None,
        measured: None,
        era: None,
    }
}

/// ERA admittance of a step pair; each channel is negated plant response.
pub fn era_admittance(pair: &StepExperimentPair, options: &EraOptions) -> Result<DqAdmittance> {
    if !(options.f_min > 0.0) {
        return Err(Error::invalid("f_min", "must be positive"));
    }
    let nyquist = 0.5 / pair.dt;
    let tol = 1e-3 * 2.0 * std::f64::consts::PI * options.f_min;
    let scale = 2.0 * std::f64::consts::PI * (options.f_min * nyquist).sqrt();
    let channels = Channel::ALL
        .par_iter()
        .map(|&c| {
            let (_, y) = pair.response(c.input(), c.output());
            let y = y.samples();
            if y.iter().all(|&v| v == 0.0) {
                return Ok(zero_channel());
            }
            let g = pair.g_abs[c.input().index()];
            let ch = era_channel(y, pair.dt, g, options.order).map_err(|e| e.in_channel(c))?;
            let sys = ch.plant.scaled(-1.0);
            let rational = RationalTransferFunction::from_state_space(&sys, scale).ok();
            // a realized mode this close to the origin cannot be told apart
            // from the step integrator; the rational form is then approximate
            let exact = sys.poles().iter().all(|p| p.norm() >= tol);
            Ok(AdmittanceChannel {
                model: ChannelModel::StateSpace(sys),
                rational,
                rational_exact: exact,
                fit: None,
                measured: None,
                era: Some(ch.diagnostics),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DqAdmittance {
        method: Method::Era,
        channels: channels.try_into().expect("four channels"),
        valid_range: (0.0, nyquist),
    })
}
