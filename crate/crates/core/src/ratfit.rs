//! Rational transfer-function estimation.
//!
//! Both entry points run Sanathanan-Koerner iterations: a sequence of
//! linearized least-squares problems `N - G*D ~ 0` reweighted by the previous
//! denominator. Frequency-domain data are fitted directly in the scaled
//! Laplace variable `p = s / scale_frequency`. Time-domain step records are
//! first turned into an empirical discrete response, fitted in `z^-1`, and
//! mapped to continuous time with the exact ZOH inverse.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lti::{
    c2d_zoh, d2c_zoh, log_grid, ContinuousStateSpace, DiscreteStateSpace, FrequencyResponse,
};
use crate::poly;
use crate::signals::{nrmse_slices, TimeSeries};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
/// Largest condition number accepted for a least-squares step.
const MAX_CONDITION: f64 = 1e13;

/// `N(p) / D(p)` with `p = s / scale_frequency`, coefficients in descending
/// powers and `D` monic.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalTransferFunction {
    num: Vec<f64>,
    den: Vec<f64>,
    scale_frequency: f64,
}

impl RationalTransferFunction {
    /// Coefficients in the scaled variable. The denominator is normalized to
    /// be monic and leading numerator zeros are trimmed.
    pub fn new(num: Vec<f64>, den: Vec<f64>, scale_frequency: f64) -> Result<Self> {
        if !(scale_frequency > 0.0) || !scale_frequency.is_finite() {
            return Err(Error::invalid(
                "scale_frequency",
                "must be positive and finite",
            ));
        }
        if num.iter().chain(&den).any(|c| !c.is_finite()) {
            return Err(Error::invalid("coefficients", "must be finite"));
        }
        let den = poly::trim_leading(&den).to_vec();
        if den.is_empty() || den[0] == 0.0 {
            return Err(Error::invalid("den", "denominator is zero"));
        }
        let mut num = poly::trim_leading(&num).to_vec();
        if num.is_empty() {
            num.push(0.0);
        }
        if num.len() > den.len() {
            return Err(Error::ImproperTransferFunction {
                num: num.len() - 1,
                den: den.len() - 1,
            });
        }
        let lead = den[0];
        Ok(Self {
            num: num.iter().map(|c| c / lead).collect(),
            den: den.iter().map(|c| c / lead).collect(),
            scale_frequency,
        })
    }

    /// Coefficients in `s` directly.
    pub fn from_s(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        Self::new(num, den, 1.0)
    }

    pub fn constant(k: f64) -> Self {
        Self {
            num: vec![k],
            den: vec![1.0],
            scale_frequency: 1.0,
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    pub fn scale_frequency(&self) -> f64 {
        self.scale_frequency
    }

    pub fn n_poles(&self) -> usize {
        self.den.len() - 1
    }

    pub fn n_zeros(&self) -> usize {
        self.num.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.num.iter().all(|&c| c == 0.0)
    }

    /// Coefficients in `s`, normalized so the denominator is monic in `s`.
    pub fn coefficients_s(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_poles() as i32;
        let w = self.scale_frequency;
        // p^k = s^k / w^k; multiply through by w^n
        let den = self
            .den
            .iter()
            .enumerate()
            .map(|(i, c)| c * w.powi(i as i32))
            .collect();
        let m = self.n_zeros() as i32;
        let num = self
            .num
            .iter()
            .enumerate()
            .map(|(i, c)| c * w.powi(n - m + i as i32))
            .collect();
        (num, den)
    }

    pub fn poles(&self) -> Vec<Complex64> {
        let r = poly::roots(&self.den).unwrap_or_default();
        r.into_iter().map(|z| z * self.scale_frequency).collect()
    }

    pub fn zeros(&self) -> Vec<Complex64> {
        if self.is_zero() {
            return Vec::new();
        }
        let r = poly::roots(&self.num).unwrap_or_default();
        r.into_iter().map(|z| z * self.scale_frequency).collect()
    }

    /// Value at a complex `s`; `None` at a pole.
    pub fn eval_s(&self, s: Complex64) -> Option<Complex64> {
        let p = s / self.scale_frequency;
        let d = poly::eval(&self.den, p);
        let size: f64 = self
            .den
            .iter()
            .rev()
            .enumerate()
            .map(|(i, c)| c.abs() * p.norm().powi(i as i32))
            .sum();
        if d.norm() <= 1e-14 * size {
            return None;
        }
        Some(poly::eval(&self.num, p) / d)
    }

    pub fn response_at(&self, f: f64) -> Result<Complex64> {
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::invalid(
                "frequency",
                format!("must be positive, got {f}"),
            ));
        }
        self.eval_s(Complex64::new(0.0, TWO_PI * f))
            .ok_or(Error::EvaluationAtPole { frequency: f })
    }

    pub fn evaluate(&self, freqs: &[f64]) -> Result<FrequencyResponse> {
        let values = freqs
            .iter()
            .map(|&f| self.response_at(f))
            .collect::<Result<Vec<_>>>()?;
        FrequencyResponse::new(freqs.to_vec(), values)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            num: self.num.iter().map(|c| c * k).collect(),
            ..self.clone()
        }
    }

    /// Controllable canonical realization.
    pub fn to_state_space(&self) -> ContinuousStateSpace {
        let n = self.n_poles();
        let w = self.scale_frequency;
        let mut num = vec![0.0; n + 1];
        num[n + 1 - self.num.len()..].copy_from_slice(&self.num);
        let d = num[0];
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, 1);
        let mut c = DMatrix::zeros(1, n);
        if n > 0 {
            for j in 0..n {
                a[(0, j)] = -self.den[j + 1] * w;
                // strictly proper remainder N - d*D
                c[(0, j)] = num[j + 1] - d * self.den[j + 1];
            }
            for i in 1..n {
                a[(i, i - 1)] = w;
            }
            b[(0, 0)] = w;
        }
        ContinuousStateSpace::new(a, b, c, DMatrix::from_element(1, 1, d))
            .expect("consistent dimensions")
    }

    /// Rational form of a single-input single-output state-space model,
    /// expressed in `p = s / scale_frequency`.
    pub fn from_state_space(sys: &ContinuousStateSpace, scale_frequency: f64) -> Result<Self> {
        if sys.inputs() != 1 || sys.outputs() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "expected a SISO system, got {}x{}",
                sys.outputs(),
                sys.inputs()
            )));
        }
        let w = scale_frequency;
        let a = &sys.a / w;
        let b = &sys.b / w;
        let d = sys.d[(0, 0)];
        let ill = || Error::IllConditionedFit {
            condition: f64::INFINITY,
        };
        let den = poly::charpoly(&a).ok_or_else(ill)?;
        // det(pI - A + BC) - det(pI - A) = C adj(pI - A) B
        let closed = poly::charpoly(&(&a - &b * &sys.c)).ok_or_else(ill)?;
        let mut num = poly::sub(&closed, &den);
        num[0] = 0.0;
        for (nc, dc) in num.iter_mut().zip(&den) {
            *nc += d * dc;
        }
        Self::new(num, den, w)
    }

    /// Removes denominator roots within `tol` rad/s of the origin together
    /// with the nearest numerator root. Returns whether anything was removed.
    pub fn cancel_near_origin(&self, tol: f64) -> (Self, bool) {
        let mut poles = poly::roots(&self.den).unwrap_or_default();
        let mut zeros = if self.is_zero() {
            Vec::new()
        } else {
            poly::roots(&self.num).unwrap_or_default()
        };
        let w = self.scale_frequency;
        let mut changed = false;
        while let Some(ip) = poles.iter().position(|p| p.norm() * w < tol) {
            let p = poles[ip];
            let Some(iz) = (0..zeros.len())
                .min_by(|&i, &j| (zeros[i] - p).norm().total_cmp(&(zeros[j] - p).norm()))
            else {
                break;
            };
            if zeros[iz].norm() * w >= tol {
                break;
            }
            poles.remove(ip);
            zeros.remove(iz);
            changed = true;
        }
        if !changed {
            return (self.clone(), false);
        }
        let lead = self.num[0];
        let num: Vec<f64> = poly::from_roots(&zeros).iter().map(|c| c * lead).collect();
        let den = poly::from_roots(&poles);
        match Self::new(num, den, w) {
            Ok(tf) => (tf, true),
            Err(_) => (self.clone(), false),
        }
    }

    /// Zero-order-hold response to a sampled input.
    pub fn simulate_response(&self, input: &TimeSeries) -> TimeSeries {
        let sys = c2d_zoh(&self.to_state_space(), input.dt());
        let out = run_discrete(&sys, input.samples());
        TimeSeries::with_start(out, input.dt(), input.t0()).expect("same grid as input")
    }

    /// Response to a step of `g_abs` applied at `t = 0`.
    pub fn simulate_step_response(&self, g_abs: f64, duration: f64, fs: f64) -> Result<TimeSeries> {
        if !(fs > 0.0) || !(duration > 0.0) {
            return Err(Error::invalid("fs", "fs and duration must be positive"));
        }
        let n = (duration * fs).round().max(1.0) as usize;
        let input = TimeSeries::new(vec![g_abs; n], 1.0 / fs)?;
        Ok(self.simulate_response(&input))
    }
}

fn run_discrete(sys: &DiscreteStateSpace, u: &[f64]) -> Vec<f64> {
    let n = sys.order();
    let d = sys.d[(0, 0)];
    let mut x = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut out = Vec::with_capacity(u.len());
    for &uk in u {
        let mut y = d * uk;
        for j in 0..n {
            y += sys.c[(0, j)] * x[j];
        }
        out.push(y);
        for i in 0..n {
            let mut acc = sys.b[(i, 0)] * uk;
            for j in 0..n {
                acc += sys.a[(i, j)] * x[j];
            }
            next[i] = acc;
        }
        std::mem::swap(&mut x, &mut next);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub n_poles: usize,
    pub n_zeros: usize,
    pub max_iterations: usize,
    pub rel_tolerance: f64,
    /// Grid (Hz) of the empirical response formed by [`fit_time_domain`].
    pub frequency_grid: Vec<f64>,
    /// Normalization frequency (rad/s); the grid's geometric mean when unset.
    pub scale_frequency: Option<f64>,
}

impl FitOptions {
    pub fn new(n_poles: usize) -> Self {
        Self {
            n_poles,
            n_zeros: n_poles.saturating_sub(1),
            max_iterations: 30,
            rel_tolerance: 1e-8,
            frequency_grid: log_grid(0.1, 1000.0, 200),
            scale_frequency: None,
        }
    }

    pub fn with_zeros(mut self, n_zeros: usize) -> Self {
        self.n_zeros = n_zeros;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_zeros > self.n_poles {
            return Err(Error::invalid("n_zeros", "must not exceed n_poles"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if !(self.rel_tolerance > 0.0) {
            return Err(Error::invalid("rel_tolerance", "must be positive"));
        }
        if let Some(w) = self.scale_frequency {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::invalid("scale_frequency", "must be positive"));
            }
        }
        let g = &self.frequency_grid;
        if g.is_empty() || g[0] <= 0.0 || g.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(
                "frequency_grid",
                "must be positive and strictly increasing",
            ));
        }
        Ok(())
    }
}

impl Default for FitOptions {
    fn default() -> Self {
        Self::new(4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub tf: RationalTransferFunction,
    pub nrmse_percent: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Set when the data were identically zero and the zero map was returned.
    pub degenerate: bool,
}

impl FitResult {
    fn zero() -> Self {
        Self {
            tf: RationalTransferFunction::zero(),
            nrmse_percent: 100.0,
            iterations_used: 0,
            converged: true,
            degenerate: true,
        }
    }
}

/// Linearized problem: for every point `k`,
/// `N_k = sum num_j * num_basis[k][j]` and
/// `D_k = den_fixed[k] + sum den_i * den_basis[k][i]`.
struct SkProblem<'a> {
    g: &'a [Complex64],
    num_basis: Vec<Vec<Complex64>>,
    den_basis: Vec<Vec<Complex64>>,
    den_fixed: Vec<Complex64>,
}

struct SkSolution {
    num: Vec<f64>,
    den: Vec<f64>,
    iterations: usize,
    converged: bool,
}

impl SkProblem<'_> {
    fn n_num(&self) -> usize {
        self.num_basis[0].len()
    }

    fn n_den(&self) -> usize {
        self.den_basis[0].len()
    }

    fn num_at(&self, k: usize, theta: &[f64]) -> Complex64 {
        self.num_basis[k]
            .iter()
            .zip(theta)
            .map(|(b, c)| b * c)
            .sum()
    }

    fn den_at(&self, k: usize, theta: &[f64]) -> Complex64 {
        self.den_fixed[k]
            + self.den_basis[k]
                .iter()
                .zip(&theta[self.n_num()..])
                .map(|(b, c)| b * c)
                .sum::<Complex64>()
    }

    fn residual(&self, theta: &[f64]) -> f64 {
        (0..self.g.len())
            .map(|k| (self.num_at(k, theta) / self.den_at(k, theta) - self.g[k]).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    fn step(&self, weights: &[f64]) -> Result<Vec<f64>> {
        let (nb, na) = (self.n_num(), self.n_den());
        let cols = nb + na;
        let rows = 2 * self.g.len();
        let mut m = DMatrix::<f64>::zeros(rows, cols);
        let mut rhs = DVector::<f64>::zeros(rows);
        for (k, (&g, &w)) in self.g.iter().zip(weights).enumerate() {
            for (j, b) in self.num_basis[k].iter().enumerate() {
                let v = b * w;
                m[(2 * k, j)] = v.re;
                m[(2 * k + 1, j)] = v.im;
            }
            for (i, b) in self.den_basis[k].iter().enumerate() {
                let v = -g * b * w;
                m[(2 * k, nb + i)] = v.re;
                m[(2 * k + 1, nb + i)] = v.im;
            }
            let r = g * self.den_fixed[k] * w;
            rhs[2 * k] = r.re;
            rhs[2 * k + 1] = r.im;
        }
        let norms: Vec<f64> = (0..cols).map(|j| m.column(j).norm()).collect();
        for (j, &nrm) in norms.iter().enumerate() {
            if nrm > 0.0 {
                m.column_mut(j).scale_mut(1.0 / nrm);
            }
        }
        let svd = m.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 0.0) || smax / smin > MAX_CONDITION || norms.contains(&0.0) {
            return Err(Error::IllConditionedFit {
                condition: if smin > 0.0 {
                    smax / smin
                } else {
                    f64::INFINITY
                },
            });
        }
        let u = svd.u.as_ref().expect("requested");
        let vt = svd.v_t.as_ref().expect("requested");
        let utb = u.transpose() * rhs;
        let mut z = DVector::zeros(cols);
        for i in 0..cols {
            z[i] = utb[i] / svd.singular_values[i];
        }
        let x = vt.transpose() * z;
        Ok((0..cols).map(|j| x[j] / norms[j]).collect())
    }

    fn solve(&self, max_iterations: usize, rel_tol: f64) -> Result<SkSolution> {
        let len = self.g.len();
        let mut weights = vec![1.0; len];
        let mut prev: Option<Vec<f64>> = None;
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        let mut converged = false;
        let mut iterations = 0;
        for it in 1..=max_iterations {
            iterations = it;
            let theta = self.step(&weights)?;
            let res = self.residual(&theta);
            if res.is_finite() && best.as_ref().is_none_or(|b| res < b.0) {
                best = Some((res, theta.clone(), it));
            }
            if let Some(p) = &prev {
                let diff: f64 = theta
                    .iter()
                    .zip(p)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let size: f64 = theta.iter().map(|a| a * a).sum::<f64>().sqrt();
                if diff <= rel_tol * size.max(f64::MIN_POSITIVE) {
                    converged = true;
                    best = Some((res, theta, it));
                    break;
                }
            }
            for (k, w) in weights.iter_mut().enumerate() {
                let d = self.den_at(k, &theta).norm();
                *w = if d > 0.0 { 1.0 / d } else { 1.0 };
            }
            prev = Some(theta);
        }
        let (_, theta, _) = best.ok_or(Error::IllConditionedFit {
            condition: f64::INFINITY,
        })?;
        let nb = self.n_num();
        Ok(SkSolution {
            num: theta[..nb].to_vec(),
            den: theta[nb..].to_vec(),
            iterations,
            converged,
        })
    }
}

fn geometric_mean(freqs: &[f64]) -> f64 {
    (freqs.iter().map(|f| f.ln()).sum::<f64>() / freqs.len() as f64).exp()
}

/// Complex-residual fit percentage `100 (1 - |G - Gfit| / |G - mean(G)|)`.
fn complex_nrmse(data: &[Complex64], model: &[Complex64]) -> f64 {
    let n = data.len() as f64;
    let mean: Complex64 = data.iter().sum::<Complex64>() / n;
    let err: f64 = data
        .iter()
        .zip(model)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let mut spread: f64 = data
        .iter()
        .map(|a| (a - mean).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let size: f64 = data.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    if spread <= 1e-12 * size {
        // flat data: score against its magnitude instead
        spread = size;
    }
    if spread == 0.0 {
        return if err == 0.0 { 100.0 } else { f64::NEG_INFINITY };
    }
    100.0 * (1.0 - err / spread)
}

/// Fits `n_poles`/`n_zeros` to measured points.
pub fn fit_frequency_domain(points: &FrequencyResponse, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    let needed = opts.n_poles + opts.n_zeros + 1;
    if points.len() < needed {
        return Err(Error::NotEnoughData {
            required: needed,
            available: points.len(),
        });
    }
    let g = points.values();
    if g.iter().all(|v| v.norm() == 0.0) {
        return Ok(FitResult::zero());
    }
    let scale = opts
        .scale_frequency
        .unwrap_or_else(|| TWO_PI * geometric_mean(points.freqs()));
    let (n, m) = (opts.n_poles, opts.n_zeros);
    let ps: Vec<Complex64> = points
        .freqs()
        .iter()
        .map(|&f| Complex64::new(0.0, TWO_PI * f / scale))
        .collect();
    let powers = |p: Complex64, deg: usize| -> Vec<Complex64> {
        (0..=deg).rev().map(|k| p.powi(k as i32)).collect()
    };
    let problem = SkProblem {
        g,
        num_basis: ps.iter().map(|&p| powers(p, m)).collect(),
        den_basis: ps
            .iter()
            .map(|&p| if n == 0 { Vec::new() } else { powers(p, n - 1) })
            .collect(),
        den_fixed: ps.iter().map(|&p| p.powi(n as i32)).collect(),
    };
    let sol = problem.solve(opts.max_iterations, opts.rel_tolerance)?;
    let mut den = vec![1.0];
    den.extend(&sol.den);
    let tf = RationalTransferFunction::new(sol.num, den, scale)?;
    let model: Vec<Complex64> = ps
        .iter()
        .map(|&p| {
            tf.eval_s(p * scale)
                .unwrap_or(Complex64::new(f64::NAN, f64::NAN))
        })
        .collect();
    let mut nrmse = complex_nrmse(g, &model);
    if !nrmse.is_finite() {
        nrmse = f64::NEG_INFINITY;
    }
    Ok(FitResult {
        tf,
        nrmse_percent: nrmse,
        iterations_used: sol.iterations,
        converged: sol.converged,
        degenerate: false,
    })
}

/// Fits a continuous model to a step (or any persistent) perturbation record.
///
/// The empirical response is the ratio of the DTFTs of the first differences
/// of output and input, which for a held input equals the ZOH discrete
/// response of the plant. The reported NRMSE compares the simulated response
/// of the fitted model with `output` in the time domain.
pub fn fit_time_domain(
    input: &TimeSeries,
    output: &TimeSeries,
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.validate()?;
    if input.len() != output.len() || (input.dt() - output.dt()).abs() > 1e-12 * input.dt() {
        return Err(Error::DimensionMismatch(
            "input and output must share a sample grid".into(),
        ));
    }
    let dt = input.dt();
    let nyquist = 0.5 / dt;
    if let Some(&f) = opts.frequency_grid.iter().find(|&&f| f >= nyquist) {
        return Err(Error::AboveNyquist {
            frequency: f,
            nyquist,
        });
    }
    let n = opts.n_poles;
    let n_num = if opts.n_zeros == n { n + 1 } else { n };
    let needed = 2 * (n + n_num) + 1;
    if input.len() < needed {
        return Err(Error::NotEnoughData {
            required: needed,
            available: input.len(),
        });
    }
    let u = input.samples();
    let y = output.samples();
    let u_max = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let y_max = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if y_max <= 1e-12 * u_max || y_max == 0.0 {
        return Ok(FitResult::zero());
    }

    let du = first_difference(u);
    let dy = first_difference(y);
    let mut g = Vec::new();
    let mut zinv = Vec::new();
    let mut kept_freqs = Vec::new();
    let mut dropped = 0;
    for &f in &opts.frequency_grid {
        let w = TWO_PI * f * dt;
        let uf = dtft(&du, w);
        if uf.norm() < 1e-12 {
            dropped += 1;
            continue;
        }
        g.push(dtft(&dy, w) / uf);
        zinv.push(Complex64::from_polar(1.0, -w));
        kept_freqs.push(f);
    }
    let total = opts.frequency_grid.len();
    if 2 * dropped > total {
        return Err(Error::InputNotExciting { dropped, total });
    }
    if g.len() < n + n_num {
        return Err(Error::NotEnoughData {
            required: n + n_num,
            available: g.len(),
        });
    }

    let first = if n_num == n + 1 { 0 } else { 1 };
    let problem = SkProblem {
        g: &g,
        num_basis: zinv
            .iter()
            .map(|&z| (first..=n).map(|k| z.powi(k as i32)).collect())
            .collect(),
        den_basis: zinv
            .iter()
            .map(|&z| (1..=n).map(|k| z.powi(k as i32)).collect())
            .collect(),
        den_fixed: vec![Complex64::new(1.0, 0.0); g.len()],
    };
    let sol = problem.solve(opts.max_iterations, opts.rel_tolerance)?;
    let mut b = vec![0.0; n + 1];
    b[first..].copy_from_slice(&sol.num);
    let discrete = discrete_canonical(&b, &sol.den, dt);
    let continuous = d2c_zoh(&discrete)?;
    let scale = opts
        .scale_frequency
        .unwrap_or_else(|| TWO_PI * geometric_mean(&kept_freqs));
    let mut tf = RationalTransferFunction::from_state_space(&continuous, scale)?;
    if opts.n_zeros + 1 < n {
        // The ZOH image of a model with fewer zeros still has n-1 of them in
        // continuous time; reduce the numerator by refitting to the model.
        let resp = tf.evaluate(&kept_freqs)?;
        let refit_opts = FitOptions {
            scale_frequency: Some(scale),
            ..opts.clone()
        };
        tf = fit_frequency_domain(&resp, &refit_opts)?.tf;
    } else if tf.n_zeros() > opts.n_zeros {
        let trimmed = tf.num[tf.num.len() - opts.n_zeros - 1..].to_vec();
        tf = RationalTransferFunction::new(trimmed, tf.den.clone(), scale)?;
    }

    let sim = tf.simulate_response(input);
    let nrmse = nrmse_slices(y, sim.samples())?;
    Ok(FitResult {
        tf,
        nrmse_percent: nrmse,
        iterations_used: sol.iterations,
        converged: sol.converged,
        degenerate: false,
    })
}

fn first_difference(x: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    x.iter()
        .map(|&v| {
            let d = v - prev;
            prev = v;
            d
        })
        .collect()
}

fn dtft(x: &[f64], w: f64) -> Complex64 {
    // rotate incrementally; renormalize to keep the phasor on the unit circle
    let step = Complex64::from_polar(1.0, -w);
    let mut rot = Complex64::new(1.0, 0.0);
    let mut acc = Complex64::new(0.0, 0.0);
    for (k, &v) in x.iter().enumerate() {
        if v != 0.0 {
            acc += rot * v;
        }
        rot *= step;
        if k % 64 == 63 {
            rot = Complex64::from_polar(1.0, -w * (k + 1) as f64);
        }
    }
    acc
}

/// Controllable canonical form of `(b0 + b1 z^-1 + ...)/(1 + a1 z^-1 + ...)`.
fn discrete_canonical(b: &[f64], a: &[f64], dt: f64) -> DiscreteStateSpace {
    let n = a.len();
    let d = b[0];
    let mut am = DMatrix::zeros(n, n);
    let mut bm = DMatrix::zeros(n, 1);
    let mut cm = DMatrix::zeros(1, n);
    for j in 0..n {
        am[(0, j)] = -a[j];
        cm[(0, j)] = b[j + 1] - d * a[j];
    }
    for i in 1..n {
        am[(i, i - 1)] = 1.0;
    }
    if n > 0 {
        bm[(0, 0)] = 1.0;
    }
    DiscreteStateSpace::new(am, bm, cm, DMatrix::from_element(1, 1, d), dt)
        .expect("consistent dimensions")
}
