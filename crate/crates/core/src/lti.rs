//! State-space realizations, zero-order-hold conversions and sampled
//! frequency responses.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::poly;

/// Discrete-time realization `x[k+1] = A x[k] + B u[k]`, `y[k] = C x[k] + D u[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub dt: f64,
}

/// Continuous-time realization `x' = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousStateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Sample period of the discrete model this was converted from, if any.
    pub source_dt: Option<f64>,
}

fn check_dims(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<()> {
    let n = a.nrows();
    let ok = a.ncols() == n
        && b.nrows() == n
        && c.ncols() == n
        && d.nrows() == c.nrows()
        && d.ncols() == b.ncols();
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "A {}x{}, B {}x{}, C {}x{}, D {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            c.nrows(),
            c.ncols(),
            d.nrows(),
            d.ncols()
        )))
    }
}

fn complexify(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// `C (zI - A)^-1 B + D` for a complex `z`.
fn resolvent_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    z: Complex64,
) -> Option<DMatrix<Complex64>> {
    let n = a.nrows();
    if n == 0 {
        return Some(complexify(d));
    }
    let mut m = complexify(a).map(|x| -x);
    for i in 0..n {
        m[(i, i)] += z;
    }
    let lu = m.lu();
    let x = lu.solve(&complexify(b))?;
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return None;
    }
    Some(complexify(c) * x + complexify(d))
}

impl DiscreteStateSpace {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        check_dims(&a, &b, &c, &d)?;
        if !(dt > 0.0) {
            return Err(Error::invalid("dt", "sample period must be positive"));
        }
        Ok(Self { a, b, c, d, dt })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    /// Markov parameters `D, CB, CAB, ...` (the impulse response).
    pub fn markov(&self, count: usize) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(count);
        if count == 0 {
            return out;
        }
        out.push(self.d.clone());
        let mut ab = self.b.clone();
        for _ in 1..count {
            out.push(&self.c * &ab);
            ab = &self.a * ab;
        }
        out
    }

    /// Impulse response of a single-input single-output model.
    pub fn impulse_response(&self, count: usize) -> Vec<f64> {
        self.markov(count).iter().map(|m| m[(0, 0)]).collect()
    }

    /// Frequency response at `f` Hz (`z = exp(j 2 pi f dt)`).
    pub fn response_at(&self, f: f64) -> Result<DMatrix<Complex64>> {
        let z = Complex64::from_polar(1.0, 2.0 * PI * f * self.dt);
        resolvent_gain(&self.a, &self.b, &self.c, &self.d, z)
            .ok_or(Error::EvaluationAtPole { frequency: f })
    }

    /// Applies the state transform `x = T x'`.
    pub fn similarity(&self, t: &DMatrix<f64>) -> Option<Self> {
        let ti = t.clone().try_inverse()?;
        Some(Self {
            a: &ti * &self.a * t,
            b: &ti * &self.b,
            c: &self.c * t,
            d: self.d.clone(),
            dt: self.dt,
        })
    }

    pub fn poles(&self) -> Vec<Complex64> {
        poly::eigenvalues(&self.a).unwrap_or_default()
    }
}

impl ContinuousStateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        check_dims(&a, &b, &c, &d)?;
        Ok(Self {
            a,
            b,
            c,
            d,
            source_dt: None,
        })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Frequency response at `f` Hz (`s = j 2 pi f`).
    pub fn response_at(&self, f: f64) -> Result<DMatrix<Complex64>> {
        self.response_at_s(Complex64::new(0.0, 2.0 * PI * f))
            .ok_or(Error::EvaluationAtPole { frequency: f })
    }

    pub(crate) fn response_at_s(&self, s: Complex64) -> Option<DMatrix<Complex64>> {
        resolvent_gain(&self.a, &self.b, &self.c, &self.d, s)
    }

    /// Scalar response of entry `(output, input)`.
    pub fn entry_response(&self, output: usize, input: usize, f: f64) -> Result<Complex64> {
        self.response_at(f).map(|m| m[(output, input)])
    }

    pub fn poles(&self) -> Vec<Complex64> {
        poly::eigenvalues(&self.a).unwrap_or_default()
    }

    /// Sub-system from one input to one output.
    pub fn siso(&self, output: usize, input: usize) -> Self {
        Self {
            a: self.a.clone(),
            b: self.b.columns(input, 1).into_owned(),
            c: self.c.rows(output, 1).into_owned(),
            d: DMatrix::from_element(1, 1, self.d[(output, input)]),
            source_dt: self.source_dt,
        }
    }

    /// Multiplies the output map by `k` (scales C and D).
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            a: self.a.clone(),
            b: self.b.clone(),
            c: &self.c * k,
            d: &self.d * k,
            source_dt: self.source_dt,
        }
    }
}

/// Zero-order-hold discretization.
pub fn c2d_zoh(sys: &ContinuousStateSpace, dt: f64) -> DiscreteStateSpace {
    let n = sys.order();
    let m = sys.inputs();
    let mut aug = DMatrix::<f64>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(&sys.b * dt));
    let e = expm(&aug);
    DiscreteStateSpace {
        a: e.view((0, 0), (n, n)).into_owned(),
        b: e.view((0, n), (n, m)).into_owned(),
        c: sys.c.clone(),
        d: sys.d.clone(),
        dt,
    }
}

/// Inverse of [`c2d_zoh`]: `A_c = log(A_d) / dt` and
/// `(int_0^dt exp(A_c t) dt) B_c = B_d`.
///
/// Eigenvalues of `A_d` on the closed negative real axis have no principal
/// logarithm and are reported as [`Error::LogBranchAmbiguity`]. An eigenvalue
/// at `+1` (a discrete integrator) maps to `s = 0`.
pub fn d2c_zoh(sys: &DiscreteStateSpace) -> Result<ContinuousStateSpace> {
    let n = sys.order();
    let dt = sys.dt;
    if n == 0 {
        return ContinuousStateSpace::new(
            sys.a.clone(),
            sys.b.clone(),
            sys.c.clone(),
            sys.d.clone(),
        );
    }
    for ev in poly::eigenvalues(&sys.a).unwrap_or_default() {
        let scale = ev.norm().max(1.0);
        if ev.re <= 0.0 && ev.im.abs() <= 1e-8 * scale {
            return Err(Error::LogBranchAmbiguity {
                re: ev.re,
                im: ev.im,
            });
        }
    }
    let ac = logm(&sys.a)? / dt;
    // int_0^dt exp(Ac t) dt is the upper-right block of exp([[Ac, I], [0, 0]] dt)
    let mut aug = DMatrix::<f64>::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&ac * dt));
    aug.view_mut((0, n), (n, n))
        .copy_from(&(DMatrix::<f64>::identity(n, n) * dt));
    let gamma = expm(&aug).view((0, n), (n, n)).into_owned();
    let bc = gamma
        .lu()
        .solve(&sys.b)
        .ok_or(Error::LogBranchAmbiguity { re: 0.0, im: 0.0 })?;
    Ok(ContinuousStateSpace {
        a: ac,
        b: bc,
        c: sys.c.clone(),
        d: sys.d.clone(),
        source_dt: Some(dt),
    })
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential: scaling and squaring with a degree-13 Padé approximant.
pub(crate) fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    const THETA13: f64 = 5.371920351148152;
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let norm = norm1(a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(squarings);
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * B[13] + &a4 * B[11] + &a2 * B[9])
        + &a6 * B[7]
        + &a4 * B[5]
        + &a2 * B[3]
        + &id * B[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * B[12] + &a4 * B[10] + &a2 * B[8])
        + &a6 * B[6]
        + &a4 * B[4]
        + &a2 * B[2]
        + &id * B[0];
    let mut r = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .expect("Padé denominator is nonsingular for scaled arguments");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

/// Principal square root by the product form of the Denman-Beavers iteration.
fn sqrtm(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let mut m = a.clone();
    let mut y = a.clone();
    for _ in 0..100 {
        let minv = m.clone().try_inverse()?;
        y = &y * (&id + &minv) * 0.5;
        m = (&id * 2.0 + &m + &minv) * 0.25;
        if norm1(&(&m - &id)) <= 1e-15 * n as f64 {
            return Some(y);
        }
    }
    Some(y)
}

/// Principal matrix logarithm by inverse scaling and squaring: take square
/// roots until the argument is near the identity, then sum the Mercator series.
pub(crate) fn logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    let id = DMatrix::<f64>::identity(n, n);
    let mut x = a.clone();
    let mut roots = 0;
    while norm1(&(&x - &id)) > 0.1 {
        if roots >= 64 {
            return Err(Error::LogBranchAmbiguity {
                re: f64::NAN,
                im: f64::NAN,
            });
        }
        x = sqrtm(&x).ok_or(Error::LogBranchAmbiguity { re: 0.0, im: 0.0 })?;
        roots += 1;
    }
    let y = &x - &id;
    let mut term = y.clone();
    let mut sum = y.clone();
    for k in 2..=24 {
        term = &term * &y;
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        sum += &term * (sign / k as f64);
    }
    Ok(sum * 2f64.powi(roots))
}

/// Ordered set of `(frequency, complex value)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyResponse {
    freqs: Vec<f64>,
    values: Vec<Complex64>,
}

impl FrequencyResponse {
    pub fn new(freqs: Vec<f64>, values: Vec<Complex64>) -> Result<Self> {
        if freqs.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} frequencies but {} values",
                freqs.len(),
                values.len()
            )));
        }
        if freqs.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::invalid(
                "frequency",
                "frequencies must be positive and finite",
            ));
        }
        if freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "frequency",
                "frequencies must be strictly increasing",
            ));
        }
        if values
            .iter()
            .any(|v| !v.re.is_finite() || !v.im.is_finite())
        {
            return Err(Error::invalid("value", "response points must be finite"));
        }
        Ok(Self { freqs, values })
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, Complex64)> + '_ {
        self.freqs.iter().copied().zip(self.values.iter().copied())
    }

    /// Value at `f` if it is one of the stored frequencies (relative match 1e-9).
    pub fn lookup(&self, f: f64) -> Option<Complex64> {
        let idx = self.freqs.partition_point(|&x| x < f * (1.0 - 1e-9));
        self.freqs
            .get(idx)
            .filter(|&&x| (x - f).abs() <= 1e-9 * f)
            .map(|_| self.values[idx])
    }

    pub fn scaled(&self, k: Complex64) -> Self {
        Self {
            freqs: self.freqs.clone(),
            values: self.values.iter().map(|v| v * k).collect(),
        }
    }
}

/// `count` log-spaced frequencies from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count)
                .map(|i| {
                    if i == count - 1 {
                        hi
                    } else {
                        10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64)
                    }
                })
                .collect()
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Random stable continuous system built from a block-diagonal modal form
    /// and a random similarity transform.
    pub(crate) fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> ContinuousStateSpace {
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut i = 0;
        while i < n {
            let sigma = -rng.random_range(2.0..400.0);
            if i + 1 < n && rng.random_bool(0.5) {
                let w = rng.random_range(5.0..600.0);
                a[(i, i)] = sigma;
                a[(i + 1, i + 1)] = sigma;
                a[(i, i + 1)] = w;
                a[(i + 1, i)] = -w;
                i += 2;
            } else {
                a[(i, i)] = sigma;
                i += 1;
            }
        }
        let t = DMatrix::<f64>::from_fn(n, n, |r, c| {
            rng.random_range(-1.0..1.0) + if r == c { 2.0 } else { 0.0 }
        });
        let ti = t.clone().try_inverse().unwrap();
        let b = DMatrix::<f64>::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::<f64>::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
        ContinuousStateSpace::new(&t * a * &ti, &t * b, c * ti, DMatrix::zeros(1, 1)).unwrap()
    }

    #[test]
    fn scalar_log() {
        let dt: f64 = 4e-4;
        let sys = DiscreteStateSpace::new(
            DMatrix::from_element(1, 1, (-10.0 * dt).exp()),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            dt,
        )
        .unwrap();
        let c = d2c_zoh(&sys).unwrap();
        assert!((c.a[(0, 0)] + 10.0).abs() < 1e-10);
    }

    #[test]
    fn integrator_pole_maps_to_origin() {
        let dt = 4e-4;
        let sys = DiscreteStateSpace::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            dt,
        )
        .unwrap();
        let c = d2c_zoh(&sys).unwrap();
        assert!(c.a[(0, 0)].abs() < 1e-14);
        assert!((c.b[(0, 0)] - 2.5 / dt).abs() < 1e-9);
    }

    #[test]
    fn negative_real_eigenvalue_is_ambiguous() {
        let sys = DiscreteStateSpace::new(
            DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.0, 0.9]),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(1, 2, 1.0),
            DMatrix::zeros(1, 1),
            1e-3,
        )
        .unwrap();
        assert!(matches!(
            d2c_zoh(&sys),
            Err(Error::LogBranchAmbiguity { .. })
        ));
    }

    #[test]
    fn c2d_d2c_round_trip_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let sys = random_stable(&mut rng, 6);
            let dt = 4e-4;
            let disc = c2d_zoh(&sys, dt);
            let back = d2c_zoh(&disc).unwrap();
            let scale = sys.a.amax();
            assert!(max_abs_diff(&back.a, &sys.a) < 1e-8 * scale, "A mismatch");
            assert!(max_abs_diff(&back.b, &sys.b) < 1e-8 * (1.0 + sys.b.amax()));
            // and the discrete side reproduces exactly
            let again = c2d_zoh(&back, dt);
            assert!(max_abs_diff(&again.a, &disc.a) < 1e-9);
            assert!(max_abs_diff(&again.b, &disc.b) < 1e-9 * (1.0 + disc.b.amax()));
        }
    }

    #[test]
    fn expm_matches_rotation() {
        let w = 3.0;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0]);
        let e = expm(&a);
        assert!((e[(0, 0)] - w.cos()).abs() < 1e-14);
        assert!((e[(0, 1)] - w.sin()).abs() < 1e-14);
        let big = expm(&(&a * 40.0));
        assert!((big[(0, 0)] - (40.0 * w).cos()).abs() < 1e-11);
    }

    #[test]
    fn logm_handles_jordan_block() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        let l = logm(&a).unwrap();
        assert!(max_abs_diff(&expm(&l), &a) < 1e-13);
    }

    #[test]
    fn markov_parameters() {
        let sys = DiscreteStateSpace::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 3.0),
            1.0,
        )
        .unwrap();
        assert_eq!(sys.impulse_response(4), vec![3.0, 2.0, 1.0, 0.5]);
    }

    #[test]
    fn frequency_response_lookup_and_validation() {
        let fr = FrequencyResponse::new(
            vec![1.0, 2.0, 5.0],
            vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(2.0, 0.0),
                Complex64::new(3.0, 0.0),
            ],
        )
        .unwrap();
        assert_eq!(fr.lookup(2.0), Some(Complex64::new(2.0, 0.0)));
        assert_eq!(fr.lookup(3.0), None);
        assert!(FrequencyResponse::new(vec![2.0, 1.0], vec![Complex64::default(); 2]).is_err());
        let g = log_grid(0.1, 1000.0, 100);
        assert_eq!(g.len(), 100);
        assert_eq!(g[99], 1000.0);
        assert!((g[0] - 0.1).abs() < 1e-15);
    }
}
