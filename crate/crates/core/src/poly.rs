//! Real polynomials in descending-power coefficient order.

use nalgebra::{DMatrix, Schur};
use num_complex::Complex64;

pub(crate) fn eval(coeffs: &[f64], x: Complex64) -> Complex64 {
    coeffs
        .iter()
        .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * x + c)
}

/// Monic polynomial with the given roots. Conjugate pairs are expected; the
/// imaginary residue of the expansion is dropped.
pub(crate) fn from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= ci * r;
        }
        c = next;
    }
    c.into_iter().map(|z| z.re).collect()
}

pub(crate) fn eigenvalues(a: &DMatrix<f64>) -> Option<Vec<Complex64>> {
    if a.nrows() == 0 {
        return Some(Vec::new());
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000)?;
    Some(schur.complex_eigenvalues().iter().copied().collect())
}

/// Characteristic polynomial `det(sI - A)`.
pub(crate) fn charpoly(a: &DMatrix<f64>) -> Option<Vec<f64>> {
    eigenvalues(a).map(|r| from_roots(&r))
}

/// Roots via the eigenvalues of the companion matrix. Leading zeros are ignored.
pub(crate) fn roots(coeffs: &[f64]) -> Option<Vec<Complex64>> {
    let c = trim_leading(coeffs);
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Some(Vec::new());
    }
    let lead = c[0];
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        comp[(0, j)] = -c[j + 1] / lead;
    }
    for i in 1..n {
        comp[(i, i - 1)] = 1.0;
    }
    eigenvalues(&comp)
}

pub(crate) fn trim_leading(coeffs: &[f64]) -> &[f64] {
    let first = coeffs
        .iter()
        .position(|&c| c != 0.0)
        .unwrap_or(coeffs.len());
    if first == coeffs.len() {
        &coeffs[coeffs.len().saturating_sub(1)..]
    } else {
        &coeffs[first..]
    }
}

#[cfg(test)]
pub(crate) fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `a - b`, aligned at the constant term.
pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    let mut out = vec![0.0; n];
    for (i, &x) in a.iter().rev().enumerate() {
        out[n - 1 - i] += x;
    }
    for (i, &x) in b.iter().rev().enumerate() {
        out[n - 1 - i] -= x;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_and_back() {
        let p = from_roots(&[
            Complex64::new(-1.0, 2.0),
            Complex64::new(-1.0, -2.0),
            Complex64::new(-3.0, 0.0),
        ]);
        // (s^2 + 2s + 5)(s + 3)
        let expect = [1.0, 5.0, 11.0, 15.0];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut r = roots(&p).unwrap();
        r.sort_by(|a, b| {
            a.re.partial_cmp(&b.re)
                .unwrap()
                .then(a.im.partial_cmp(&b.im).unwrap())
        });
        assert!((r[0] - Complex64::new(-3.0, 0.0)).norm() < 1e-10);
        assert!((r[1] - Complex64::new(-1.0, -2.0)).norm() < 1e-10);
    }

    #[test]
    fn arithmetic() {
        assert_eq!(mul(&[1.0, 1.0], &[1.0, -1.0]), vec![1.0, 0.0, -1.0]);
        assert_eq!(sub(&[1.0, 2.0, 3.0], &[1.0, 1.0]), vec![1.0, 1.0, 2.0]);
        assert_eq!(trim_leading(&[0.0, 0.0, 2.0, 1.0]), &[2.0, 1.0]);
        assert_eq!(trim_leading(&[0.0, 0.0]), &[0.0]);
        assert_eq!(
            eval(&[1.0, 0.0, -4.0], Complex64::new(2.0, 0.0)),
            Complex64::new(0.0, 0.0)
        );
    }
}
