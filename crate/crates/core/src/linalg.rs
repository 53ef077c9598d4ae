//! Small complex linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub(crate) const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// `exp(j phase)`.
#[inline]
pub fn cis(phase: f64) -> Complex64 {
    Complex64::from_polar(1.0, phase)
}

pub fn frobenius_sq(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// Rotate `v` so that its first entry with magnitude above `tol` is real and
/// positive. Leaves an all-(near-)zero vector untouched.
pub fn fix_phase(v: &mut CVector, tol: f64) {
    if let Some(z) = v.iter().find(|z| z.norm() > tol).copied() {
        let rot = z.conj() / z.norm();
        for e in v.iter_mut() {
            *e *= rot;
        }
    }
}

/// Orthonormal basis of the span of `vectors` by modified Gram-Schmidt with
/// one re-orthogonalisation pass. Vectors whose residual norm falls below
/// `rel_tol` times their original norm are treated as dependent.
pub fn orthonormal_span(vectors: &[CVector], rel_tol: f64) -> Vec<CVector> {
    let mut basis: Vec<CVector> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dotc(&w);
                w.axpy(-c, q, ONE);
            }
        }
        let n = w.norm();
        if n > rel_tol * norm0 {
            basis.push(w / Complex64::from(n));
        }
    }
    basis
}

/// Orthonormal basis for the orthogonal complement of `span` in C^dim.
///
/// Built by Gram-Schmidt over the canonical basis `e_0..e_{dim-1}` after the
/// spanning vectors, so the ordering is deterministic. Each returned column
/// has its first significant entry made real and positive.
pub fn orthogonal_complement(span: &[CVector], dim: usize) -> Vec<CVector> {
    let span_basis = orthonormal_span(span, 1e-10);
    let rank = span_basis.len();
    let mut all = span_basis;
    for k in 0..dim {
        if all.len() == dim {
            break;
        }
        let mut e = CVector::zeros(dim);
        e[k] = ONE;
        let mut w = e;
        for _ in 0..2 {
            for q in &all {
                let c = q.dotc(&w);
                w.axpy(-c, q, ONE);
            }
        }
        let n = w.norm();
        if n > 1e-8 {
            all.push(w / Complex64::from(n));
        }
    }
    all.into_iter()
        .skip(rank)
        .map(|mut v| {
            fix_phase(&mut v, 1e-12);
            v
        })
        .collect()
}

pub fn columns_to_matrix(cols: &[CVector], rows: usize) -> CMatrix {
    CMatrix::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

/// Singular values in descending order.
pub fn singular_values(m: &CMatrix) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Moore-Penrose pseudo-inverse together with the 2-norm condition number of
/// the input (infinite when it is singular).
pub fn pseudo_inverse(m: &CMatrix) -> Result<(CMatrix, f64)> {
    let svd = m.clone().svd(true, true);
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let eps = smax * 1e-14 * m.nrows().max(m.ncols()) as f64;
    let pinv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::Dims(format!("pseudo-inverse failed: {e}")))?;
    Ok((pinv, cond))
}

/// Unwrap a phase sequence so consecutive differences lie in (-pi, pi].
pub fn unwrap_phase(phases: &[f64]) -> Vec<f64> {
    use std::f64::consts::{PI, TAU};
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    for (i, &p) in phases.iter().enumerate() {
        if i > 0 {
            let prev = phases[i - 1];
            let mut d = p - prev;
            while d > PI {
                d -= TAU;
                offset -= TAU;
            }
            while d <= -PI {
                d += TAU;
                offset += TAU;
            }
        }
        out.push(p + offset);
    }
    out
}

/// Ordinary least-squares line fit, returns `(slope, intercept)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Residuals of `y` about its least-squares line.
pub fn detrended(x: &[f64], y: &[f64]) -> Vec<f64> {
    let (m, c) = linear_fit(x, y);
    x.iter().zip(y).map(|(a, b)| b - (m * a + c)).collect()
}

pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}
