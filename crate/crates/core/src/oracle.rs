//! Ground-truth analysis tools that know the true path atoms.
//!
//! Nothing here is available to the attacker; these routines exist so tests
//! and experiments can check what a precoder did to each physical path
//! independently of the estimation pipeline.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::array::subcarrier_frequencies;
use crate::channel::Channel;
use crate::linalg::{detrended, linear_fit, std_dev, unwrap_phase, CMatrix, CVector};

/// Per-subcarrier least-squares coefficients of `channel` on the given
/// frequency-flat rank-1 atoms. Returns `coeffs[atom][subcarrier]`.
pub fn atom_projection(channel: &Channel, atoms: &[CMatrix]) -> Vec<Vec<Complex64>> {
    let k = atoms.len();
    let n = channel.num_rx() * channel.num_tx();
    let a = CMatrix::from_fn(n, k, |r, c| atoms[c][(r % channel.num_rx(), r / channel.num_rx())]);
    let gram = a.adjoint() * &a;
    let gram_inv = gram
        .try_inverse()
        .expect("atoms must be linearly independent");
    let proj = gram_inv * a.adjoint();
    let mut out = vec![Vec::with_capacity(channel.num_subcarriers()); k];
    for h in channel.matrices() {
        let y = CVector::from_fn(n, |r, _| h[(r % channel.num_rx(), r / channel.num_rx())]);
        let c = &proj * y;
        for (j, col) in out.iter_mut().enumerate() {
            col.push(c[j]);
        }
    }
    out
}

/// Delay implied by the phase slope of a per-subcarrier coefficient series.
pub fn phase_slope_delay(channel: &Channel, coeffs: &[Complex64]) -> f64 {
    let f = subcarrier_frequencies(&channel.band).expect("validated band");
    let ph = unwrap_phase(&coeffs.iter().map(|c| c.arg()).collect::<Vec<_>>());
    let (slope, _) = linear_fit(&f, &ph);
    -slope / (2.0 * PI)
}

/// Standard deviation of the phase after removing the best single slope.
pub fn phase_residual_std(channel: &Channel, coeffs: &[Complex64]) -> f64 {
    let f = subcarrier_frequencies(&channel.band).expect("validated band");
    let ph = unwrap_phase(&coeffs.iter().map(|c| c.arg()).collect::<Vec<_>>());
    std_dev(&detrended(&f, &ph))
}

/// Delay of every atom's coefficient series.
pub fn atom_projection_tofs(channel: &Channel, atoms: &[CMatrix]) -> Vec<f64> {
    atom_projection(channel, atoms)
        .iter()
        .map(|c| phase_slope_delay(channel, c))
        .collect()
}
