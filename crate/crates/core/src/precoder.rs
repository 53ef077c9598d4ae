//! Transmit precoders: the nulling baseline, the naive and selective delay
//! beamformers, multipath re-injection and the final obfuscating precoder,
//! plus application to a channel and reversal.
//!
//! All constructors take the direct path's transmit steering vector `v_d`
//! (and, where relevant, the reflections' angles of departure) and return a
//! [`Precoder`] whose per-subcarrier Frobenius norm is `sqrt(N_TX)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{steering_vector, subcarrier_frequencies, Angle, ArrayConfig, BandConfig};
use crate::channel::Channel;
use crate::error::{Error, Result};
use crate::linalg::{
    cis, columns_to_matrix, fix_phase, frobenius_sq, orthogonal_complement, orthonormal_span,
    pseudo_inverse, CMatrix, CVector,
};

/// Smallest acceptable `|v_d^H n_r| / (||v_d|| ||n_r||)`.
pub const COMPENSATION_THRESHOLD: f64 = 0.05;

/// Default bound on the per-subcarrier condition number for reversal.
pub const DEFAULT_MAX_CONDITION: f64 = 1e6;

/// Stable identifiers used in config files and CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    Identity,
    NullDirect,
    NaiveDelay,
    SelectiveDelayOnly,
    NaiveMpInjection,
    Dolos,
}

impl VariantTag {
    pub const ALL: [VariantTag; 6] = [
        VariantTag::Identity,
        VariantTag::NullDirect,
        VariantTag::NaiveDelay,
        VariantTag::SelectiveDelayOnly,
        VariantTag::NaiveMpInjection,
        VariantTag::Dolos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantTag::Identity => "identity",
            VariantTag::NullDirect => "null_direct",
            VariantTag::NaiveDelay => "naive_delay",
            VariantTag::SelectiveDelayOnly => "selective_delay_only",
            VariantTag::NaiveMpInjection => "naive_mp_injection",
            VariantTag::Dolos => "dolos",
        }
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        VariantTag::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown precoder variant {s:?}")))
    }
}

/// Per-subcarrier `N_TX x N_TX` precoding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    matrices: Vec<CMatrix>,
    pub variant: VariantTag,
    /// Delay applied to the direct path in seconds, 0 where inapplicable.
    pub delay_used: f64,
}

impl Precoder {
    pub fn from_matrices(matrices: Vec<CMatrix>, variant: VariantTag, delay_used: f64) -> Result<Self> {
        let Some(first) = matrices.first() else {
            return Err(Error::Dims("precoder needs at least one subcarrier".into()));
        };
        let n = first.nrows();
        if matrices.iter().any(|m| m.shape() != (n, n)) {
            return Err(Error::Dims("precoder matrices must be square and equal-sized".into()));
        }
        if matrices
            .iter()
            .flat_map(|m| m.iter())
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::Config("precoder entries must be finite".into()));
        }
        Ok(Precoder {
            matrices,
            variant,
            delay_used,
        })
    }

    pub fn num_tx(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.matrices.len()
    }

    pub fn subcarrier(&self, i: usize) -> &CMatrix {
        &self.matrices[i]
    }

    pub fn matrices(&self) -> &[CMatrix] {
        &self.matrices
    }
}

/// `v_d^H n_r = alpha exp(j phi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compensation {
    pub alpha: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    Constant,
    UniformRandom,
}

/// How the direct-path delay is chosen for each packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayPolicy {
    pub mode: DelayMode,
    /// Seconds; used by constant mode.
    pub base: f64,
    /// Seconds; width of the random draw.
    pub window: f64,
    /// Seconds; margin above the largest excess delay.
    pub guard: f64,
}

impl Default for DelayPolicy {
    fn default() -> Self {
        DelayPolicy {
            mode: DelayMode::UniformRandom,
            base: 40e-9,
            window: 40e-9,
            guard: 10e-9,
        }
    }
}

impl DelayPolicy {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [(self.base, "base"), (self.window, "window"), (self.guard, "guard")] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("delay policy {name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Pick the direct-path delay. Random mode draws uniformly from
/// `[max(excess) + guard, max(excess) + guard + window]`.
pub fn draw_delay<R: Rng + ?Sized>(policy: &DelayPolicy, excess: &[f64], rng: &mut R) -> Result<f64> {
    policy.validate()?;
    match policy.mode {
        DelayMode::Constant => Ok(policy.base),
        DelayMode::UniformRandom => {
            let max = excess
                .iter()
                .copied()
                .reduce(f64::max)
                .ok_or(Error::NoReflections)?;
            let lo = max + policy.guard;
            if policy.window == 0.0 {
                return Ok(lo);
            }
            Ok(rng.random_range(lo..=lo + policy.window))
        }
    }
}

fn check_dims(v_d: &CVector) -> Result<usize> {
    let n = v_d.len();
    if n == 0 || v_d.norm() == 0.0 {
        return Err(Error::Dims("direct-path steering vector is empty or zero".into()));
    }
    Ok(n)
}

/// Scale each subcarrier by a real factor so its Frobenius norm squared is `N_TX`.
fn normalize_each(mut mats: Vec<CMatrix>) -> Vec<CMatrix> {
    let n = mats[0].nrows() as f64;
    for m in mats.iter_mut() {
        let p = frobenius_sq(m);
        if p > 0.0 {
            *m *= Complex64::from((n / p).sqrt());
        }
    }
    mats
}

pub fn identity_precoder(n_tx: usize, n_sub: usize) -> Result<Precoder> {
    if n_tx == 0 || n_sub == 0 {
        return Err(Error::Dims("identity precoder needs n_tx, n_sub >= 1".into()));
    }
    Precoder::from_matrices(vec![CMatrix::identity(n_tx, n_tx); n_sub], VariantTag::Identity, 0.0)
}

/// Orthonormal basis of the null space of `v_d^H`, one column per
/// dimension, in a fixed Gram-Schmidt order with each column's first
/// significant entry real and positive.
pub fn direct_path_null_basis(v_d: &CVector) -> Result<CMatrix> {
    let n = check_dims(v_d)?;
    if n < 2 {
        return Err(Error::NoNullSpace);
    }
    let cols = orthogonal_complement(std::slice::from_ref(v_d), n);
    if cols.len() != n - 1 {
        return Err(Error::SingularBasis);
    }
    Ok(columns_to_matrix(&cols, n))
}

/// Beamform through a fixed vector orthogonal to the direct path:
/// `P = v_n v_n^H`, power-normalised.
pub fn nulling_precoder(v_d: &CVector, n_sub: usize) -> Result<Precoder> {
    let basis = direct_path_null_basis(v_d)?;
    let v_n: CVector = basis.column(basis.ncols() - 1).into_owned();
    let p = &v_n * v_n.adjoint();
    Precoder::from_matrices(normalize_each(vec![p; n_sub.max(1)]), VariantTag::NullDirect, 0.0)
}

/// `P[f_i] = v_d v_d^H exp(-j 2 pi f_i tau) / N_TX`, power-normalised.
pub fn naive_delay_precoder(v_d: &CVector, tau_delay: f64, band: &BandConfig) -> Result<Precoder> {
    let n = check_dims(v_d)?;
    if !(tau_delay >= 0.0) {
        return Err(Error::Config("delay must be non-negative".into()));
    }
    let base = (v_d * v_d.adjoint()) / Complex64::from(n as f64);
    let mats = subcarrier_frequencies(band)?
        .iter()
        .map(|&f| &base * cis(-2.0 * PI * f * tau_delay))
        .collect();
    Precoder::from_matrices(normalize_each(mats), VariantTag::NaiveDelay, tau_delay)
}

/// Unit vector in the null space of the reflections' transmit steering
/// vectors, chosen as the normalised projection of `v_d` onto that null space
/// (the null-space vector best aligned with the direct path). With a single
/// null dimension this is the right-singular vector of the smallest singular
/// value. Phase convention: first significant entry real and positive.
pub fn reflection_null_vector(
    v_d: &CVector,
    reflection_aods: &[Angle],
    tx_array: &ArrayConfig,
    wavelength: f64,
) -> Result<CVector> {
    let n = check_dims(v_d)?;
    if n != tx_array.num_antennas {
        return Err(Error::Dims("v_d length differs from the transmit array".into()));
    }
    let m = reflection_aods.len();
    if m >= n {
        return Err(Error::ReflectionRankTooHigh {
            reflections: m,
            antennas: n,
        });
    }
    let rows: Vec<CVector> = reflection_aods
        .iter()
        .map(|a| steering_vector(tx_array, *a, wavelength))
        .collect::<Result<_>>()?;
    let span = orthonormal_span(&rows, 1e-10);
    let mut w = v_d.clone();
    for _ in 0..2 {
        for q in &span {
            let c = q.dotc(&w);
            w.axpy(-c, q, crate::linalg::ONE);
        }
    }
    let mut n_r = if w.norm() > 1e-12 * v_d.norm() {
        w.normalize()
    } else {
        // v_d lies in the reflections' span; any null vector will do and the
        // compensation check downstream rejects it.
        orthogonal_complement(&rows, n)
            .pop()
            .ok_or(Error::ReflectionRankTooHigh {
                reflections: m,
                antennas: n,
            })?
    };
    fix_phase(&mut n_r, 1e-12);
    Ok(n_r)
}

pub fn compensation(v_d: &CVector, n_r: &CVector) -> Result<Compensation> {
    let ip = v_d.dotc(n_r);
    let alpha = ip.norm();
    let denom = v_d.norm() * n_r.norm();
    let normalized = if denom > 0.0 { alpha / denom } else { 0.0 };
    if !(normalized >= COMPENSATION_THRESHOLD) {
        return Err(Error::IllConditionedCompensation(normalized));
    }
    let mut phi = ip.arg();
    if phi <= -PI {
        phi += 2.0 * PI;
    }
    Ok(Compensation { alpha, phi })
}

/// Least-squares `N A ~ I`, i.e. `N (N^H N)^-1 N^H`; the orthogonal projector
/// onto the columns of `N`.
pub fn multipath_supplement(basis: &CMatrix) -> Result<CMatrix> {
    let gram = basis.adjoint() * basis;
    let s = crate::linalg::singular_values(&gram);
    if s.is_empty() || s[s.len() - 1] <= 1e-12 * s[0].max(1e-300) {
        return Err(Error::SingularBasis);
    }
    let inv = gram.try_inverse().ok_or(Error::SingularBasis)?;
    Ok(basis * inv * basis.adjoint())
}

/// Ingredients shared by the selective-delay family.
struct SelectiveParts {
    /// `(1/alpha) n_r v_d^H exp(-j phi)`, frequency-flat.
    beam: CMatrix,
    freqs: Vec<f64>,
}

fn selective_parts(
    v_d: &CVector,
    reflection_aods: &[Angle],
    tx_array: &ArrayConfig,
    band: &BandConfig,
    compensate: bool,
) -> Result<SelectiveParts> {
    check_dims(v_d)?;
    if reflection_aods.is_empty() {
        return Err(Error::NoReflections);
    }
    let n_r = reflection_null_vector(v_d, reflection_aods, tx_array, band.center_wavelength())?;
    let comp = compensation(v_d, &n_r)?;
    let beam = if compensate {
        (&n_r * v_d.adjoint()) * (cis(-comp.phi) / comp.alpha)
    } else {
        &n_r * v_d.adjoint()
    };
    Ok(SelectiveParts {
        beam,
        freqs: subcarrier_frequencies(band)?,
    })
}

fn delayed(parts: &SelectiveParts, tau: f64, extra: Option<&CMatrix>) -> Vec<CMatrix> {
    parts
        .freqs
        .iter()
        .map(|&f| {
            let mut p = &parts.beam * cis(-2.0 * PI * f * tau);
            if let Some(e) = extra {
                p += e;
            }
            p
        })
        .collect()
}

fn check_delay(tau: f64) -> Result<()> {
    if tau >= 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("delay must be non-negative, got {tau}")))
    }
}

/// `P[f_i] = (1/alpha) n_r v_d^H exp(-j 2 pi f_i tau - j phi)`: delays the
/// direct path and removes every reflection.
pub fn selective_delay_only_precoder(
    v_d: &CVector,
    reflection_aods: &[Angle],
    tau_delay: f64,
    tx_array: &ArrayConfig,
    band: &BandConfig,
) -> Result<Precoder> {
    check_delay(tau_delay)?;
    let parts = selective_parts(v_d, reflection_aods, tx_array, band, true)?;
    Precoder::from_matrices(
        normalize_each(delayed(&parts, tau_delay, None)),
        VariantTag::SelectiveDelayOnly,
        tau_delay,
    )
}

/// The obfuscating precoder: the selective delay beam plus the projector onto
/// the null space of `v_d^H`, which restores the reflections without touching
/// the direct path.
pub fn dolos_precoder(
    v_d: &CVector,
    reflection_aods: &[Angle],
    tau_delay: f64,
    tx_array: &ArrayConfig,
    band: &BandConfig,
) -> Result<Precoder> {
    build_dolos(v_d, reflection_aods, tau_delay, tx_array, band, true)
}

/// Same as [`dolos_precoder`] but without the `1/alpha` and `exp(-j phi)`
/// correction on the delayed beam.
pub fn uncompensated_dolos_precoder(
    v_d: &CVector,
    reflection_aods: &[Angle],
    tau_delay: f64,
    tx_array: &ArrayConfig,
    band: &BandConfig,
) -> Result<Precoder> {
    build_dolos(v_d, reflection_aods, tau_delay, tx_array, band, false)
}

fn build_dolos(
    v_d: &CVector,
    reflection_aods: &[Angle],
    tau_delay: f64,
    tx_array: &ArrayConfig,
    band: &BandConfig,
    compensate: bool,
) -> Result<Precoder> {
    check_delay(tau_delay)?;
    let parts = selective_parts(v_d, reflection_aods, tx_array, band, compensate)?;
    let supplement = multipath_supplement(&direct_path_null_basis(v_d)?)?;
    Precoder::from_matrices(
        normalize_each(delayed(&parts, tau_delay, Some(&supplement))),
        VariantTag::Dolos,
        tau_delay,
    )
}

/// Ablation: re-inject the reflections with a plain identity, which also
/// leaks an undelayed copy of the direct path.
pub fn naive_mp_injection_precoder(
    v_d: &CVector,
    reflection_aods: &[Angle],
    tau_delay: f64,
    tx_array: &ArrayConfig,
    band: &BandConfig,
) -> Result<Precoder> {
    check_delay(tau_delay)?;
    let parts = selective_parts(v_d, reflection_aods, tx_array, band, true)?;
    let eye = CMatrix::identity(v_d.len(), v_d.len());
    Precoder::from_matrices(
        normalize_each(delayed(&parts, tau_delay, Some(&eye))),
        VariantTag::NaiveMpInjection,
        tau_delay,
    )
}

/// Obfuscating precoder whose reflection null vector is recomputed
/// independently on every subcarrier from the reflection channel `H_r(f_i)`
/// (right-singular vector of the smallest singular value, with whatever
/// phase the decomposition returns). With `compensate` the per-subcarrier
/// `1/alpha_i exp(-j phi_i)` correction is applied; without it the phase of
/// each subcarrier's null vector leaks into the direct path.
pub fn dolos_precoder_per_subcarrier(
    v_d: &CVector,
    reflection_channel: &Channel,
    tau_delay: f64,
    compensate: bool,
) -> Result<Precoder> {
    let n = check_dims(v_d)?;
    check_delay(tau_delay)?;
    if reflection_channel.num_tx() != n {
        return Err(Error::Dims("reflection channel width differs from v_d".into()));
    }
    if reflection_channel.power() == 0.0 {
        return Err(Error::NoReflections);
    }
    let supplement = multipath_supplement(&direct_path_null_basis(v_d)?)?;
    let freqs = subcarrier_frequencies(&reflection_channel.band)?;
    let mut mats = Vec::with_capacity(freqs.len());
    for (h_r, f) in reflection_channel.matrices().iter().zip(freqs) {
        let gram = h_r.adjoint() * h_r;
        let svd = gram.svd(false, true);
        let v_t = svd.v_t.as_ref().expect("requested V^H");
        let s = &svd.singular_values;
        let (imin, smin) = s
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
        let smax = s.iter().copied().fold(0.0, f64::max);
        if smin > 1e-9 * smax {
            return Err(Error::ReflectionRankTooHigh {
                reflections: n,
                antennas: n,
            });
        }
        let n_r: CVector = v_t.row(imin).adjoint();
        let comp = compensation(v_d, &n_r)?;
        let beam = if compensate {
            (&n_r * v_d.adjoint()) * (cis(-comp.phi) / comp.alpha)
        } else {
            &n_r * v_d.adjoint()
        };
        mats.push(beam * cis(-2.0 * PI * f * tau_delay) + &supplement);
    }
    Precoder::from_matrices(normalize_each(mats), VariantTag::Dolos, tau_delay)
}

/// Effective channel `H(f_i) P[f_i]` on every subcarrier.
pub fn apply_precoder(channel: &Channel, p: &Precoder) -> Result<Channel> {
    if channel.num_tx() != p.num_tx() || channel.num_subcarriers() != p.num_subcarriers() {
        return Err(Error::Dims(format!(
            "channel {:?} vs precoder {}x{} over {} subcarriers",
            channel.dims(),
            p.num_tx(),
            p.num_tx(),
            p.num_subcarriers()
        )));
    }
    let mut out = channel.clone();
    for (h, m) in out.matrices_mut().iter_mut().zip(p.matrices()) {
        *h = &*h * m;
    }
    Ok(out)
}

/// Per-subcarrier Moore-Penrose pseudo-inverse, refused when any subcarrier's
/// condition number exceeds `max_condition`.
pub fn invert_precoder(p: &Precoder, max_condition: f64) -> Result<Precoder> {
    let mut mats = Vec::with_capacity(p.num_subcarriers());
    for m in p.matrices() {
        let (pinv, cond) = pseudo_inverse(m)?;
        if !(cond <= max_condition) {
            return Err(Error::IllConditionedPrecoder(cond));
        }
        mats.push(pinv);
    }
    Precoder::from_matrices(mats, p.variant, p.delay_used)
}
