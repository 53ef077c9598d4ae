//! The access point side: channel estimation from preambles, AoA-ToF
//! profiles (2D MUSIC and Bartlett), successive-cancellation path
//! extraction, direct path selection, ranging and the packet-averaging
//! counterattack.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::array::{subcarrier_frequencies, Angle, BandConfig};
use crate::channel::{add_awgn, Channel};
use crate::error::{Error, Result};
use crate::linalg::{cis, linear_fit, unwrap_phase, CMatrix, CVector};

/// Known per-subcarrier training symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct Preamble {
    symbols: Vec<Complex64>,
}

impl Preamble {
    pub fn new(symbols: Vec<Complex64>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Dims("empty preamble".into()));
        }
        if let Some(bad) = symbols.iter().find(|z| (z.norm() - 1.0).abs() > 1e-12) {
            return Err(Error::Domain(bad.norm()));
        }
        Ok(Preamble { symbols })
    }

    pub fn all_ones(num_subcarriers: usize) -> Self {
        Preamble {
            symbols: vec![Complex64::from(1.0); num_subcarriers],
        }
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }
}

/// Samples received over `N_TX` preamble symbols: `[sub]` matrices indexed
/// `(rx_antenna, symbol)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedBlock {
    samples: Channel,
}

impl ReceivedBlock {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.samples.dims()
    }

    pub fn sample(&self, rx: usize, symbol: usize, sub: usize) -> Complex64 {
        self.samples.entry(rx, symbol, sub)
    }
}

fn check_preamble(n_sub: usize, preamble: &Preamble) -> Result<()> {
    if preamble.symbols.len() != n_sub {
        return Err(Error::Dims(format!(
            "preamble has {} symbols, channel {} subcarriers",
            preamble.symbols.len(),
            n_sub
        )));
    }
    Ok(())
}

/// Symbol `k` excites transmit column `k`; AWGN at `snr_db` relative to the
/// mean received entry power (`f64::INFINITY` for noiseless).
pub fn transmit_preamble<R: Rng + ?Sized>(
    effective_channel: &Channel,
    preamble: &Preamble,
    snr_db: f64,
    rng: &mut R,
) -> Result<ReceivedBlock> {
    check_preamble(effective_channel.num_subcarriers(), preamble)?;
    let mut rx = effective_channel.clone();
    for (m, l) in rx.matrices_mut().iter_mut().zip(&preamble.symbols) {
        *m *= *l;
    }
    Ok(ReceivedBlock {
        samples: add_awgn(&rx, snr_db, rng),
    })
}

/// `H(f_i) = R[f_i] / L[i]`, assuming no precoding.
pub fn estimate_channel(received: &ReceivedBlock, preamble: &Preamble) -> Result<Channel> {
    check_preamble(received.samples.num_subcarriers(), preamble)?;
    let mut h = received.samples.clone();
    for (m, l) in h.matrices_mut().iter_mut().zip(&preamble.symbols) {
        *m /= *l;
    }
    Ok(h)
}

/// Search grid for profiles and path extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub aoa_min_deg: f64,
    pub aoa_max_deg: f64,
    pub aoa_step_deg: f64,
    pub delay_min: f64,
    pub delay_max: f64,
    pub delay_step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            aoa_min_deg: -90.0,
            aoa_max_deg: 90.0,
            aoa_step_deg: 1.0,
            delay_min: 0.0,
            delay_max: 200e-9,
            delay_step: 1e-9,
        }
    }
}

fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|k| lo + k as f64 * step).collect()
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.aoa_step_deg > 0.0
            && self.delay_step > 0.0
            && self.aoa_min_deg >= -90.0
            && self.aoa_max_deg <= 90.0
            && self.aoa_min_deg <= self.aoa_max_deg
            && self.delay_min <= self.delay_max
            && [self.aoa_min_deg, self.aoa_max_deg, self.delay_min, self.delay_max]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid grid {self:?}")))
        }
    }

    pub fn angle_axis(&self) -> Vec<f64> {
        axis(self.aoa_min_deg, self.aoa_max_deg, self.aoa_step_deg)
    }

    pub fn delay_axis(&self) -> Vec<f64> {
        axis(self.delay_min, self.delay_max, self.delay_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMethod {
    Music,
    Bartlett,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub grid: GridSpec,
    pub method: ProfileMethod,
    /// Eigenvalues this many dB below the largest form the noise subspace.
    pub gap_db: f64,
    /// Smoothing subarray size; `None` uses `N_RX - 1` antennas and
    /// `ceil(N_sub / 2)` subcarriers.
    pub subarray_antennas: Option<usize>,
    pub subarray_subcarriers: Option<usize>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            grid: GridSpec::default(),
            method: ProfileMethod::Music,
            gap_db: 20.0,
            subarray_antennas: None,
            subarray_subcarriers: None,
        }
    }
}

/// Power over an (angle, delay) grid, `grid[angle_bin][delay_bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AoAToFProfile {
    pub grid: Vec<Vec<f64>>,
    pub angle_axis: Vec<f64>,
    pub delay_axis: Vec<f64>,
}

/// Minimum separation between reported peaks.
pub const PEAK_MIN_SEPARATION_DEG: f64 = 3.0;
pub const PEAK_MIN_SEPARATION_S: f64 = 5e-9;

impl AoAToFProfile {
    /// Local maxima (8-neighbourhood) ranked by power, greedily thinned so no
    /// two are within both separations of each other. Ties keep the lower
    /// angle bin, then the lower delay bin. Endpoints at +-90 degrees are
    /// skipped.
    pub fn peaks(&self, max_peaks: usize) -> Vec<EstimatedPath> {
        let na = self.angle_axis.len();
        let nd = self.delay_axis.len();
        let mut cands = Vec::new();
        for a in 0..na {
            if self.angle_axis[a].abs() >= 90.0 {
                continue;
            }
            for d in 0..nd {
                let v = self.grid[a][d];
                if v <= 0.0 {
                    continue;
                }
                let mut is_max = true;
                'n: for da in -1i64..=1 {
                    for dd in -1i64..=1 {
                        if da == 0 && dd == 0 {
                            continue;
                        }
                        let (x, y) = (a as i64 + da, d as i64 + dd);
                        if x < 0 || y < 0 || x >= na as i64 || y >= nd as i64 {
                            continue;
                        }
                        if self.grid[x as usize][y as usize] > v {
                            is_max = false;
                            break 'n;
                        }
                    }
                }
                if is_max {
                    cands.push((v, a, d));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut out: Vec<EstimatedPath> = Vec::new();
        for (v, a, d) in cands {
            if out.len() >= max_peaks {
                break;
            }
            let (th, tau) = (self.angle_axis[a], self.delay_axis[d]);
            let close = out.iter().any(|p| {
                (p.aoa.degrees() - th).abs() < PEAK_MIN_SEPARATION_DEG
                    && (p.tof - tau).abs() < PEAK_MIN_SEPARATION_S
            });
            if !close {
                out.push(EstimatedPath {
                    aoa: Angle::from_degrees(th).expect("interior bin"),
                    tof: tau,
                    power: v,
                });
            }
        }
        out
    }

    /// First row: empty corner then the delay axis in seconds; each further
    /// row: angle in degrees then the power values.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("angle_deg\\delay_s");
        for d in &self.delay_axis {
            s.push_str(&format!(",{d:e}"));
        }
        s.push('\n');
        for (a, row) in self.angle_axis.iter().zip(&self.grid) {
            s.push_str(&format!("{a}"));
            for v in row {
                s.push_str(&format!(",{v:e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_csv_string().as_bytes()).map_err(io)
    }
}

/// Receive steering vector for `n` antennas at `deg`, half a wavelength or
/// whatever spacing the channel's receive array uses.
fn rx_steering(channel: &Channel, deg: f64) -> Vec<Complex64> {
    let k = channel.rx_array.spacing / channel.band.center_wavelength();
    let s = deg.to_radians().sin();
    (0..channel.num_rx())
        .map(|r| cis(-2.0 * PI * r as f64 * k * s))
        .collect()
}

/// Subcarrier offsets from the first subcarrier, in Hz.
fn freq_offsets(band: &BandConfig) -> Result<Vec<f64>> {
    let f = subcarrier_frequencies(band)?;
    Ok(f.iter().map(|x| x - f[0]).collect())
}

/// `out[t][i] = exp(+j 2 pi df_i tau_t)`, the conjugate delay signature.
fn delay_table(df: &[f64], delays: &[f64]) -> Vec<Vec<Complex64>> {
    delays
        .iter()
        .map(|&t| df.iter().map(|&f| cis(2.0 * PI * f * t)).collect())
        .collect()
}

/// 2D AoA-ToF profile of `channel` on `config.grid`.
pub fn aoa_tof_profile(channel: &Channel, config: &ProfileConfig) -> Result<AoAToFProfile> {
    config.grid.validate()?;
    let (nr, _nt, ns) = channel.dims();
    if nr < 2 && ns < 2 {
        return Err(Error::ProfileUnsupported(
            "need at least 2 antennas or 2 subcarriers".into(),
        ));
    }
    let angle_axis = config.grid.angle_axis();
    let delay_axis = config.grid.delay_axis();
    let grid = match config.method {
        ProfileMethod::Bartlett => bartlett_grid(channel, &angle_axis, &delay_axis)?,
        ProfileMethod::Music => music_grid(channel, config, &angle_axis, &delay_axis)?,
    };
    Ok(AoAToFProfile {
        grid,
        angle_axis,
        delay_axis,
    })
}

/// `sum_j |q^H h_j|^2 / |q|^2` with `q` spanning every antenna and
/// subcarrier.
fn bartlett_grid(channel: &Channel, angles: &[f64], delays: &[f64]) -> Result<Vec<Vec<f64>>> {
    let (nr, nt, ns) = channel.dims();
    let table = delay_table(&freq_offsets(&channel.band)?, delays);
    let norm = (nr * ns) as f64;
    let mut out = vec![vec![0.0; delays.len()]; angles.len()];
    let mut g = vec![Complex64::from(0.0); nt * ns];
    for (a, &th) in angles.iter().enumerate() {
        let u = rx_steering(channel, th);
        for (i, m) in channel.matrices().iter().enumerate() {
            for j in 0..nt {
                let mut acc = Complex64::from(0.0);
                for r in 0..nr {
                    acc += u[r].conj() * m[(r, j)];
                }
                g[j * ns + i] = acc;
            }
        }
        for (t, e) in table.iter().enumerate() {
            let mut p = 0.0;
            for j in 0..nt {
                let row = &g[j * ns..(j + 1) * ns];
                let z: Complex64 = row.iter().zip(e).map(|(x, y)| x * y).sum();
                p += z.norm_sqr();
            }
            out[a][t] = p / norm;
        }
    }
    Ok(out)
}

fn music_grid(
    channel: &Channel,
    config: &ProfileConfig,
    angles: &[f64],
    delays: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let (nr, nt, ns) = channel.dims();
    let la = config.subarray_antennas.unwrap_or(nr.saturating_sub(1).max(1));
    let ls = config.subarray_subcarriers.unwrap_or(ns.div_ceil(2));
    if la == 0 || ls == 0 || la > nr || ls > ns {
        return Err(Error::Config(format!(
            "subarray {la}x{ls} does not fit a {nr}x{ns} channel"
        )));
    }
    let dim = la * ls;
    // smoothed covariance, vector index a * ls + s
    let mut x = CVector::zeros(dim);
    let mut covh = CMatrix::zeros(dim, dim);
    for j in 0..nt {
        for a0 in 0..=(nr - la) {
            for s0 in 0..=(ns - ls) {
                for a in 0..la {
                    for s in 0..ls {
                        x[a * ls + s] = channel.entry(a0 + a, j, s0 + s);
                    }
                }
                covh.gerc(Complex64::from(1.0), &x, &x, Complex64::from(1.0));
            }
        }
    }
    let eig = SymmetricEigen::new(covh);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if !(lmax > 0.0) {
        return Ok(vec![vec![0.0; delays.len()]; angles.len()]);
    }
    let thresh = lmax * 10f64.powf(-config.gap_db / 10.0);
    let signal: Vec<usize> = (0..dim).filter(|&k| eig.eigenvalues[k] >= thresh).collect();
    // conj of each signal eigenvector reshaped to la x ls
    let ek: Vec<DMatrix<Complex64>> = signal
        .iter()
        .map(|&k| {
            let v = eig.eigenvectors.column(k);
            DMatrix::from_fn(la, ls, |a, s| v[a * ls + s].conj())
        })
        .collect();
    let df = freq_offsets(&channel.band)?;
    let table = delay_table(&df[..ls], delays);
    let qn = dim as f64;
    let k = channel.rx_array.spacing / channel.band.center_wavelength();
    let mut out = vec![vec![0.0; delays.len()]; angles.len()];
    for (ai, &th) in angles.iter().enumerate() {
        let s = th.to_radians().sin();
        let u: Vec<Complex64> = (0..la).map(|r| cis(-2.0 * PI * r as f64 * k * s)).collect();
        // w_k[s] = sum_a conj(e_k[a, s]) u_a
        let ws: Vec<Vec<Complex64>> = ek
            .iter()
            .map(|e| (0..ls).map(|s| (0..la).map(|a| e[(a, s)] * u[a]).sum()).collect())
            .collect();
        for (t, tab) in table.iter().enumerate() {
            // q_s carries exp(-j 2 pi df_s tau) = conj(tab[s])
            let mut proj = 0.0;
            for w in &ws {
                let z: Complex64 = w.iter().zip(tab).map(|(x, y)| x * y.conj()).sum();
                proj += z.norm_sqr();
            }
            let resid = (qn - proj).max(qn * 1e-12);
            out[ai][t] = 1.0 / resid;
        }
    }
    Ok(out)
}

/// One extracted propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatedPath {
    pub aoa: Angle,
    /// Seconds.
    pub tof: f64,
    /// Linear; energy of the fitted path in the channel.
    pub power: f64,
}

/// Settings for successive-cancellation extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub max_paths: usize,
    pub residual_threshold: f64,
    /// Coarse search grid; each hit is refined off-grid.
    pub grid: GridSpec,
    pub refinement_sweeps: usize,
    /// A new path is kept only if its energy is at least this many dB above
    /// the per-entry noise power estimated from the residual.
    pub detection_threshold_db: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            max_paths: 5,
            residual_threshold: 1e-3,
            grid: GridSpec {
                aoa_min_deg: -88.0,
                aoa_max_deg: 88.0,
                aoa_step_deg: 2.0,
                delay_min: 0.0,
                delay_max: 200e-9,
                delay_step: 2e-9,
            },
            refinement_sweeps: 10,
            detection_threshold_db: 14.0,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_paths == 0 {
            return Err(Error::Config("max_paths must be >= 1".into()));
        }
        if !(self.residual_threshold >= 0.0) {
            return Err(Error::Config("residual_threshold must be >= 0".into()));
        }
        self.grid.validate()
    }
}

/// Extraction output with the fitted transmit signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub paths: Vec<EstimatedPath>,
    /// Per path, the complex gain on each transmit column (referenced to the
    /// first subcarrier).
    pub signatures: Vec<Vec<Complex64>>,
    /// Residual power over original power.
    pub residual_ratio: f64,
}

/// Channel flattened as `data[(j * ns + i) * nr + r]` for fast inner loops.
struct Flat {
    nr: usize,
    nt: usize,
    ns: usize,
    data: Vec<Complex64>,
    rx_k: f64,
    df: Vec<f64>,
}

impl Flat {
    fn new(ch: &Channel) -> Result<Self> {
        let (nr, nt, ns) = ch.dims();
        let mut data = vec![Complex64::from(0.0); nr * nt * ns];
        for (i, m) in ch.matrices().iter().enumerate() {
            for j in 0..nt {
                for r in 0..nr {
                    data[(j * ns + i) * nr + r] = m[(r, j)];
                }
            }
        }
        Ok(Flat {
            nr,
            nt,
            ns,
            data,
            rx_k: ch.rx_array.spacing / ch.band.center_wavelength(),
            df: freq_offsets(&ch.band)?,
        })
    }

    fn power(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    fn steer(&self, deg: f64) -> Vec<Complex64> {
        let s = deg.to_radians().sin();
        (0..self.nr)
            .map(|r| cis(-2.0 * PI * r as f64 * self.rx_k * s))
            .collect()
    }

    fn delay(&self, tau: f64) -> Vec<Complex64> {
        self.df.iter().map(|&f| cis(-2.0 * PI * f * tau)).collect()
    }

    /// `q^H h_j` for every transmit column.
    fn correlate(&self, u: &[Complex64], e: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::from(0.0); self.nt];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = Complex64::from(0.0);
            for i in 0..self.ns {
                let base = (j * self.ns + i) * self.nr;
                let mut s = Complex64::from(0.0);
                for r in 0..self.nr {
                    s += u[r].conj() * self.data[base + r];
                }
                acc += e[i].conj() * s;
            }
            *o = acc;
        }
        out
    }

    fn subtract(&mut self, u: &[Complex64], e: &[Complex64], c: &[Complex64], sign: f64) {
        for j in 0..self.nt {
            let cj = c[j] * sign;
            for i in 0..self.ns {
                let base = (j * self.ns + i) * self.nr;
                let ce = cj * e[i];
                for r in 0..self.nr {
                    self.data[base + r] -= u[r] * ce;
                }
            }
        }
    }
}

type Atom = (Vec<Complex64>, Vec<Complex64>);

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn gram_of(atoms: &[Atom]) -> CMatrix {
    let k = atoms.len();
    CMatrix::from_fn(k, k, |a, b| {
        dot(&atoms[a].0, &atoms[b].0) * dot(&atoms[a].1, &atoms[b].1)
    })
}

/// Candidates sharing more than this fraction of their energy with the span
/// of the other atoms are rejected, so two atoms cannot collapse onto one
/// path with large cancelling gains.
const MIN_LEFTOVER: f64 = 0.1;

/// Scores a candidate atom by how much fitted energy it adds on top of a
/// fixed set of atoms: `sum_j |q^H r_j|^2 / ||(I - P) q||^2`, where `r` is
/// the data with the fixed atoms' joint fit removed and `P` projects onto
/// their span. With no fixed atoms this is the plain matched filter.
struct Scorer<'a> {
    resid: Flat,
    fixed: &'a [Atom],
    ginv: CMatrix,
    full: f64,
}

impl<'a> Scorer<'a> {
    fn new(h: &Flat, fixed: &'a [Atom]) -> Self {
        let sigs = fit_signatures(h, fixed);
        let ginv = if fixed.is_empty() {
            CMatrix::zeros(0, 0)
        } else {
            crate::linalg::pseudo_inverse(&gram_of(fixed))
                .map(|(p, _)| p)
                .unwrap_or_else(|_| CMatrix::zeros(fixed.len(), fixed.len()))
        };
        Scorer {
            resid: residual_of(h, fixed, &sigs),
            fixed,
            ginv,
            full: (h.nr * h.ns) as f64,
        }
    }

    /// Energy of `q` left after projecting out the fixed atoms, given the
    /// inner products `b_k = q_k^H q`.
    fn leftover(&self, b: &[Complex64]) -> f64 {
        let mut quad = 0.0;
        for (x, bx) in b.iter().enumerate() {
            for (y, by) in b.iter().enumerate() {
                quad += (bx.conj() * self.ginv[(x, y)] * by).re;
            }
        }
        self.full - quad
    }

    fn score_with(&self, num: f64, b: &[Complex64]) -> f64 {
        let den = self.leftover(b);
        if den <= MIN_LEFTOVER * self.full {
            0.0
        } else {
            num / den
        }
    }

    fn score(&self, deg: f64, tau: f64) -> f64 {
        let (u, e) = (self.resid.steer(deg), self.resid.delay(tau));
        let num = self.resid.correlate(&u, &e).iter().map(|z| z.norm_sqr()).sum();
        let b: Vec<Complex64> = self.fixed.iter().map(|(uk, ek)| dot(uk, &u) * dot(ek, &e)).collect();
        self.score_with(num, &b)
    }
}

/// Coarse grid search of the score. `table[t]` holds the conjugated delay
/// atom for `delays[t]`.
fn coarse_search(sc: &Scorer, angles: &[f64], table: &[Vec<Complex64>]) -> (usize, usize, f64) {
    let flat = &sc.resid;
    let (nr, nt, ns) = (flat.nr, flat.nt, flat.ns);
    // e_k^H e_t for every fixed atom and grid delay.
    let ee: Vec<Vec<Complex64>> = table
        .iter()
        .map(|ct| {
            sc.fixed
                .iter()
                .map(|(_, ek)| ek.iter().zip(ct).map(|(x, y)| (x * y).conj()).sum())
                .collect()
        })
        .collect();
    let mut best = (0, 0, -1.0);
    let mut g = vec![Complex64::from(0.0); nt * ns];
    let mut b = vec![Complex64::from(0.0); sc.fixed.len()];
    for (a, &th) in angles.iter().enumerate() {
        let u = flat.steer(th);
        let uu: Vec<Complex64> = sc.fixed.iter().map(|(uk, _)| dot(uk, &u)).collect();
        for (k, gk) in g.iter_mut().enumerate() {
            let base = k * nr;
            let mut s = Complex64::from(0.0);
            for r in 0..nr {
                s += u[r].conj() * flat.data[base + r];
            }
            *gk = s;
        }
        for (t, e) in table.iter().enumerate() {
            let mut p = 0.0;
            for j in 0..nt {
                let row = &g[j * ns..(j + 1) * ns];
                let mut z = Complex64::from(0.0);
                for (x, y) in row.iter().zip(e) {
                    z += x * y;
                }
                p += z.norm_sqr();
            }
            for (k, bk) in b.iter_mut().enumerate() {
                *bk = uu[k] * ee[t][k];
            }
            let p = sc.score_with(p, &b);
            if p > best.2 {
                best = (a, t, p);
            }
        }
    }
    best
}

const AOA_LIMIT: f64 = 89.5;
const MAX_REFINE_EVALS: usize = 20_000;

/// Pattern search of the score from `(deg, tau)` with initial steps `(sa, st)`.
fn refine(sc: &Scorer, mut deg: f64, mut tau: f64, mut sa: f64, mut st: f64) -> (f64, f64) {
    let mut best = sc.score(deg, tau);
    let (sa0, st0) = (sa, st);
    let mut evals = 0usize;
    let (tau_lo, tau_hi) = (-50e-9, 1.0 / sc.resid.df.get(1).copied().unwrap_or(1e9));
    while (sa > 1e-7 || st > 1e-16) && evals < MAX_REFINE_EVALS {
        let mut moved = false;
        for (da, dt) in [(sa, 0.0), (-sa, 0.0), (0.0, st), (0.0, -st)] {
            let (na, nt) = (deg + da, tau + dt);
            if na.abs() > AOA_LIMIT || nt < tau_lo || nt > tau_hi {
                continue;
            }
            let v = sc.score(na, nt);
            evals += 1;
            if v > best {
                best = v;
                deg = na;
                tau = nt;
                moved = true;
                break;
            }
        }
        if moved {
            sa = (2.0 * sa).min(sa0);
            st = (2.0 * st).min(st0);
        } else {
            sa *= 0.5;
            st *= 0.5;
        }
    }
    (deg, tau)
}

/// Joint least-squares signatures of all atoms against `h`.
fn fit_signatures(h: &Flat, atoms: &[Atom]) -> Vec<Vec<Complex64>> {
    let k = atoms.len();
    let gram = gram_of(atoms);
    let mut rhs = CMatrix::zeros(k, h.nt);
    for (a, (u, e)) in atoms.iter().enumerate() {
        let c = h.correlate(u, e);
        for j in 0..h.nt {
            rhs[(a, j)] = c[j];
        }
    }
    let sol = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| {
            crate::linalg::pseudo_inverse(&gram)
                .map(|(p, _)| p * &rhs)
                .unwrap_or_else(|_| CMatrix::zeros(k, h.nt))
        });
    (0..k).map(|a| (0..h.nt).map(|j| sol[(a, j)]).collect()).collect()
}

fn residual_of(h: &Flat, atoms: &[Atom], sigs: &[Vec<Complex64>]) -> Flat {
    let mut r = Flat {
        nr: h.nr,
        nt: h.nt,
        ns: h.ns,
        data: h.data.clone(),
        rx_k: h.rx_k,
        df: h.df.clone(),
    };
    for ((u, e), c) in atoms.iter().zip(sigs) {
        r.subtract(u, e, c, 1.0);
    }
    r
}

/// Greedy orthogonal least squares: add the atom that most increases the
/// joint fit, refine it off-grid, repeat until the residual drops below
/// `residual_threshold` of the original power or `max_paths` paths are found.
/// A path is also rejected, and the search stopped, when its energy is
/// within `detection_threshold_db` of the residual noise level.
/// Then up to `refinement_sweeps` alternating-projection passes re-place each
/// path with all others held fixed, which separates paths the greedy stage
/// merged.
pub fn extract_paths_detailed(channel: &Channel, config: &ExtractConfig) -> Result<Extraction> {
    config.validate()?;
    let h = Flat::new(channel)?;
    let p0 = h.power();
    if p0 == 0.0 {
        return Ok(Extraction {
            paths: vec![],
            signatures: vec![],
            residual_ratio: 0.0,
        });
    }
    let angles: Vec<f64> = config
        .grid
        .angle_axis()
        .into_iter()
        .filter(|a| a.abs() <= AOA_LIMIT)
        .collect();
    let delays = config.grid.delay_axis();
    let table = delay_table(&h.df, &delays);
    let (sa, st) = (config.grid.aoa_step_deg, config.grid.delay_step);

    let mut params: Vec<(f64, f64)> = Vec::new();
    let mut atoms: Vec<Atom> = Vec::new();
    let mut resid = residual_of(&h, &atoms, &[]);
    let entries = (h.nr * h.nt * h.ns) as f64;
    let scale = (h.nr * h.ns) as f64;
    let detect = 10f64.powf(config.detection_threshold_db / 10.0);
    while params.len() < config.max_paths && resid.power() > config.residual_threshold * p0 {
        let sc = Scorer::new(&h, &atoms);
        let (a, t, _) = coarse_search(&sc, &angles, &table);
        let (deg, tau) = refine(&sc, angles[a], delays[t], sa / 2.0, st / 2.0);
        atoms.push((h.steer(deg), h.delay(tau)));
        let sigs = fit_signatures(&h, &atoms);
        let next = residual_of(&h, &atoms, &sigs);
        let energy = scale * sigs[sigs.len() - 1].iter().map(|z| z.norm_sqr()).sum::<f64>();
        let noise = next.power() / (entries - (atoms.len() * h.nt) as f64).max(1.0);
        if !params.is_empty() && energy < detect * noise {
            atoms.pop();
            break;
        }
        params.push((deg, tau));
        resid = next;
    }
    // Alternating projections: re-place each path with the others fixed.
    for _ in 0..config.refinement_sweeps {
        let mut shift = 0.0f64;
        for k in 0..params.len() {
            let others: Vec<Atom> = atoms
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .map(|(_, a)| a.clone())
                .collect();
            let sc = Scorer::new(&h, &others);
            let (deg, tau) = refine(&sc, params[k].0, params[k].1, sa / 4.0, st / 4.0);
            shift = shift.max((deg - params[k].0).abs() / sa).max((tau - params[k].1).abs() / st);
            params[k] = (deg, tau);
            atoms[k] = (h.steer(deg), h.delay(tau));
        }
        if shift < 1e-3 {
            break;
        }
    }
    let sigs = fit_signatures(&h, &atoms);
    let resid = residual_of(&h, &atoms, &sigs);
    let paths = params
        .iter()
        .zip(&sigs)
        .map(|(&(deg, tau), c)| {
            Ok(EstimatedPath {
                aoa: Angle::from_degrees(deg)?,
                tof: tau,
                power: scale * c.iter().map(|z| z.norm_sqr()).sum::<f64>(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Extraction {
        paths,
        signatures: sigs,
        residual_ratio: resid.power() / p0,
    })
}

pub fn extract_paths(channel: &Channel, max_paths: usize, residual_threshold: f64) -> Result<Vec<EstimatedPath>> {
    let config = ExtractConfig {
        max_paths,
        residual_threshold,
        ..ExtractConfig::default()
    };
    Ok(extract_paths_detailed(channel, &config)?.paths)
}

/// Default candidacy floor for the direct path, dB below the strongest.
pub const DEFAULT_POWER_FLOOR_DB: f64 = 10.0;

fn direct_index(paths: &[EstimatedPath], power_floor_db: f64) -> Result<usize> {
    let strongest = paths
        .iter()
        .map(|p| p.power)
        .fold(f64::NEG_INFINITY, f64::max);
    if paths.is_empty() {
        return Err(Error::NoPathsFound);
    }
    let floor = strongest * 10f64.powf(-power_floor_db / 10.0);
    let mut best: Option<usize> = None;
    for (k, p) in paths.iter().enumerate() {
        if p.power < floor {
            continue;
        }
        best = match best {
            None => Some(k),
            Some(b) => {
                let q = &paths[b];
                let better = p
                    .tof
                    .total_cmp(&q.tof)
                    .then(q.power.total_cmp(&p.power))
                    .then(p.aoa.degrees().abs().total_cmp(&q.aoa.degrees().abs()))
                    .is_lt();
                Some(if better { k } else { b })
            }
        };
    }
    best.ok_or(Error::NoPathsFound)
}

/// Least-ToF path among those within `power_floor_db` of the strongest.
pub fn direct_path_estimate(paths: &[EstimatedPath], power_floor_db: f64) -> Result<EstimatedPath> {
    direct_index(paths, power_floor_db).map(|k| paths[k])
}

/// Per-subcarrier complex gains of each extracted path: on every subcarrier,
/// least squares of `H(f_i)` onto the rank-1 spatial atoms `u_k c_k^T`.
pub fn path_gains(channel: &Channel, extraction: &Extraction) -> Result<Vec<Vec<Complex64>>> {
    let k = extraction.paths.len();
    if k == 0 {
        return Err(Error::NoPathsFound);
    }
    let (nr, nt, _) = channel.dims();
    let atoms: Vec<CMatrix> = extraction
        .paths
        .iter()
        .zip(&extraction.signatures)
        .map(|(p, c)| {
            let u = rx_steering(channel, p.aoa.degrees());
            CMatrix::from_fn(nr, nt, |r, j| u[r] * c[j])
        })
        .collect();
    let mut gram = CMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            gram[(a, b)] = atoms[a].iter().zip(atoms[b].iter()).map(|(x, y)| x.conj() * y).sum();
        }
    }
    let (ginv, _) = crate::linalg::pseudo_inverse(&gram)?;
    let mut out = vec![Vec::with_capacity(channel.num_subcarriers()); k];
    for m in channel.matrices() {
        let rhs = CVector::from_fn(k, |a, _| atoms[a].iter().zip(m.iter()).map(|(x, y)| x.conj() * y).sum());
        let g = &ginv * rhs;
        for a in 0..k {
            out[a].push(g[a]);
        }
    }
    Ok(out)
}

/// `-slope / 2 pi` of the unwrapped phase of `gains` against frequency.
pub fn phase_slope_tof(gains: &[Complex64], band: &BandConfig) -> Result<f64> {
    let f = subcarrier_frequencies(band)?;
    if gains.len() != f.len() {
        return Err(Error::Dims("one gain per subcarrier required".into()));
    }
    let ph: Vec<f64> = gains.iter().map(|g| g.arg()).collect();
    let (slope, _) = linear_fit(&f, &unwrap_phase(&ph));
    Ok(-slope / (2.0 * PI))
}

/// ToF of the path the attacker takes as direct (least ToF above the power
/// floor), from the phase slope of its per-subcarrier gains.
pub fn tof_phase_slope_with(channel: &Channel, config: &ExtractConfig, power_floor_db: f64) -> Result<f64> {
    if channel.num_subcarriers() < 2 {
        return Err(Error::Config("phase-slope ranging needs >= 2 subcarriers".into()));
    }
    let ex = extract_paths_detailed(channel, config)?;
    tof_from_extraction(channel, &ex, power_floor_db)
}

pub fn tof_from_extraction(channel: &Channel, ex: &Extraction, power_floor_db: f64) -> Result<f64> {
    let k = direct_index(&ex.paths, power_floor_db)?;
    let gains = path_gains(channel, ex)?;
    phase_slope_tof(&gains[k], &channel.band)
}

pub fn tof_phase_slope(channel: &Channel) -> Result<f64> {
    tof_phase_slope_with(channel, &ExtractConfig::default(), DEFAULT_POWER_FLOOR_DB)
}

/// Default FTM noise: median |N(0, sigma)| = 0.6745 sigma = 0.344 m.
pub const DEFAULT_FTM_SIGMA: f64 = 0.510;

/// Range oracle standing in for a fine time measurement exchange.
pub fn coarse_ftm<R: Rng + ?Sized>(true_range: f64, sigma: f64, rng: &mut R) -> Result<f64> {
    if !(true_range >= 0.0) || !true_range.is_finite() {
        return Err(Error::Domain(true_range));
    }
    let n = Normal::new(0.0, sigma).map_err(|_| Error::Domain(sigma))?;
    if !(sigma > 0.0) {
        return Err(Error::Domain(sigma));
    }
    Ok((true_range + n.sample(rng)).max(0.0))
}

/// Entry-wise mean.
pub fn average_channels(channels: &[Channel]) -> Result<Channel> {
    let Some(first) = channels.first() else {
        return Err(Error::Dims("no channels to average".into()));
    };
    let mut acc = first.clone();
    for c in &channels[1..] {
        acc = acc.add(c)?;
    }
    Ok(acc.scaled(Complex64::from(1.0 / channels.len() as f64)))
}

/// Paths of every packet, tagged with the packet index.
pub fn path_scatter(channels: &[Channel], config: &ExtractConfig) -> Result<Vec<(usize, EstimatedPath)>> {
    if channels.is_empty() {
        return Err(Error::Dims("no packets".into()));
    }
    let mut out = Vec::new();
    for (k, c) in channels.iter().enumerate() {
        for p in extract_paths_detailed(c, config)?.paths {
            out.push((k, p));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::ArrayConfig;
    use crate::channel::{synthesize_channel, PathParams, PathSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn deg(d: f64) -> Angle {
        Angle::from_degrees(d).unwrap()
    }

    fn setup() -> (ArrayConfig, BandConfig) {
        let band = BandConfig::wifi_ch36_40mhz();
        (ArrayConfig::half_wavelength(4, &band).unwrap(), band)
    }

    fn path(a: f64, aoa: f64, aod: f64, tof: f64) -> PathParams {
        PathParams::new(Complex64::from_polar(a, 0.3 * aoa), deg(aoa), deg(aod), tof).unwrap()
    }

    fn chan(paths: Vec<PathParams>) -> Channel {
        let (arr, band) = setup();
        let mut it = paths.into_iter();
        let ps = PathSet::new(it.next().unwrap(), it.collect()).unwrap();
        synthesize_channel(&ps, &arr, &arr, &band).unwrap()
    }

    #[test]
    fn preamble_round_trip() {
        let h = chan(vec![path(1.0, 10.0, -20.0, 12e-9), path(0.5, 40.0, 25.0, 30e-9)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Preamble::new((0..64).map(|i| cis(0.1 * i as f64)).collect()).unwrap();
        let rx = transmit_preamble(&h, &l, f64::INFINITY, &mut rng).unwrap();
        let est = estimate_channel(&rx, &l).unwrap();
        assert!(est.relative_error(&h) < 1e-12);
        let ones = Preamble::all_ones(64);
        let rx = transmit_preamble(&h, &ones, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(rx.sample(2, 1, 5), h.entry(2, 1, 5));
        assert!(Preamble::new(vec![Complex64::from(2.0)]).is_err());
        assert!(transmit_preamble(&h, &Preamble::all_ones(3), 10.0, &mut rng).is_err());
    }

    #[test]
    fn noisy_estimate_error_tracks_snr() {
        let h = chan(vec![path(1.0, 10.0, -20.0, 12e-9), path(0.5, 40.0, 25.0, 30e-9)]);
        let l = Preamble::all_ones(64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = 0.0;
        for _ in 0..20 {
            let est = estimate_channel(&transmit_preamble(&h, &l, 10.0, &mut rng).unwrap(), &l).unwrap();
            acc += est.relative_error(&h).powi(2);
        }
        let nsr = acc / 20.0;
        assert!((nsr - 0.1).abs() < 0.02, "{nsr}");
    }

    #[test]
    fn music_single_path_peak() {
        let h = chan(vec![path(1.0, 30.0, 5.0, 20e-9)]);
        for method in [ProfileMethod::Music, ProfileMethod::Bartlett] {
            let cfg = ProfileConfig {
                method,
                ..Default::default()
            };
            let prof = aoa_tof_profile(&h, &cfg).unwrap();
            let p = prof.peaks(1)[0];
            assert!((p.aoa.degrees() - 30.0).abs() <= 1.0, "{method:?} {p:?}");
            assert!((p.tof - 20e-9).abs() <= 1e-9, "{method:?} {p:?}");
            assert!(prof.grid.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn profile_of_zero_channel_has_no_peaks() {
        let h = chan(vec![path(1.0, 30.0, 5.0, 20e-9)]).scaled(Complex64::from(0.0));
        for method in [ProfileMethod::Music, ProfileMethod::Bartlett] {
            let cfg = ProfileConfig {
                method,
                ..Default::default()
            };
            assert!(aoa_tof_profile(&h, &cfg).unwrap().peaks(3).is_empty());
        }
    }

    #[test]
    fn profile_csv_layout() {
        let h = chan(vec![path(1.0, 30.0, 5.0, 20e-9)]);
        let cfg = ProfileConfig {
            grid: GridSpec {
                aoa_min_deg: -10.0,
                aoa_max_deg: 10.0,
                aoa_step_deg: 5.0,
                delay_min: 0.0,
                delay_max: 2e-9,
                delay_step: 1e-9,
            },
            ..Default::default()
        };
        let csv = aoa_tof_profile(&h, &cfg).unwrap().to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0].split(',').count(), 4);
        assert!(lines[1].starts_with("-10,"));
    }

    #[test]
    fn extract_single_path_exactly() {
        let h = chan(vec![path(1.0, -23.4, 11.0, 17.3e-9)]);
        let cfg = ExtractConfig {
            max_paths: 3,
            residual_threshold: 1e-8,
            ..Default::default()
        };
        let ex = extract_paths_detailed(&h, &cfg).unwrap();
        assert_eq!(ex.paths.len(), 1);
        assert!((ex.paths[0].aoa.degrees() + 23.4).abs() < 1e-3);
        assert!((ex.paths[0].tof - 17.3e-9).abs() < 1e-12);
        assert!(ex.residual_ratio < 1e-6);
    }

    #[test]
    fn extract_stronger_path_first() {
        let h = chan(vec![path(1.0, 10.0, -20.0, 12e-9), path(0.5, 45.0, 25.0, 40e-9)]);
        let p = extract_paths(&h, 1, 1e-3).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].aoa.degrees() - 10.0).abs() < 1.0);
    }

    #[test]
    fn direct_path_rules() {
        let a = EstimatedPath { aoa: deg(0.0), tof: 10e-9, power: 1.0 };
        let b = EstimatedPath { aoa: deg(40.0), tof: 25e-9, power: 0.5 };
        assert_eq!(direct_path_estimate(&[a, b], 10.0).unwrap(), a);
        let weak = EstimatedPath { power: 0.005, ..a };
        assert_eq!(direct_path_estimate(&[weak, b], 10.0).unwrap(), b);
        let tie = EstimatedPath { aoa: deg(-5.0), tof: 10e-9, power: 1.0 };
        assert_eq!(direct_path_estimate(&[tie, a], 10.0).unwrap(), a);
        assert!(matches!(direct_path_estimate(&[], 10.0), Err(Error::NoPathsFound)));
    }

    #[test]
    fn phase_slope_examples() {
        let (_, band) = setup();
        let f = subcarrier_frequencies(&band).unwrap();
        for tau in [50e-9, 0.0] {
            let g: Vec<Complex64> = f.iter().map(|x| cis(-2.0 * PI * x * tau)).collect();
            assert!((phase_slope_tof(&g, &band).unwrap() - tau).abs() < 1e-12);
        }
        let h = chan(vec![path(1.0, 12.0, -3.0, 50e-9)]);
        assert!((tof_phase_slope(&h).unwrap() - 50e-9).abs() < 1e-12);
    }

    #[test]
    fn ftm_calibration_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut errs: Vec<f64> = (0..100_000)
            .map(|_| (coarse_ftm(5.0, DEFAULT_FTM_SIGMA, &mut rng).unwrap() - 5.0).abs())
            .collect();
        errs.sort_by(f64::total_cmp);
        let med = errs[errs.len() / 2];
        assert!((med - 0.344).abs() <= 0.02 * 0.344, "{med}");
        assert!((coarse_ftm(5.0, 1e-12, &mut rng).unwrap() - 5.0).abs() < 1e-9);
        assert!(coarse_ftm(5.0, 0.0, &mut rng).is_err());
        let mut a = ChaCha8Rng::seed_from_u64(2);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(coarse_ftm(3.0, 0.5, &mut a).unwrap(), coarse_ftm(3.0, 0.5, &mut b).unwrap());
    }

    #[test]
    fn averaging() {
        let h = chan(vec![path(1.0, 10.0, -20.0, 12e-9)]);
        let avg = average_channels(&[h.clone(), h.clone(), h.clone()]).unwrap();
        assert!(avg.relative_error(&h) < 1e-15);
        assert!(average_channels(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let direct = path(1.0, 10.0, -20.0, 12e-9);
        let packets: Vec<Channel> = (0..20)
            .map(|_| {
                let ph: f64 = rng.random_range(0.0..2.0 * PI);
                let r = PathParams::new(Complex64::from_polar(0.6, ph), deg(45.0), deg(30.0), 35e-9).unwrap();
                chan(vec![direct, r])
            })
            .collect();
        let only_direct = chan(vec![direct]);
        let refl_power = |c: &Channel| c.add(&only_direct.scaled(Complex64::from(-1.0))).unwrap().power();
        let single = refl_power(&packets[0]);
        let avg = refl_power(&average_channels(&packets).unwrap());
        assert!(avg < 0.3 * single);
    }
}
