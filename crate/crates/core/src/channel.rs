//! Ground-truth multipath MIMO channels.
//!
//! A [`Channel`] stores one `N_RX x N_TX` matrix per subcarrier:
//! `H(f_i) = sum_p a_p u(theta_p) v(delta_p)^H exp(-j 2 pi f_i tau_p)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::{
    steering_vector, subcarrier_frequencies, Angle, ArrayConfig, BandConfig, SPEED_OF_LIGHT,
};
use crate::error::{Error, Result};
use crate::linalg::{cis, frobenius_sq, CMatrix};
use crate::locator::ApPose;

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub amplitude: Complex64,
    /// Angle of arrival at the access point.
    pub aoa: Angle,
    /// Angle of departure at the user.
    pub aod: Angle,
    /// Time of flight in seconds.
    pub tof: f64,
}

impl PathParams {
    pub fn new(amplitude: Complex64, aoa: Angle, aod: Angle, tof: f64) -> Result<Self> {
        if !(tof >= 0.0 && tof.is_finite()) {
            return Err(Error::Config(format!("time of flight must be >= 0, got {tof}")));
        }
        if !(amplitude.norm() > 0.0 && amplitude.norm().is_finite()) {
            return Err(Error::Config("path amplitude must be non-zero".into()));
        }
        Ok(PathParams {
            amplitude,
            aoa,
            aod,
            tof,
        })
    }
}

/// The direct path plus its reflections.
///
/// The direct path is the earliest and the strongest; [`PathSet::new`]
/// enforces both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub direct: PathParams,
    pub reflections: Vec<PathParams>,
}

impl PathSet {
    pub fn new(direct: PathParams, reflections: Vec<PathParams>) -> Result<Self> {
        for (p, r) in reflections.iter().enumerate() {
            if r.tof <= direct.tof {
                return Err(Error::Config(format!(
                    "reflection {p} arrives no later than the direct path"
                )));
            }
            if r.amplitude.norm() > direct.amplitude.norm() {
                return Err(Error::Config(format!(
                    "reflection {p} is stronger than the direct path"
                )));
            }
        }
        Ok(PathSet {
            direct,
            reflections,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &PathParams> {
        std::iter::once(&self.direct).chain(self.reflections.iter())
    }

    pub fn reflection_aods(&self) -> Vec<Angle> {
        self.reflections.iter().map(|r| r.aod).collect()
    }
}

/// Channel frequency response, one `N_RX x N_TX` matrix per subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    matrices: Vec<CMatrix>,
    pub rx_array: ArrayConfig,
    pub tx_array: ArrayConfig,
    pub band: BandConfig,
}

impl Channel {
    pub fn from_matrices(
        matrices: Vec<CMatrix>,
        rx_array: ArrayConfig,
        tx_array: ArrayConfig,
        band: BandConfig,
    ) -> Result<Self> {
        if matrices.len() != band.num_subcarriers {
            return Err(Error::Dims(format!(
                "{} subcarrier matrices for a {}-subcarrier band",
                matrices.len(),
                band.num_subcarriers
            )));
        }
        for m in &matrices {
            if m.shape() != (rx_array.num_antennas, tx_array.num_antennas) {
                return Err(Error::Dims(format!(
                    "matrix shape {:?} does not match {}x{} arrays",
                    m.shape(),
                    rx_array.num_antennas,
                    tx_array.num_antennas
                )));
            }
            if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::Config("channel entries must be finite".into()));
            }
        }
        Ok(Channel {
            matrices,
            rx_array,
            tx_array,
            band,
        })
    }

    pub fn zeros(rx_array: ArrayConfig, tx_array: ArrayConfig, band: BandConfig) -> Self {
        let m = CMatrix::zeros(rx_array.num_antennas, tx_array.num_antennas);
        Channel {
            matrices: vec![m; band.num_subcarriers],
            rx_array,
            tx_array,
            band,
        }
    }

    /// `(N_RX, N_TX, N_sub)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.rx_array.num_antennas,
            self.tx_array.num_antennas,
            self.matrices.len(),
        )
    }

    pub fn num_rx(&self) -> usize {
        self.rx_array.num_antennas
    }

    pub fn num_tx(&self) -> usize {
        self.tx_array.num_antennas
    }

    pub fn num_subcarriers(&self) -> usize {
        self.matrices.len()
    }

    /// Entry `[rx][tx][subcarrier]`.
    pub fn entry(&self, rx: usize, tx: usize, sub: usize) -> Complex64 {
        self.matrices[sub][(rx, tx)]
    }

    pub fn subcarrier(&self, i: usize) -> &CMatrix {
        &self.matrices[i]
    }

    pub fn matrices(&self) -> &[CMatrix] {
        &self.matrices
    }

    pub(crate) fn matrices_mut(&mut self) -> &mut [CMatrix] {
        &mut self.matrices
    }

    /// Total energy `sum |H|^2` over all entries.
    pub fn power(&self) -> f64 {
        self.matrices.iter().map(frobenius_sq).sum()
    }

    pub fn mean_entry_power(&self) -> f64 {
        let (r, t, s) = self.dims();
        self.power() / (r * t * s) as f64
    }

    pub fn scaled(&self, k: Complex64) -> Channel {
        let mut out = self.clone();
        for m in out.matrices.iter_mut() {
            *m *= k;
        }
        out
    }

    pub fn same_dims(&self, other: &Channel) -> bool {
        self.dims() == other.dims()
    }

    pub fn add(&self, other: &Channel) -> Result<Channel> {
        if !self.same_dims(other) {
            return Err(Error::Dims("channel shapes differ".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.matrices.iter_mut().zip(&other.matrices) {
            *a += b;
        }
        Ok(out)
    }

    /// Per-subcarrier conjugate transpose. Turns a downlink measurement into
    /// the uplink channel under reciprocity, and vice versa.
    pub fn conj_transpose(&self) -> Channel {
        Channel {
            matrices: self.matrices.iter().map(|m| m.adjoint()).collect(),
            rx_array: self.tx_array,
            tx_array: self.rx_array,
            band: self.band,
        }
    }

    /// Per-subcarrier plain transpose: the same paths seen with transmitter
    /// and receiver roles exchanged and both angles negated.
    pub fn transpose(&self) -> Channel {
        Channel {
            matrices: self.matrices.iter().map(|m| m.transpose()).collect(),
            rx_array: self.tx_array,
            tx_array: self.rx_array,
            band: self.band,
        }
    }

    /// Largest entry-wise relative difference `||A - B||_F / ||B||_F`.
    pub fn relative_error(&self, reference: &Channel) -> f64 {
        let mut num = 0.0;
        for (a, b) in self.matrices.iter().zip(&reference.matrices) {
            num += frobenius_sq(&(a - b));
        }
        (num / reference.power()).sqrt()
    }
}

/// Rank-1 contribution `u v^H` of a single path, frequency-flat part only.
pub(crate) fn path_atom(
    path: &PathParams,
    tx_array: &ArrayConfig,
    rx_array: &ArrayConfig,
    wavelength: f64,
) -> Result<CMatrix> {
    let u = steering_vector(rx_array, path.aoa, wavelength)?;
    let v = steering_vector(tx_array, path.aod, wavelength)?;
    Ok(&u * v.adjoint())
}

pub fn synthesize_channel(
    paths: &PathSet,
    tx_array: &ArrayConfig,
    rx_array: &ArrayConfig,
    band: &BandConfig,
) -> Result<Channel> {
    tx_array.validate()?;
    rx_array.validate()?;
    let freqs = subcarrier_frequencies(band)?;
    let lambda = band.center_wavelength();
    let atoms: Vec<(CMatrix, &PathParams)> = paths
        .iter()
        .map(|p| path_atom(p, tx_array, rx_array, lambda).map(|a| (a, p)))
        .collect::<Result<_>>()?;
    let matrices = freqs
        .iter()
        .map(|&f| {
            let mut h = CMatrix::zeros(rx_array.num_antennas, tx_array.num_antennas);
            for (atom, p) in &atoms {
                let g = p.amplitude * cis(-2.0 * PI * f * p.tof);
                h.zip_apply(atom, |acc, a| *acc += g * a);
            }
            h
        })
        .collect();
    Channel::from_matrices(matrices, *rx_array, *tx_array, *band)
}

/// Draw one circularly-symmetric complex Gaussian sample with variance `var`.
pub(crate) fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Add i.i.d. complex Gaussian noise with variance
/// `mean_entry_power / 10^(snr_db/10)`. `snr_db = +inf` is noiseless.
pub fn add_awgn<R: Rng + ?Sized>(channel: &Channel, snr_db: f64, rng: &mut R) -> Channel {
    if snr_db == f64::INFINITY {
        return channel.clone();
    }
    let var = channel.mean_entry_power() / 10f64.powf(snr_db / 10.0);
    let mut out = channel.clone();
    for m in out.matrices.iter_mut() {
        for z in m.iter_mut() {
            *z += complex_gaussian(rng, var);
        }
    }
    out
}

/// Reflection delays relative to the direct path.
pub fn excess_delays(paths: &PathSet) -> Vec<f64> {
    paths
        .reflections
        .iter()
        .map(|r| r.tof - paths.direct.tof)
        .collect()
}

/// Minimum angular separation between every reflection and the direct path,
/// at both ends of the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpreadClass {
    Low,
    Medium,
    High,
}

impl SpreadClass {
    pub fn min_separation_deg(self) -> f64 {
        match self {
            SpreadClass::Low => 10.0,
            SpreadClass::Medium => 20.0,
            SpreadClass::High => 40.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SpreadClass::Low => "low",
            SpreadClass::Medium => "medium",
            SpreadClass::High => "high",
        }
    }
}

impl std::str::FromStr for SpreadClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(SpreadClass::Low),
            "medium" => Ok(SpreadClass::Medium),
            "high" => Ok(SpreadClass::High),
            _ => Err(Error::Config(format!("unknown spread class {s:?}"))),
        }
    }
}

/// Parameters for random parametric scenarios.
///
/// Reflection angle offsets (AoA and AoD independently) are drawn uniformly
/// from `[s, max_separation_factor * s]` around the direct path, where `s` is
/// the spread class threshold, with a random sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub num_reflections: usize,
    pub spread: SpreadClass,
    pub max_separation_factor: f64,
    /// Degrees.
    pub direct_aoa_range: [f64; 2],
    /// Degrees.
    pub direct_aod_range: [f64; 2],
    /// No path is placed at or beyond this many degrees from broadside.
    pub angle_limit: f64,
    /// Seconds.
    pub direct_tof_range: [f64; 2],
    /// Seconds, relative to the direct path; the lower bound must be > 0.
    pub excess_delay_range: [f64; 2],
    /// dB relative to the direct path.
    pub reflection_power_range_db: [f64; 2],
    pub max_attempts: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            num_reflections: 2,
            spread: SpreadClass::Medium,
            max_separation_factor: 2.0,
            direct_aoa_range: [-30.0, 30.0],
            direct_aod_range: [-30.0, 30.0],
            angle_limit: 80.0,
            direct_tof_range: [5e-9, 30e-9],
            excess_delay_range: [10e-9, 60e-9],
            reflection_power_range_db: [-10.0, -3.0],
            max_attempts: 1000,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2], name: &str| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be an ordered finite range")))
            }
        };
        ordered(self.direct_aoa_range, "direct_aoa_range")?;
        ordered(self.direct_aod_range, "direct_aod_range")?;
        ordered(self.direct_tof_range, "direct_tof_range")?;
        ordered(self.excess_delay_range, "excess_delay_range")?;
        ordered(self.reflection_power_range_db, "reflection_power_range_db")?;
        if !(self.angle_limit > 0.0 && self.angle_limit < 90.0) {
            return Err(Error::Config("angle_limit must be in (0, 90)".into()));
        }
        if self.excess_delay_range[0] <= 0.0 {
            return Err(Error::Config("excess delays must be strictly positive".into()));
        }
        if self.direct_tof_range[0] < 0.0 {
            return Err(Error::Config("direct ToF must be non-negative".into()));
        }
        if self.reflection_power_range_db[1] > 0.0 {
            return Err(Error::Config("reflections cannot be stronger than the direct path".into()));
        }
        if self.max_separation_factor < 1.0 {
            return Err(Error::Config("max_separation_factor must be >= 1".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        for r in [self.direct_aoa_range, self.direct_aod_range] {
            if r[0].abs() >= self.angle_limit || r[1].abs() >= self.angle_limit {
                return Err(Error::Config("direct angle range exceeds angle_limit".into()));
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Offset `center` by a separation drawn from `[lo, hi]` with a random sign,
/// keeping the result within `limit`. `None` if neither sign fits.
fn separated_angle<R: Rng + ?Sized>(
    rng: &mut R,
    center: f64,
    lo: f64,
    hi: f64,
    limit: f64,
) -> Option<f64> {
    let mag = uniform(rng, [lo, hi]);
    let first = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    [first, -first]
        .into_iter()
        .map(|s| center + s * mag)
        .find(|a| a.abs() < limit)
}

pub fn random_scenario<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<PathSet> {
    spec.validate()?;
    let sep = spec.spread.min_separation_deg();
    let sep_hi = sep * spec.max_separation_factor;
    for _ in 0..spec.max_attempts {
        let aoa0 = uniform(rng, spec.direct_aoa_range);
        let aod0 = uniform(rng, spec.direct_aod_range);
        let tof0 = uniform(rng, spec.direct_tof_range);
        let direct = PathParams::new(
            cis(rng.random_range(0.0..2.0 * PI)),
            Angle::from_degrees(aoa0)?,
            Angle::from_degrees(aod0)?,
            tof0,
        )?;
        let mut reflections = Vec::with_capacity(spec.num_reflections);
        for _ in 0..spec.num_reflections {
            let aoa = separated_angle(rng, aoa0, sep, sep_hi, spec.angle_limit);
            let aod = separated_angle(rng, aod0, sep, sep_hi, spec.angle_limit);
            let (Some(aoa), Some(aod)) = (aoa, aod) else {
                break;
            };
            let power_db = uniform(rng, spec.reflection_power_range_db);
            let excess = uniform(rng, spec.excess_delay_range);
            reflections.push(PathParams::new(
                cis(rng.random_range(0.0..2.0 * PI)) * 10f64.powf(power_db / 20.0),
                Angle::from_degrees(aoa)?,
                Angle::from_degrees(aod)?,
                tof0 + excess,
            )?);
        }
        if reflections.len() == spec.num_reflections {
            return PathSet::new(direct, reflections);
        }
    }
    Err(Error::ScenarioInfeasible(spec.max_attempts))
}

/// A 2-D floor plan with point scatterers (single bounce).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricScene {
    pub user_position: [f64; 2],
    /// World-frame direction of the user array's broadside, degrees.
    pub user_boresight: f64,
    pub aps: Vec<ApPose>,
    pub scatterers: Vec<[f64; 2]>,
    /// Per-bounce loss in dB (non-positive).
    pub reflection_loss_db: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Bearing from `from` to `to` in world degrees.
pub(crate) fn bearing_deg(from: [f64; 2], to: [f64; 2]) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0]).to_degrees()
}

/// Wrap to (-180, 180].
pub(crate) fn wrap_deg(mut a: f64) -> f64 {
    while a > 180.0 {
        a -= 360.0;
    }
    while a <= -180.0 {
        a += 360.0;
    }
    a
}

fn local_angle(world: f64, boresight: f64) -> Option<Angle> {
    Angle::from_degrees(wrap_deg(world - boresight)).ok()
}

pub fn scene_to_paths(scene: &GeometricScene, ap_index: usize) -> Result<PathSet> {
    let ap = scene
        .aps
        .get(ap_index)
        .ok_or_else(|| Error::Config(format!("scene has no AP {ap_index}")))?;
    let user = scene.user_position;
    let d = dist(user, ap.position);
    if d < 1e-6 {
        return Err(Error::DegenerateGeometry("user collocated with AP".into()));
    }
    let aoa = local_angle(bearing_deg(ap.position, user), ap.boresight);
    let aod = local_angle(bearing_deg(user, ap.position), scene.user_boresight);
    let (Some(aoa), Some(aod)) = (aoa, aod) else {
        return Err(Error::DegenerateGeometry(format!(
            "direct path to AP {ap_index} lies outside an array's field of view"
        )));
    };
    let direct = PathParams::new(Complex64::from(1.0 / d), aoa, aod, d / SPEED_OF_LIGHT)?;
    let gamma = 10f64.powf(scene.reflection_loss_db.min(0.0) / 20.0);
    let mut reflections = Vec::new();
    for s in &scene.scatterers {
        let d1 = dist(user, *s);
        let d2 = dist(*s, ap.position);
        if d1 < 1e-6 {
            return Err(Error::DegenerateGeometry("user collocated with a scatterer".into()));
        }
        if d2 < 1e-6 || d1 + d2 <= d * (1.0 + 1e-12) {
            continue;
        }
        let aoa = local_angle(bearing_deg(ap.position, *s), ap.boresight);
        let aod = local_angle(bearing_deg(user, *s), scene.user_boresight);
        if let (Some(aoa), Some(aod)) = (aoa, aod) {
            reflections.push(PathParams::new(
                Complex64::from(gamma / (d1 + d2)),
                aoa,
                aod,
                (d1 + d2) / SPEED_OF_LIGHT,
            )?);
        }
    }
    PathSet::new(direct, reflections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn deg(d: f64) -> Angle {
        Angle::from_degrees(d).unwrap()
    }

    fn arrays(n_rx: usize, n_tx: usize) -> (ArrayConfig, ArrayConfig, BandConfig) {
        let band = BandConfig::wifi_ch36_40mhz();
        (
            ArrayConfig::half_wavelength(n_rx, &band).unwrap(),
            ArrayConfig::half_wavelength(n_tx, &band).unwrap(),
            band,
        )
    }

    #[test]
    fn broadside_zero_delay_is_all_ones() {
        let (rx, tx, band) = arrays(2, 2);
        let p = PathParams::new(Complex64::from(1.0), deg(0.0), deg(0.0), 0.0).unwrap();
        let ch = synthesize_channel(&PathSet::new(p, vec![]).unwrap(), &tx, &rx, &band).unwrap();
        for m in ch.matrices() {
            for z in m.iter() {
                assert!((z - Complex64::from(1.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn delay_is_a_scalar_phase_between_subcarriers() {
        let (rx, tx, band) = arrays(2, 2);
        let band = BandConfig {
            num_subcarriers: 2,
            ..band
        };
        let tau = 50e-9;
        let p = PathParams::new(Complex64::from(1.0), deg(0.0), deg(0.0), tau).unwrap();
        let ch = synthesize_channel(&PathSet::new(p, vec![]).unwrap(), &tx, &rx, &band).unwrap();
        let expected = cis(-2.0 * PI * band.bandwidth * tau);
        let ratio = ch.entry(1, 0, 1) / ch.entry(1, 0, 0);
        assert!((ratio - expected).norm() < 1e-9);
        for r in 0..2 {
            for t in 0..2 {
                assert!((ch.entry(r, t, 1) - expected * ch.entry(r, t, 0)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn orthogonal_transmit_steering_gives_rank_two() {
        // half-wavelength, N=2: 0 deg gives [1,1], 30 deg gives [1,-j];
        // 90 deg is excluded, so use +-30 deg which are orthogonal for N=2.
        let (rx, tx, band) = arrays(2, 2);
        let a = PathParams::new(Complex64::from(1.0), deg(-20.0), deg(30.0), 10e-9).unwrap();
        let b = PathParams::new(Complex64::from(0.8), deg(25.0), deg(-30.0), 30e-9).unwrap();
        let ch = synthesize_channel(&PathSet::new(a, vec![b]).unwrap(), &tx, &rx, &band).unwrap();
        let s = crate::linalg::singular_values(ch.subcarrier(5));
        assert!(s[1] > 1e-3 * s[0], "{s:?}");
    }

    #[test]
    fn awgn_noiseless_sentinel_and_determinism() {
        let (rx, tx, band) = arrays(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = random_scenario(&ScenarioSpec::default(), &mut rng).unwrap();
        let ch = synthesize_channel(&ps, &tx, &rx, &band).unwrap();
        let same = add_awgn(&ch, f64::INFINITY, &mut rng);
        assert_eq!(same, ch);
        let a = add_awgn(&ch, 10.0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = add_awgn(&ch, 10.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn awgn_variance_matches_snr() {
        // 4x4x64 unit-modulus entries, 25 realisations -> 25600 samples each
        // of real and imaginary parts; the spec asks for >= 1e5 entries.
        let rx = ArrayConfig::new(4, 0.029).unwrap();
        let tx = ArrayConfig::new(4, 0.029).unwrap();
        let band = BandConfig {
            num_subcarriers: 64,
            ..BandConfig::wifi_ch36_40mhz()
        };
        let ones = Channel::from_matrices(
            vec![CMatrix::from_element(4, 4, Complex64::from(1.0)); 64],
            rx,
            tx,
            band,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = 0.0;
        let mut n = 0usize;
        while n < 100_000 {
            let noisy = add_awgn(&ones, 10.0, &mut rng);
            let diff = noisy.add(&ones.scaled(Complex64::from(-1.0))).unwrap();
            acc += diff.power();
            n += 4 * 4 * 64;
        }
        let p = acc / n as f64;
        assert!((p - 0.1).abs() < 0.005, "noise power {p}");
    }

    #[test]
    fn medium_spread_separates_reflections() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ScenarioSpec::default();
        for _ in 0..200 {
            let ps = random_scenario(&spec, &mut rng).unwrap();
            assert_eq!(ps.reflections.len(), 2);
            for r in &ps.reflections {
                assert!((r.aoa.degrees() - ps.direct.aoa.degrees()).abs() >= 20.0);
                assert!((r.aod.degrees() - ps.direct.aod.degrees()).abs() >= 20.0);
                assert!(r.tof > ps.direct.tof);
                let ratio = r.amplitude.norm() / ps.direct.amplitude.norm();
                assert!((0.316..=0.708).contains(&((ratio * 1000.0).round() / 1000.0)), "{ratio}");
            }
        }
    }

    #[test]
    fn zero_reflections_is_representable() {
        let spec = ScenarioSpec {
            num_reflections: 0,
            ..Default::default()
        };
        let ps = random_scenario(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(ps.reflections.is_empty());
        assert!(excess_delays(&ps).is_empty());
    }

    #[test]
    fn infeasible_spread_is_reported() {
        let spec = ScenarioSpec {
            spread: SpreadClass::High,
            direct_aoa_range: [0.0, 0.0],
            angle_limit: 35.0,
            max_attempts: 20,
            ..Default::default()
        };
        let err = random_scenario(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap_err();
        assert_eq!(err, Error::ScenarioInfeasible(20));
    }

    #[test]
    fn excess_delay_arithmetic() {
        let mk = |tof| PathParams::new(Complex64::from(0.5), deg(10.0), deg(10.0), tof).unwrap();
        let d = PathParams::new(Complex64::from(1.0), deg(0.0), deg(0.0), 10e-9).unwrap();
        let ps = PathSet::new(d, vec![mk(25e-9), mk(40e-9), mk(40e-9)]).unwrap();
        let e = excess_delays(&ps);
        assert!((e[0] - 15e-9).abs() < 1e-18);
        assert!((e[1] - 30e-9).abs() < 1e-18);
        assert_eq!(e[1], e[2]);
    }

    fn basic_scene(user: [f64; 2], scatterers: Vec<[f64; 2]>) -> GeometricScene {
        GeometricScene {
            user_position: user,
            user_boresight: 180.0,
            aps: vec![ApPose {
                position: [0.0, 0.0],
                boresight: 0.0,
            }],
            scatterers,
            reflection_loss_db: -6.0,
        }
    }

    #[test]
    fn collinear_scene() {
        let ps = scene_to_paths(&basic_scene([3.0, 0.0], vec![]), 0).unwrap();
        assert!(ps.direct.aoa.degrees().abs() < 1e-12);
        assert!(ps.direct.aod.degrees().abs() < 1e-12);
        assert!((ps.direct.tof - 3.0 / SPEED_OF_LIGHT).abs() < 1e-20);
        assert!((ps.direct.tof - 10.007e-9).abs() < 1e-12);
    }

    #[test]
    fn scatterer_with_equal_legs() {
        // user (3,0), AP (0,0); scatterer at (1.5, 2) has both legs 2.5 m
        let ps = scene_to_paths(&basic_scene([3.0, 0.0], vec![[1.5, 2.0]]), 0).unwrap();
        assert_eq!(ps.reflections.len(), 1);
        assert!((ps.reflections[0].tof - 5.0 / SPEED_OF_LIGHT).abs() < 1e-20);
        assert!(ps.reflections[0].tof > ps.direct.tof);
    }

    #[test]
    fn collocated_user_is_degenerate() {
        let err = scene_to_paths(&basic_scene([0.0, 0.0], vec![]), 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry(_)));
    }

    #[test]
    fn paths_behind_an_array_are_dropped() {
        // scatterer behind the AP (negative x) is outside its field of view
        let ps = scene_to_paths(&basic_scene([3.0, 0.0], vec![[-1.0, 1.0], [1.5, 2.0]]), 0).unwrap();
        assert_eq!(ps.reflections.len(), 1);
    }

    #[test]
    fn seven_cm_motion_bounds_tof_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x: f64 = rng.random_range(1.0..6.0);
            let y: f64 = rng.random_range(-3.0..3.0);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let a = scene_to_paths(&basic_scene([x, y], vec![]), 0).unwrap();
            let b = scene_to_paths(
                &basic_scene([x + 0.07 * phi.cos(), y + 0.07 * phi.sin()], vec![]),
                0,
            )
            .unwrap();
            assert!((a.direct.tof - b.direct.tof).abs() <= 0.07 / SPEED_OF_LIGHT + 1e-20);
        }
        assert!((0.07 / SPEED_OF_LIGHT - 0.233e-9).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn synthesis_is_linear_in_amplitude(seed in 0u64..10_000) {
                let (rx, tx, band) = arrays(4, 4);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ps = random_scenario(&ScenarioSpec::default(), &mut rng).unwrap();
                let mut doubled = ps.clone();
                doubled.direct.amplitude *= 2.0;
                for r in doubled.reflections.iter_mut() {
                    r.amplitude *= 2.0;
                }
                let a = synthesize_channel(&ps, &tx, &rx, &band).unwrap();
                let b = synthesize_channel(&doubled, &tx, &rx, &band).unwrap();
                for (x, y) in a.matrices().iter().zip(b.matrices()) {
                    prop_assert!((x * Complex64::from(2.0) - y).norm() <= 1e-12 * y.norm());
                }
            }

            #[test]
            fn swapped_roles_with_negated_angles_is_the_transpose(seed in 0u64..10_000) {
                let (rx, tx, band) = arrays(4, 3);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ps = random_scenario(&ScenarioSpec::default(), &mut rng).unwrap();
                let swap = |p: &PathParams| PathParams { aoa: p.aod.negate(), aod: p.aoa.negate(), ..*p };
                let swapped = PathSet::new(swap(&ps.direct), ps.reflections.iter().map(swap).collect()).unwrap();
                let up = synthesize_channel(&ps, &tx, &rx, &band).unwrap();
                let down = synthesize_channel(&swapped, &rx, &tx, &band).unwrap();
                let t = up.transpose();
                prop_assert!(down.relative_error(&t) < 1e-12);
                // and the conjugate transpose round-trips
                prop_assert_eq!(up.conj_transpose().conj_transpose(), up);
            }

            #[test]
            fn atom_projection_recovers_phase_slopes(seed in 0u64..10_000) {
                let (rx, tx, band) = arrays(4, 4);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ps = random_scenario(&ScenarioSpec::default(), &mut rng).unwrap();
                let ch = synthesize_channel(&ps, &tx, &rx, &band).unwrap();
                let lambda = band.center_wavelength();
                let atoms: Vec<CMatrix> = ps.iter().map(|p| path_atom(p, &tx, &rx, lambda).unwrap()).collect();
                let tofs = crate::oracle::atom_projection_tofs(&ch, &atoms);
                for (p, est) in ps.iter().zip(&tofs) {
                    prop_assert!((est - p.tof).abs() <= 1e-12 * p.tof, "{} vs {}", est, p.tof);
                }
            }
        }
    }
}
