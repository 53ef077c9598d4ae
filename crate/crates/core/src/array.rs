//! Antenna geometry, steering vectors and the OFDM subcarrier grid.
//!
//! Conventions used throughout the crate:
//!
//! * A uniform linear array has its elements along the local y-axis and
//!   broadside along +x. Angles are measured from broadside, so a bearing
//!   `theta` in the array frame is the unit vector `[cos theta, sin theta]`.
//! * Phase decreases with propagation: a path of delay `tau` contributes
//!   `exp(-j 2 pi f tau)` on subcarrier `f`.
//! * Steering vectors are narrowband: they are evaluated at the centre
//!   wavelength for every subcarrier.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CVector;

/// Vacuum speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// An angle in degrees, measured from array broadside, strictly inside
/// (-90, 90).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Angle(f64);

impl Angle {
    pub fn from_degrees(deg: f64) -> Result<Self> {
        if deg.is_finite() && deg.abs() < 90.0 {
            Ok(Angle(deg))
        } else {
            Err(Error::Domain(deg))
        }
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    pub fn radians(self) -> f64 {
        self.0.to_radians()
    }

    pub fn negate(self) -> Self {
        Angle(-self.0)
    }
}

impl TryFrom<f64> for Angle {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Angle::from_degrees(v)
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

/// Uniform linear array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub num_antennas: usize,
    /// Element separation in metres.
    pub spacing: f64,
}

impl ArrayConfig {
    pub fn new(num_antennas: usize, spacing: f64) -> Result<Self> {
        let cfg = ArrayConfig {
            num_antennas,
            spacing,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Half-wavelength spacing at the band's centre frequency.
    pub fn half_wavelength(num_antennas: usize, band: &BandConfig) -> Result<Self> {
        ArrayConfig::new(num_antennas, band.center_wavelength() / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_antennas == 0 {
            return Err(Error::Config("array needs at least one antenna".into()));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Config(format!(
                "antenna spacing must be positive, got {}",
                self.spacing
            )));
        }
        Ok(())
    }
}

/// OFDM band: centre frequency, bandwidth and the number of linearly spaced
/// subcarriers spanning it end to end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandConfig {
    pub center_frequency: f64,
    pub bandwidth: f64,
    pub num_subcarriers: usize,
}

impl Default for BandConfig {
    fn default() -> Self {
        BandConfig::wifi_ch36_40mhz()
    }
}

impl BandConfig {
    /// 5.18 GHz (Wi-Fi channel 36), 40 MHz, 64 subcarriers.
    pub fn wifi_ch36_40mhz() -> Self {
        BandConfig {
            center_frequency: 5.18e9,
            bandwidth: 40e6,
            num_subcarriers: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_subcarriers < 2 {
            return Err(Error::Config(format!(
                "need at least 2 subcarriers, got {}",
                self.num_subcarriers
            )));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        if !(self.center_frequency > self.bandwidth / 2.0 && self.center_frequency.is_finite()) {
            return Err(Error::Config(
                "centre frequency must exceed half the bandwidth".into(),
            ));
        }
        Ok(())
    }

    pub fn center_wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.center_frequency
    }

    /// Spacing between adjacent subcarriers.
    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth / (self.num_subcarriers as f64 - 1.0)
    }
}

/// `exp(-j 2 pi k d sin(angle) / wavelength)` for `k = 0..num_antennas`.
///
/// Serves both the transmit side (`v`, angle of departure) and the receive
/// side (`u`, angle of arrival).
pub fn steering_vector(array: &ArrayConfig, angle: Angle, wavelength: f64) -> Result<CVector> {
    array.validate()?;
    if !(wavelength > 0.0) {
        return Err(Error::Config(format!("wavelength must be positive, got {wavelength}")));
    }
    Ok(steering_vector_unchecked(
        array.num_antennas,
        array.spacing / wavelength,
        angle.degrees(),
    ))
}

/// Steering vector for an arbitrary real angle in degrees; used by grid
/// searches that already know their inputs are valid.
pub(crate) fn steering_vector_unchecked(n: usize, spacing_wavelengths: f64, deg: f64) -> CVector {
    let step = -2.0 * PI * spacing_wavelengths * deg.to_radians().sin();
    CVector::from_iterator(n, (0..n).map(|k| Complex64::from_polar(1.0, step * k as f64)))
}

/// Linearly spaced subcarrier frequencies spanning `[fc - B/2, fc + B/2]`.
pub fn subcarrier_frequencies(band: &BandConfig) -> Result<Vec<f64>> {
    band.validate()?;
    let n = band.num_subcarriers;
    let start = band.center_frequency - band.bandwidth / 2.0;
    let step = band.subcarrier_spacing();
    Ok((0..n)
        .map(|i| {
            if i == n - 1 {
                band.center_frequency + band.bandwidth / 2.0
            } else {
                start + i as f64 * step
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn half_lambda(n: usize) -> (ArrayConfig, f64) {
        let band = BandConfig::wifi_ch36_40mhz();
        (
            ArrayConfig::half_wavelength(n, &band).unwrap(),
            band.center_wavelength(),
        )
    }

    #[test]
    fn broadside_is_all_ones() {
        let (arr, lambda) = half_lambda(4);
        let v = steering_vector(&arr, Angle::from_degrees(0.0).unwrap(), lambda).unwrap();
        for z in v.iter() {
            assert_abs_diff_eq!(z.re, 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(z.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn thirty_degrees_steps_by_quarter_turn() {
        let (arr, lambda) = half_lambda(4);
        let v = steering_vector(&arr, Angle::from_degrees(30.0).unwrap(), lambda).unwrap();
        let expected = [
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, 1.0),
        ];
        for (z, e) in v.iter().zip(expected) {
            assert!((z - e).norm() < 1e-12, "{z} vs {e}");
        }
    }

    #[test]
    fn single_element() {
        let arr = ArrayConfig::new(1, 0.37).unwrap();
        let v = steering_vector(&arr, Angle::from_degrees(-71.0).unwrap(), 0.05).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn angle_domain() {
        assert!(matches!(Angle::from_degrees(90.0), Err(Error::Domain(_))));
        assert!(matches!(Angle::from_degrees(-90.0), Err(Error::Domain(_))));
        assert!(Angle::from_degrees(f64::NAN).is_err());
        assert!(Angle::from_degrees(89.999).is_ok());
    }

    #[test]
    fn two_subcarriers_are_the_band_edges() {
        let band = BandConfig {
            center_frequency: 5.18e9,
            bandwidth: 40e6,
            num_subcarriers: 2,
        };
        let f = subcarrier_frequencies(&band).unwrap();
        assert_eq!(f, vec![5.16e9, 5.20e9]);
    }

    #[test]
    fn sixty_four_subcarriers_are_linear() {
        let band = BandConfig::wifi_ch36_40mhz();
        let f = subcarrier_frequencies(&band).unwrap();
        assert_eq!(f.len(), 64);
        let step = 40e6 / 63.0;
        for w in f.windows(2) {
            assert!(w[1] > w[0]);
            assert_abs_diff_eq!(w[1] - w[0], step, epsilon = 1e-3);
        }
        assert_eq!(f[0], 5.16e9);
        assert_eq!(f[63], 5.20e9);
    }

    #[test]
    fn too_few_subcarriers() {
        let band = BandConfig {
            num_subcarriers: 1,
            ..BandConfig::wifi_ch36_40mhz()
        };
        assert!(matches!(subcarrier_frequencies(&band), Err(Error::Config(_))));
    }

    #[test]
    fn default_spacing_is_half_wavelength() {
        let band = BandConfig::wifi_ch36_40mhz();
        let arr = ArrayConfig::half_wavelength(4, &band).unwrap();
        assert_abs_diff_eq!(arr.spacing, SPEED_OF_LIGHT / 5.18e9 / 2.0, epsilon = 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn negated_angle_conjugates(n in 1usize..9, deg in -89.0f64..89.0) {
                let (arr, lambda) = half_lambda(n);
                let a = steering_vector(&arr, Angle::from_degrees(deg).unwrap(), lambda).unwrap();
                let b = steering_vector(&arr, Angle::from_degrees(-deg).unwrap(), lambda).unwrap();
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert!((x.conj() - y).norm() < 1e-12);
                    prop_assert!((x.norm() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn distinct_angles_are_not_collinear(
                n in 2usize..9,
                a in -89.0f64..89.0,
                b in -89.0f64..89.0,
            ) {
                prop_assume!((a - b).abs() > 0.5);
                let (arr, lambda) = half_lambda(n);
                let u = steering_vector(&arr, Angle::from_degrees(a).unwrap(), lambda).unwrap();
                let v = steering_vector(&arr, Angle::from_degrees(b).unwrap(), lambda).unwrap();
                prop_assert!(u.dotc(&v).norm() < n as f64 - 1e-9);
            }
        }
    }
}
