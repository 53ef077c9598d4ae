//! Position fixes from bearings and ranges, error statistics and the
//! received-power drop metric.

use serde::{Deserialize, Serialize};

use crate::array::Angle;
use crate::channel::Channel;
use crate::error::{Error, Result};

/// Access point placement. `boresight` is the world-frame direction of the
/// array broadside in degrees; a local angle `a` maps to world bearing
/// `boresight + a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApPose {
    pub position: [f64; 2],
    pub boresight: f64,
}

impl ApPose {
    pub fn new(position: [f64; 2], boresight: f64) -> Result<Self> {
        if position.iter().chain(std::iter::once(&boresight)).any(|v| !v.is_finite()) {
            return Err(Error::Config("AP pose must be finite".into()));
        }
        Ok(ApPose { position, boresight })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixMethod {
    SingleAp,
    Triangulation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fix {
    pub position: [f64; 2],
    pub method: FixMethod,
}

impl Fix {
    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        (self.position[0] - p[0]).hypot(self.position[1] - p[1])
    }
}

fn bearing_unit(ap: &ApPose, aoa: Angle) -> [f64; 2] {
    let b = (ap.boresight + aoa.degrees()).to_radians();
    [b.cos(), b.sin()]
}

pub fn locate_single_ap(ap: &ApPose, aoa: Angle, range: f64) -> Result<Fix> {
    if !(range >= 0.0 && range.is_finite()) {
        return Err(Error::Domain(range));
    }
    let u = bearing_unit(ap, aoa);
    Ok(Fix {
        position: [ap.position[0] + range * u[0], ap.position[1] + range * u[1]],
        method: FixMethod::SingleAp,
    })
}

/// Point minimising the summed squared perpendicular distance to every
/// bearing line.
pub fn triangulate(aps: &[ApPose], aoas: &[Angle]) -> Result<Fix> {
    if aps.len() != aoas.len() {
        return Err(Error::Dims(format!("{} APs but {} bearings", aps.len(), aoas.len())));
    }
    if aps.len() < 2 {
        return Err(Error::DegenerateBearings);
    }
    // sum over k of (I - u u^T) p = (I - u u^T) p_k
    let mut a = [[0.0f64; 2]; 2];
    let mut b = [0.0f64; 2];
    for (ap, aoa) in aps.iter().zip(aoas) {
        let u = bearing_unit(ap, *aoa);
        let m = [[1.0 - u[0] * u[0], -u[0] * u[1]], [-u[0] * u[1], 1.0 - u[1] * u[1]]];
        for r in 0..2 {
            for c in 0..2 {
                a[r][c] += m[r][c];
            }
            b[r] += m[r][0] * ap.position[0] + m[r][1] * ap.position[1];
        }
    }
    // symmetric PSD 2x2: condition from eigenvalues
    let tr = a[0][0] + a[1][1];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let disc = ((a[0][0] - a[1][1]).powi(2) + 4.0 * a[0][1] * a[1][0]).max(0.0).sqrt();
    let (l_max, l_min) = ((tr + disc) / 2.0, (tr - disc) / 2.0);
    if !(l_min > 0.0) || l_max / l_min > 1e8 {
        return Err(Error::DegenerateBearings);
    }
    let x = (b[0] * a[1][1] - a[0][1] * b[1]) / det;
    let y = (a[0][0] * b[1] - a[1][0] * b[0]) / det;
    Ok(Fix {
        position: [x, y],
        method: FixMethod::Triangulation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    M,
    Deg,
    S,
}

/// Sorted nonnegative samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    samples: Vec<f64>,
    pub units: Units,
}

impl ErrorStats {
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn median(&self) -> f64 {
        percentile(self, 50.0).expect("nonempty by construction")
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }
}

pub fn error_stats(values: &[f64], units: Units) -> Result<ErrorStats> {
    if values.is_empty() {
        return Err(Error::EmptyStats);
    }
    if let Some(bad) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(*bad));
    }
    let mut samples = values.to_vec();
    samples.sort_by(f64::total_cmp);
    Ok(ErrorStats { samples, units })
}

/// Linear interpolation between closest ranks.
pub fn percentile(stats: &ErrorStats, q: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Domain(q));
    }
    let s = &stats.samples;
    if s.is_empty() {
        return Err(Error::EmptyStats);
    }
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (pos - lo as f64) * (s[hi] - s[lo]))
}

/// `10 log10(|original|^2 / |effective|^2)` in dB.
pub fn rssi_drop(original: &Channel, effective: &Channel) -> Result<f64> {
    if !original.same_dims(effective) {
        return Err(Error::Dims("rssi_drop needs equal channel dims".into()));
    }
    let pe = effective.power();
    if pe == 0.0 {
        return Err(Error::InfiniteDrop);
    }
    Ok(10.0 * (original.power() / pe).log10())
}
