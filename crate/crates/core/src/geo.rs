//! Coordinates, great-circle distance, and the error distance score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} is not finite")]
    NonFiniteLongitude(f64),
    #[error("cannot aggregate an empty set of predictions")]
    Empty,
}

/// A WGS84 position in degrees.
///
/// Longitude is normalized into `[-180, 180)` on construction; at the poles it
/// is pinned to zero so that equal positions compare equal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCoordinate", into = "RawCoordinate")]
pub struct Coordinate {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawCoordinate {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawCoordinate> for Coordinate {
    type Error = GeoError;
    fn try_from(raw: RawCoordinate) -> Result<Self, GeoError> {
        Coordinate::new(raw.lat, raw.lon)
    }
}

impl From<Coordinate> for RawCoordinate {
    fn from(c: Coordinate) -> Self {
        RawCoordinate { lat: c.lat, lon: c.lon }
    }
}

impl Coordinate {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeOutOfRange(lat));
        }
        if !lon.is_finite() {
            return Err(GeoError::NonFiniteLongitude(lon));
        }
        let lon = if lat.abs() == 90.0 { 0.0 } else { normalize_lon(lon) };
        Ok(Coordinate { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Unit vector on the sphere (x toward lon 0, z toward the north pole).
    pub fn to_unit_vector(&self) -> [f64; 3] {
        let (phi, lambda) = (self.lat.to_radians(), self.lon.to_radians());
        [phi.cos() * lambda.cos(), phi.cos() * lambda.sin(), phi.sin()]
    }

    /// Projects a non-zero 3-vector back onto the sphere. Returns `None` for a
    /// (near) zero vector, whose direction is undefined.
    pub fn from_vector(v: [f64; 3]) -> Option<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !norm.is_finite() || norm < 1e-15 {
            return None;
        }
        let z = (v[2] / norm).clamp(-1.0, 1.0);
        let lat = z.asin().to_degrees();
        let lon = v[1].atan2(v[0]).to_degrees();
        Coordinate::new(lat, lon).ok()
    }
}

fn normalize_lon(lon: f64) -> f64 {
    let shifted = (lon + 180.0).rem_euclid(360.0);
    // rem_euclid can return exactly 360.0 through rounding of tiny negatives
    let shifted = if shifted >= 360.0 { 0.0 } else { shifted };
    shifted - 180.0
}

/// A timestamped position: epoch seconds (UTC) plus a coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalPoint {
    pub t: i64,
    pub loc: Coordinate,
}

impl SpatioTemporalPoint {
    pub fn new(t: i64, loc: Coordinate) -> Self {
        SpatioTemporalPoint { t, loc }
    }
}

/// Great-circle distance in kilometers using the haversine formula.
pub fn haversine_km(a: Coordinate, b: Coordinate) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Error distance score of one prediction.
pub fn eds_km(predicted: Coordinate, actual: Coordinate) -> f64 {
    haversine_km(predicted, actual)
}

/// Arithmetic mean of the per-pair error distance.
pub fn mean_eds_km<I>(pairs: I) -> Result<f64, GeoError>
where
    I: IntoIterator<Item = (Coordinate, Coordinate)>,
{
    let mut n = 0usize;
    let mut total = 0.0;
    for (p, a) in pairs {
        total += eds_km(p, a);
        n += 1;
    }
    if n == 0 {
        return Err(GeoError::Empty);
    }
    Ok(total / n as f64)
}

/// Median of a set of distances (mean of the middle two for even counts).
pub fn median_km(values: &[f64]) -> Result<f64, GeoError> {
    if values.is_empty() {
        return Err(GeoError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn c(lat: f64, lon: f64) -> Coordinate {
        Coordinate::new(lat, lon).unwrap()
    }

    /// Spherical law of cosines, used only as an independent cross-check.
    fn law_of_cosines_km(a: Coordinate, b: Coordinate) -> f64 {
        let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
        let dl = (b.lon() - a.lon()).to_radians();
        let cos_angle = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        EARTH_RADIUS_KM * cos_angle.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn identity_is_zero() {
        let p = c(41.1579, -8.6291);
        assert_eq!(haversine_km(p, p), 0.0);
        assert_eq!(eds_km(p, p), 0.0);
    }

    #[test]
    fn antipodal_half_circumference() {
        let d = haversine_km(c(0.0, 0.0), c(0.0, 180.0));
        assert!((d - PI * EARTH_RADIUS_KM).abs() < 1e-9, "{d}");
        assert!((d - 20015.1).abs() < 0.05);
    }

    #[test]
    fn porto_to_lisbon() {
        let (porto, lisbon) = (c(41.1579, -8.6291), c(38.7223, -9.1393));
        // high-precision law of cosines value
        let expected = 274.295_505_733_199_7;
        let d = haversine_km(porto, lisbon);
        assert!((d - expected).abs() < 1e-9, "{d}");
        assert!((law_of_cosines_km(porto, lisbon) - d).abs() < 1e-6);
    }

    #[test]
    fn longitude_normalization() {
        assert_eq!(c(10.0, 180.0).lon(), -180.0);
        assert_eq!(c(10.0, 190.0).lon(), -170.0);
        assert_eq!(c(10.0, -540.0).lon(), -180.0);
        assert_eq!(c(90.0, 45.0), c(90.0, -12.0));
        assert!(Coordinate::new(90.5, 0.0).is_err());
        assert!(Coordinate::new(f64::NAN, 0.0).is_err());
        assert!(Coordinate::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn mean_and_median() {
        let o = c(0.0, 0.0);
        let one_km_deg = (1.0 / EARTH_RADIUS_KM).to_degrees();
        let pairs = vec![(o, c(0.0, one_km_deg)), (o, c(0.0, 3.0 * one_km_deg))];
        assert!((mean_eds_km(pairs).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(mean_eds_km(Vec::new()), Err(GeoError::Empty));
        assert_eq!(median_km(&[0.0, 2.0, 4.0]).unwrap(), 2.0);
        assert_eq!(median_km(&[4.0, 1.0, 3.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn unit_vector_round_trip() {
        let p = c(41.1579, -8.6291);
        let q = Coordinate::from_vector(p.to_unit_vector()).unwrap();
        assert!(haversine_km(p, q) < 1e-9);
        assert!(Coordinate::from_vector([0.0, 0.0, 0.0]).is_none());
    }

    fn coord() -> impl Strategy<Value = Coordinate> {
        (-90.0f64..=90.0, -180.0f64..180.0).prop_map(|(a, b)| c(a, b))
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in coord(), b in coord()) {
            let (ab, ba) = (haversine_km(a, b), haversine_km(b, a));
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert!((0.0..=PI * EARTH_RADIUS_KM + 1e-9).contains(&ab));
        }

        #[test]
        fn triangle_inequality(a in coord(), b in coord(), x in coord()) {
            prop_assert!(haversine_km(a, x) <= haversine_km(a, b) + haversine_km(b, x) + 1e-9);
        }
    }
}
