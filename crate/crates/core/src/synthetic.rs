//! Seeded synthetic city with habit-driven drivers.
//!
//! Zones sit on two rings around a centre (four inner, the rest outer). Each
//! driver has a home zone and a favourite zone. With probability `habit_p` a
//! trip from home goes to the favourite zone and any other trip goes home;
//! otherwise the destination is a uniformly random zone.
//! The next pick-up usually happens where the last drop-off was. Trips come
//! in daily shifts with short idle gaps, so every driver yields several
//! multi-trip sequences. Every zone has a dominant POI macro-category.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geo::Coordinate;
use crate::ingest::{IngestError, MacroCategory, Poi, TripRecord, POLYLINE_SAMPLE_SECONDS};

const KM_PER_DEG: f64 = 111.195;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CityParams {
    pub zones: usize,
    pub drivers: usize,
    pub trips_per_driver: usize,
    pub trips_per_shift: usize,
    pub habit_p: f64,
    /// Probability that a pick-up happens in the zone of the previous drop-off.
    pub stay_p: f64,
    pub center: (f64, f64),
    pub inner_radius_km: f64,
    pub outer_radius_km: f64,
    /// Spread of points around a zone centre.
    pub zone_sigma_km: f64,
    pub pois_per_zone: usize,
    pub with_polylines: bool,
    /// Epoch seconds of the first day, midnight UTC.
    pub first_day: i64,
    pub seed: u64,
}

impl Default for CityParams {
    fn default() -> Self {
        CityParams {
            zones: 12,
            drivers: 40,
            trips_per_driver: 75,
            trips_per_shift: 8,
            habit_p: 0.85,
            stay_p: 0.8,
            center: (41.15, -8.61),
            inner_radius_km: 2.5,
            outer_radius_km: 6.0,
            zone_sigma_km: 0.25,
            pois_per_zone: 20,
            with_polylines: true,
            // Monday 2024-03-04
            first_day: 1_709_510_400,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCity {
    pub zone_centers: Vec<Coordinate>,
    pub home: Vec<usize>,
    pub favourite: Vec<usize>,
    pub trips: Vec<TripRecord>,
    pub pois: Vec<Poi>,
}

fn offset(origin: Coordinate, east_km: f64, north_km: f64) -> Coordinate {
    let lat = origin.lat() + north_km / KM_PER_DEG;
    let lon = origin.lon() + east_km / (KM_PER_DEG * origin.lat().to_radians().cos());
    Coordinate::new(lat, lon).expect("synthetic city stays away from the poles")
}

fn jitter<R: Rng>(rng: &mut R, c: Coordinate, sigma_km: f64) -> Coordinate {
    let e: f64 = rng.sample(StandardNormal);
    let n: f64 = rng.sample(StandardNormal);
    offset(c, e * sigma_km, n * sigma_km)
}

pub fn driver_name(d: usize) -> String {
    format!("taxi{d:03}")
}

impl SyntheticCity {
    pub fn generate(p: &CityParams) -> Self {
        assert!(p.zones >= 2, "a city needs at least two zones");
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let center = Coordinate::new(p.center.0, p.center.1).expect("valid centre");
        let inner = p.zones.min(4);
        let zone_centers: Vec<Coordinate> = (0..p.zones)
            .map(|i| {
                let (r, k, n, phase) = if i < inner {
                    (p.inner_radius_km, i, inner, 0.0)
                } else {
                    (p.outer_radius_km, i - inner, p.zones - inner, 0.5)
                };
                let a = TAU * (k as f64 + phase) / n as f64;
                offset(center, r * a.cos(), r * a.sin())
            })
            .collect();

        let home: Vec<usize> = (0..p.drivers).map(|d| d % p.zones).collect();
        let favourite: Vec<usize> =
            (0..p.drivers).map(|d| (home[d] + 1 + (d * 5 + d / p.zones) % (p.zones - 1)) % p.zones).collect();

        let mut trips = Vec::with_capacity(p.drivers * p.trips_per_driver);
        for d in 0..p.drivers {
            let mut zone = home[d];
            let mut t = 0i64;
            for j in 0..p.trips_per_driver {
                let shift_pos = j % p.trips_per_shift;
                if shift_pos == 0 {
                    let day = (j / p.trips_per_shift) as i64;
                    t = p.first_day + day * 86_400 + 6 * 3600 + rng.random_range(0..4 * 3600);
                    zone = home[d];
                } else {
                    t += rng.random_range(120..1800);
                    if rng.random::<f64>() >= p.stay_p {
                        zone = rng.random_range(0..p.zones);
                    }
                }
                let dest = if rng.random::<f64>() >= p.habit_p {
                    rng.random_range(0..p.zones)
                } else if zone == home[d] {
                    favourite[d]
                } else {
                    home[d]
                };
                let pickup = jitter(&mut rng, zone_centers[zone], p.zone_sigma_km);
                let dropoff = jitter(&mut rng, zone_centers[dest], p.zone_sigma_km);
                let samples = rng.random_range(32..80usize);
                let end = t + POLYLINE_SAMPLE_SECONDS * (samples as i64 - 1);
                let raw_polyline = p.with_polylines.then(|| {
                    (0..samples)
                        .map(|s| {
                            let f = s as f64 / (samples - 1) as f64;
                            let lat = pickup.lat() + f * (dropoff.lat() - pickup.lat());
                            let lon = pickup.lon() + f * (dropoff.lon() - pickup.lon());
                            Coordinate::new(lat, lon).expect("interpolated point")
                        })
                        .collect()
                });
                trips.push(TripRecord {
                    driver_id: driver_name(d),
                    start_time: t,
                    end_time: end,
                    pickup,
                    dropoff,
                    raw_polyline,
                    metadata: Default::default(),
                });
                t = end;
                zone = dest;
            }
        }

        let mut pois = Vec::with_capacity(p.zones * p.pois_per_zone);
        for (z, c) in zone_centers.iter().enumerate() {
            let dominant = MacroCategory::ALL[z % MacroCategory::ALL.len()];
            for j in 0..p.pois_per_zone {
                let cat = if j % 5 < 3 {
                    dominant
                } else {
                    MacroCategory::ALL[rng.random_range(0..MacroCategory::ALL.len())]
                };
                pois.push(Poi {
                    loc: jitter(&mut rng, *c, 2.0 * p.zone_sigma_km),
                    macro_category: cat,
                    name: format!("venue {z}-{j}"),
                    category_path: vec![cat.name().to_string(), format!("{} {j}", cat.name())],
                });
            }
        }
        SyntheticCity { zone_centers, home, favourite, trips, pois }
    }

    /// Trips in `polyline_csv` layout (with polylines) or `od_csv` layout.
    pub fn trips_csv(&self) -> String {
        let polylines = self.trips.iter().all(|t| t.raw_polyline.is_some());
        let mut s = String::new();
        if polylines {
            s.push_str("driver_id,start_time,polyline\n");
        } else {
            s.push_str("driver_id,start_time,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon,dropoff_time\n");
        }
        for t in &self.trips {
            match &t.raw_polyline {
                Some(pts) if polylines => {
                    let body: Vec<String> = pts.iter().map(|c| format!("[{},{}]", c.lon(), c.lat())).collect();
                    let _ = writeln!(s, "{},{},\"[{}]\"", t.driver_id, t.start_time, body.join(","));
                }
                _ => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        t.driver_id,
                        t.start_time,
                        t.pickup.lat(),
                        t.pickup.lon(),
                        t.dropoff.lat(),
                        t.dropoff.lon(),
                        t.end_time
                    );
                }
            }
        }
        s
    }

    /// POIs as `lat,lon,name,path` lines.
    pub fn pois_csv(&self) -> String {
        let mut s = String::from("lat,lon,name,category_path\n");
        for p in &self.pois {
            let _ = writeln!(s, "{},{},{},{}", p.loc.lat(), p.loc.lon(), p.name, p.category_path.join(" -> "));
        }
        s
    }

    pub fn write(&self, trips: &Path, pois: &Path) -> Result<(), IngestError> {
        std::fs::write(trips, self.trips_csv()).map_err(|e| IngestError::io(trips, e))?;
        std::fs::write(pois, self.pois_csv()).map_err(|e| IngestError::io(pois, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::haversine_km;
    use crate::ingest::{parse_pois_str, parse_trips_from_reader, TripFormat};

    fn small() -> CityParams {
        CityParams { drivers: 4, trips_per_driver: 10, pois_per_zone: 3, ..CityParams::default() }
    }

    #[test]
    fn deterministic_and_sized() {
        let a = SyntheticCity::generate(&small());
        let b = SyntheticCity::generate(&small());
        assert_eq!(a.trips, b.trips);
        assert_eq!(a.trips.len(), 40);
        assert_eq!(a.pois.len(), 36);
        for d in 0..4 {
            assert_ne!(a.home[d], a.favourite[d]);
        }
        let min_sep = (0..12)
            .flat_map(|i| (i + 1..12).map(move |j| (i, j)))
            .map(|(i, j)| haversine_km(a.zone_centers[i], a.zone_centers[j]))
            .fold(f64::INFINITY, f64::min);
        assert!(min_sep > 2.0, "zones {min_sep} km apart");
    }

    #[test]
    fn csv_round_trips_through_parsers() {
        let city = SyntheticCity::generate(&small());
        let parsed = parse_trips_from_reader(city.trips_csv().as_bytes(), TripFormat::PolylineCsv).unwrap();
        assert!(parsed.rejects.is_empty(), "{:?}", parsed.rejects.first());
        assert_eq!(parsed.records.len(), city.trips.len());
        for (a, b) in parsed.records.iter().zip(&city.trips) {
            assert_eq!((a.start_time, a.end_time, a.pickup, a.dropoff), (b.start_time, b.end_time, b.pickup, b.dropoff));
        }
        let pois = parse_pois_str(&city.pois_csv());
        assert!(pois.rejects.is_empty());
        assert_eq!(pois.pois, city.pois);

        let od = SyntheticCity::generate(&CityParams { with_polylines: false, ..small() });
        let parsed = parse_trips_from_reader(od.trips_csv().as_bytes(), TripFormat::OdCsv).unwrap();
        assert_eq!(parsed.records, od.trips);
    }
}
