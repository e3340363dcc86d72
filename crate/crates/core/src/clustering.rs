//! K-means over drop-off points under great-circle distance.
//!
//! Assignment uses haversine distance; centroids are updated with the
//! re-projected mean of unit vectors. An update is only accepted when it strictly
//! lowers the cluster's squared-haversine cost, so the inertia sequence is
//! non-increasing by construction.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_km, Coordinate};
use crate::ingest::DriverSequence;

const FILE_MAGIC: &str = "nextdrop-clusters v1";

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("no points to cluster")]
    NoPoints,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the {distinct} distinct points")]
    TooFewPoints { k: usize, distinct: usize },
    #[error("cluster file: {0}")]
    Format(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol_km: f64,
    /// Independent seeded restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams { k, seed, max_iters: 100, tol_km: 1e-4, n_init: 10 }
    }
}

/// Fitted centroids, id = position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Coordinate>,
    pub k_param: usize,
    /// Sum of squared haversine distances to the nearest centroid, in km².
    pub inertia: f64,
    pub rng_seed: u64,
    /// Inertia after each assignment step of the winning restart. Not persisted.
    #[serde(skip)]
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn from_centroids(centroids: Vec<Coordinate>) -> Self {
        ClusterModel {
            k_param: centroids.len(),
            centroids,
            inertia: 0.0,
            rng_seed: 0,
            inertia_history: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Nearest centroid id; ties go to the lowest id.
    pub fn assign(&self, p: Coordinate) -> usize {
        nearest(&self.centroids, p).0
    }

    pub fn centroid(&self, id: usize) -> Coordinate {
        self.centroids[id]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FILE_MAGIC}");
        let _ = writeln!(
            s,
            "k {} seed {} m {} inertia {}",
            self.k_param,
            self.rng_seed,
            self.centroids.len(),
            self.inertia
        );
        for c in &self.centroids {
            let _ = writeln!(s, "{} {}", c.lat(), c.lon());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ClusterError> {
        let bad = |m: String| ClusterError::Format(m);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(FILE_MAGIC) {
            return Err(bad(format!("missing {FILE_MAGIC:?} header")));
        }
        let header = lines.next().ok_or_else(|| bad("missing parameter line".into()))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 8 || toks[0] != "k" || toks[2] != "seed" || toks[4] != "m" || toks[6] != "inertia" {
            return Err(bad(format!("malformed parameter line {header:?}")));
        }
        let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| bad(format!("bad {what} {s:?}")));
        let k_param = num(toks[1], "k")? as usize;
        let rng_seed = num(toks[3], "seed")?;
        let m = num(toks[5], "m")? as usize;
        let inertia: f64 = toks[7].parse().map_err(|_| bad(format!("bad inertia {:?}", toks[7])))?;
        if m == 0 {
            return Err(bad("m must be at least 1".into()));
        }
        let mut centroids = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut it = line.split_whitespace();
            let coord = match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) => {
                    let lat: f64 = a.parse().map_err(|_| bad(format!("row {}: bad lat", i + 1)))?;
                    let lon: f64 = b.parse().map_err(|_| bad(format!("row {}: bad lon", i + 1)))?;
                    Coordinate::new(lat, lon).map_err(|e| bad(format!("row {}: {e}", i + 1)))?
                }
                _ => return Err(bad(format!("row {}: expected `lat lon`", i + 1))),
            };
            centroids.push(coord);
        }
        if centroids.len() != m {
            return Err(bad(format!("header says m = {m}, found {} rows", centroids.len())));
        }
        Ok(ClusterModel { centroids, k_param, inertia, rng_seed, inertia_history: Vec::new() })
    }

    pub fn save(&self, path: &Path) -> Result<(), ClusterError> {
        std::fs::write(path, self.to_text())
            .map_err(|source| ClusterError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ClusterError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }
}

fn nearest(centroids: &[Coordinate], p: Coordinate) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = haversine_km(*c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Cluster ids of a sequence's points (history followed by current pick-up).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTrace(pub Vec<usize>);

impl ClusterTrace {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn map_trace(model: &ClusterModel, seq: &DriverSequence) -> ClusterTrace {
    ClusterTrace(seq.points().map(|p| model.assign(p.loc)).collect())
}

fn distinct_count(points: &[Coordinate]) -> usize {
    points
        .iter()
        .map(|c| (c.lat().to_bits(), c.lon().to_bits()))
        .collect::<HashSet<_>>()
        .len()
}

pub fn fit_kmeans(points: &[Coordinate], params: &KMeansParams) -> Result<ClusterModel, ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::NoPoints);
    }
    if params.k == 0 {
        return Err(ClusterError::ZeroK);
    }
    let distinct = distinct_count(points);
    if params.k > distinct {
        return Err(ClusterError::TooFewPoints { k: params.k, distinct });
    }
    let mut best: Option<ClusterModel> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for _ in 0..params.n_init.max(1) {
        let run_seed: u64 = rng.random();
        let model = lloyd(points, params, run_seed);
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    let mut model = best.expect("at least one restart");
    model.rng_seed = params.seed;
    Ok(model)
}

fn kmeans_plus_plus(points: &[Coordinate], k: usize, rng: &mut ChaCha8Rng) -> Vec<Coordinate> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| haversine_km(centroids[0], *p).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 {
                    chosen = Some(i);
                    if target < *w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        centroids.push(c);
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(haversine_km(c, *p).powi(2));
        }
    }
    centroids
}

fn assign_all(centroids: &[Coordinate], points: &[Coordinate]) -> Vec<(usize, f64)> {
    points.par_iter().with_min_len(2048).map(|p| nearest(centroids, *p)).collect()
}

const FIXED_SCALE: f64 = (1u64 << 60) as f64;

/// Squared distance in exact fixed point, so cost sums are independent of
/// summation order and monotone in every term.
fn fixed_sq(d_km: f64) -> u128 {
    (d_km * d_km * FIXED_SCALE) as u128
}

fn fixed_to_km2(v: u128) -> f64 {
    v as f64 / FIXED_SCALE
}

fn sq_sum(assignments: &[(usize, f64)]) -> u128 {
    assignments.iter().map(|(_, d)| fixed_sq(*d)).sum()
}

fn lloyd(points: &[Coordinate], params: &KMeansParams, seed: u64) -> ClusterModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = params.k;
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut history = Vec::new();

    for _ in 0..params.max_iters.max(1) {
        let mut assignments = assign_all(&centroids, points);
        let inertia = sq_sum(&assignments);
        if let Some(prev) = history.last() {
            assert!(inertia <= *prev, "k-means inertia rose from {prev} to {inertia}");
        }
        history.push(inertia);

        reseed_empty(&mut centroids, points, &mut assignments);

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, (c, _)) in assignments.iter().enumerate() {
            members[*c].push(i);
        }
        let mut max_move: f64 = 0.0;
        for (c, idx) in members.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let Some(candidate) = spherical_mean(idx.iter().map(|&i| points[i])) else {
                continue;
            };
            let cost = |ctr: Coordinate| idx.iter().map(|&i| fixed_sq(haversine_km(ctr, points[i]))).sum::<u128>();
            if cost(candidate) < cost(centroids[c]) {
                max_move = max_move.max(haversine_km(candidate, centroids[c]));
                centroids[c] = candidate;
            }
        }
        if max_move <= params.tol_km {
            break;
        }
    }

    let final_inertia = sq_sum(&assign_all(&centroids, points));
    if let Some(prev) = history.last() {
        assert!(final_inertia <= *prev, "k-means inertia rose from {prev} to {final_inertia}");
    }
    history.push(final_inertia);
    ClusterModel {
        centroids,
        k_param: k,
        inertia: fixed_to_km2(final_inertia),
        rng_seed: seed,
        inertia_history: history.into_iter().map(fixed_to_km2).collect(),
    }
}

/// Moves every empty centroid onto the point farthest from its centroid
/// (lowest index on ties) and reassigns that point.
fn reseed_empty(centroids: &mut [Coordinate], points: &[Coordinate], assignments: &mut [(usize, f64)]) {
    let mut counts = vec![0usize; centroids.len()];
    for (c, _) in assignments.iter() {
        counts[*c] += 1;
    }
    for c in 0..centroids.len() {
        if counts[c] > 0 {
            continue;
        }
        let mut far = None;
        for (i, (owner, d)) in assignments.iter().enumerate() {
            if counts[*owner] > 1 && far.is_none_or(|(_, fd)| *d > fd) {
                far = Some((i, *d));
            }
        }
        let Some((i, d)) = far else { break };
        if d <= 0.0 {
            break;
        }
        counts[assignments[i].0] -= 1;
        counts[c] = 1;
        centroids[c] = points[i];
        assignments[i] = (c, 0.0);
    }
}

/// Mean of unit vectors projected back to the sphere.
pub fn spherical_mean(points: impl IntoIterator<Item = Coordinate>) -> Option<Coordinate> {
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for p in points {
        let v = p.to_unit_vector();
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    Coordinate::from_vector(acc)
}
