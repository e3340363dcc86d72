#![allow(dead_code)]

use nextdrop::clustering::{fit_kmeans, ClusterModel, KMeansParams};
use nextdrop::experiment::{cbow_corpus, fit_drivers};
use nextdrop::features::{build_boc, train_cbow, BocMap, BocVector, CbowParams, DriverVocab, StepInputs, BOC_DIM};
use nextdrop::geo::{haversine_km, Coordinate};
use nextdrop::ingest::{build_sequences, DriverSequence, SequenceOptions};
use nextdrop::model::{FeaturePipeline, Mode, Predictor, PredictorConfig, Sample, Standardization, Variant};
use nextdrop::synthetic::{CityParams, SyntheticCity};
use nextdrop::tensor_nn::{grad_check, LstmActivation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_city(drivers: usize, trips_per_driver: usize, seed: u64) -> (SyntheticCity, Vec<DriverSequence>) {
    let city = SyntheticCity::generate(&CityParams { drivers, trips_per_driver, seed, ..CityParams::default() });
    let seqs = build_sequences(city.trips.clone(), &SequenceOptions::default()).expect("synthetic sequences");
    (city, seqs)
}

pub fn clusters_for(seqs: &[DriverSequence], k: usize) -> ClusterModel {
    let targets: Vec<_> = seqs.iter().map(|s| s.target.unwrap()).collect();
    fit_kmeans(&targets, &KMeansParams { n_init: 2, ..KMeansParams::new(k, 3) }).unwrap()
}

/// Clusters, BOC, CBOW and driver vocabulary fitted on `train`.
pub fn pipeline(city: &SyntheticCity, train: &[DriverSequence], k: usize) -> FeaturePipeline {
    let clusters = clusters_for(train, k);
    let boc = build_boc(&clusters, &city.pois);
    let cbow = train_cbow(&cbow_corpus(&clusters, train), k, &CbowParams::default()).unwrap().embedding;
    FeaturePipeline { clusters, boc: Some(boc), cbow: Some(cbow), drivers: fit_drivers(train) }
}

/// Lowest-id nearest centroid by exhaustive scan.
pub fn nearest_scan(centroids: &[Coordinate], p: Coordinate) -> usize {
    let mut best = 0;
    for i in 1..centroids.len() {
        if haversine_km(p, centroids[i]) < haversine_km(p, centroids[best]) {
            best = i;
        }
    }
    best
}

fn unit(c: Coordinate) -> [f64; 3] {
    let (phi, lam) = (c.lat().to_radians(), c.lon().to_radians());
    [phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin()]
}

fn sphere_mean(pts: &[Coordinate]) -> Coordinate {
    let mut s = [0.0; 3];
    for p in pts {
        let u = unit(*p);
        for i in 0..3 {
            s[i] += u[i];
        }
    }
    let hyp = (s[0] * s[0] + s[1] * s[1]).sqrt();
    Coordinate::new(s[2].atan2(hyp).to_degrees(), s[1].atan2(s[0]).to_degrees()).unwrap()
}

fn cost(points: &[Coordinate], centroids: &[Coordinate]) -> f64 {
    points.iter().map(|p| haversine_km(*p, centroids[nearest_scan(centroids, *p)]).powi(2)).sum()
}

fn lloyd_from(points: &[Coordinate], mut centroids: Vec<Coordinate>) -> f64 {
    let mut labels: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..1000 {
        let next: Vec<usize> = points.iter().map(|p| nearest_scan(&centroids, *p)).collect();
        if next == labels {
            break;
        }
        labels = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<Coordinate> =
                points.iter().zip(&labels).filter(|(_, l)| **l == c).map(|(p, _)| *p).collect();
            if !members.is_empty() {
                *centroid = sphere_mean(&members);
            }
        }
    }
    cost(points, &centroids)
}

fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    (k - 1..n)
        .flat_map(|last| {
            k_subsets(last, k - 1).into_iter().map(move |mut s| {
                s.push(last);
                s
            })
        })
        .collect()
}

/// Plain Lloyd run to a fixed assignment from every distinct k-subset of
/// the points, topped up with random subsets to at least `restarts` runs;
/// returns the lowest final inertia.
pub fn lloyd_oracle(points: &[Coordinate], k: usize, restarts: usize, seed: u64) -> f64 {
    let mut inits = k_subsets(points.len(), k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while inits.len() < restarts {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        for i in 0..k {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        inits.push(idx[..k].to_vec());
    }
    inits
        .iter()
        .map(|s| lloyd_from(points, s.iter().map(|&i| points[i]).collect()))
        .fold(f64::INFINITY, f64::min)
}

pub fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Coordinate> {
    (0..n)
        .map(|_| Coordinate::new(41.0 + rng.random::<f64>() * 0.4, -8.8 + rng.random::<f64>() * 0.4).unwrap())
        .collect()
}

pub const TOKEN_A: usize = 0;
pub const TOKEN_B: usize = 1;
pub const TOKEN_C: usize = 2;

/// Two token communities over a vocabulary of 10. First-community sentences
/// are drawn from {A, B, 3, 4, 5} and always contain both A and B;
/// second-community sentences are drawn from {C, 6, 7, 8, 9}, so C never
/// shares a window with A.
pub fn cooccurrence_corpus(sentences: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sentences)
        .map(|i| {
            let pool: &[usize] = if i % 2 == 0 { &[TOKEN_A, TOKEN_B, 3, 4, 5] } else { &[TOKEN_C, 6, 7, 8, 9] };
            loop {
                let s: Vec<usize> = (0..8).map(|_| pool[rng.random_range(0..pool.len())]).collect();
                if i % 2 == 1 || (s.contains(&TOKEN_A) && s.contains(&TOKEN_B)) {
                    break s;
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// model helpers

pub fn random_centroids(m: usize, rng: &mut ChaCha8Rng) -> Vec<Coordinate> {
    (0..m)
        .map(|_| Coordinate::new(41.1 + rng.random::<f64>() * 0.1, -8.65 + rng.random::<f64>() * 0.1).unwrap())
        .collect()
}

pub fn untrained(m: usize, mode: Mode, seed: u64) -> Predictor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = random_centroids(m, &mut rng);
    let s = Standardization::fit(&centroids);
    let pipeline = FeaturePipeline {
        clusters: ClusterModel::from_centroids(centroids),
        boc: None,
        cbow: None,
        drivers: DriverVocab::fit(["a", "b"]),
    };
    let cfg = PredictorConfig { lstm_hidden: 8, mode, ..PredictorConfig::new(m, Variant::Lstm) };
    Predictor::init(cfg, pipeline, s).unwrap()
}

/// Σ P_i c_i with an independently computed softmax.
pub fn weighted_oracle(logits: &[f64], c: &[Coordinate]) -> (f64, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let lat = e.iter().zip(c).map(|(w, c)| w / z * c.lat()).sum();
    let lon = e.iter().zip(c).map(|(w, c)| w / z * c.lon()).sum();
    (lat, lon)
}

fn tiny_sample(rng: &mut ChaCha8Rng) -> Sample {
    let boc = |rng: &mut ChaCha8Rng| -> [f64; BOC_DIM] { std::array::from_fn(|_| rng.random_range(0.0..2.0)) };
    Sample {
        inputs: StepInputs {
            zones: vec![0, 2],
            boc: vec![boc(rng), boc(rng)],
            hours: vec![7, 8],
            weekdays: vec![2, 2],
            day_types: vec![0, 1],
            driver: 1,
        },
        target: [0.3, -0.7],
        class: 1,
    }
}

/// Whole-model finite-difference check on 2 steps, 4 hidden units and 3 clusters.
pub fn tiny_model_error(mode: Mode, act: LstmActivation, dropout: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = random_centroids(3, &mut rng);
    let mut boc = BocMap::zeros(3);
    boc.vectors[1] = BocVector([1, 0, 4, 0, 0, 2, 0, 0, 0, 9]);
    let pipeline = FeaturePipeline {
        clusters: ClusterModel::from_centroids(centroids.clone()),
        boc: Some(boc),
        cbow: None,
        drivers: DriverVocab::fit(["x", "y"]),
    };
    let cfg = PredictorConfig {
        lstm_hidden: 4,
        mode,
        lstm_activation: act,
        seed,
        ..PredictorConfig::new(3, Variant::LstmBoc)
    };
    let mut p = Predictor::init(cfg, pipeline, Standardization::fit(&centroids)).unwrap();
    // move the zero-initialised attention vector and biases off their special values
    for t in &mut p.tensors {
        for v in t.tensor.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let sample = tiny_sample(&mut rng);
    let mask: Option<Vec<f64>> = dropout.then(|| vec![2.0, 0.0, 2.0, 2.0]);
    let params: Vec<_> = p.tensors.iter().map(|t| t.tensor.clone()).collect();
    grad_check(|g, vars| p.loss_graph(g, vars, &sample, mask.clone()), &params, 1e-5).unwrap()
}

