mod common;

use nextdrop::clustering::ClusterModel;
use nextdrop::geo::{haversine_km, Coordinate};
use nextdrop::model::{
    mmlp_input, predict_nn_baseline, MmlpConfig, MmlpModel, MmlpVariant, Mode, ModelError, Prediction, Predictor,
    PredictorConfig, SavedModel, Standardization, StopReason, Variant,
};
use nextdrop::tensor_nn::LstmActivation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn centroid_head_matches_direct_weighted_sum() {
    for mode in [Mode::Regression, Mode::Classification] {
        let p = common::untrained(15, mode, 3);
        let c = p.clusters.centroids.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..15).map(|_| rng.random_range(-4.0..4.0)).collect();
            let y = p.output_from_logits(&logits).unwrap();
            let (lat, lon) = common::weighted_oracle(&logits, &c);
            assert!((y.lat() - lat).abs() < 1e-12 && (y.lon() - lon).abs() < 1e-12, "{mode}: {y:?} vs ({lat}, {lon})");
        }

        let y = p.output_from_logits(&[0.5; 15]).unwrap();
        let mean_lat = c.iter().map(|c| c.lat()).sum::<f64>() / 15.0;
        let mean_lon = c.iter().map(|c| c.lon()).sum::<f64>() / 15.0;
        assert!((y.lat() - mean_lat).abs() < 1e-12 && (y.lon() - mean_lon).abs() < 1e-12);

        for i in 0..15 {
            let mut logits = vec![0.0; 15];
            logits[i] = 1e3;
            let y = p.output_from_logits(&logits).unwrap();
            assert!(haversine_km(y, c[i]) < 1e-9, "one-hot {i}: {y:?} vs {:?}", c[i]);
        }
    }
    assert!(matches!(common::untrained(4, Mode::Regression, 1).output_from_logits(&[0.0; 3]), Err(ModelError::Mismatch(_))));
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain, counter-clockwise.
fn hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

#[test]
fn initial_predictions_stay_in_centroid_hull() {
    let (city, seqs) = common::small_city(6, 20, 5);
    let pipeline = common::pipeline(&city, &seqs, 8);
    let targets: Vec<_> = seqs.iter().map(|s| s.target.unwrap()).collect();
    let cfg = PredictorConfig { lstm_hidden: 16, ..PredictorConfig::new(8, Variant::LstmBocW2v) };
    let p = Predictor::init(cfg, pipeline, Standardization::fit(&targets)).unwrap();
    let h = hull(p.clusters.centroids.iter().map(|c| (c.lat(), c.lon())).collect());
    for s in &seqs {
        let y = p.predict(s).unwrap();
        for i in 0..h.len() {
            let side = cross(h[i], h[(i + 1) % h.len()], (y.lat(), y.lon()));
            assert!(side >= -1e-12, "prediction {y:?} outside the hull");
        }
    }
}

#[test]
fn feature_tensor_path_matches_index_path() {
    let (city, seqs) = common::small_city(4, 16, 9);
    let pipeline = common::pipeline(&city, &seqs, 6);
    let targets: Vec<_> = seqs.iter().map(|s| s.target.unwrap()).collect();
    let s = Standardization::fit(&targets);
    for mode in [Mode::Regression, Mode::Classification] {
        let cfg = PredictorConfig { lstm_hidden: 12, mode, ..PredictorConfig::new(6, Variant::LstmBoc) };
        let p = Predictor::init(cfg, pipeline.clone(), s).unwrap();
        for seq in seqs.iter().take(30) {
            let ft = p.features(seq).unwrap();
            assert_eq!(ft.valid_steps(), seq.len());
            let direct = p.predict(seq).unwrap();
            match p.forward(&ft).unwrap() {
                Prediction::Point(y) => assert!(haversine_km(y, direct) < 1e-9),
                Prediction::Probabilities(probs) => {
                    assert_eq!(mode, Mode::Classification);
                    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    let y = nextdrop::model::weighted_centroid(&probs, &p.clusters.centroids).unwrap();
                    assert!(haversine_km(y, direct) < 1e-9);
                }
            }
        }
    }
}

#[test]
fn modes_differ_only_in_output_head() {
    let r = common::untrained(7, Mode::Regression, 2);
    let c = common::untrained(7, Mode::Classification, 2);
    assert_eq!(r.parameter_count(), c.parameter_count() + 2 * 7);
    assert_eq!(r.tensor("output.w").unwrap().shape(), [2, 7]);
    assert!(c.tensor("output.w").is_none());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for mode in [Mode::Regression, Mode::Classification] {
        for act in [LstmActivation::Relu, LstmActivation::Tanh] {
            for (seed, dropout) in [(1, false), (2, true)] {
                let err = common::tiny_model_error(mode, act, dropout, seed);
                assert!(err < 1e-3, "{mode} {act:?} dropout={dropout}: {err}");
            }
        }
    }
}

#[test]
fn fifty_samples_can_be_overfit() {
    let (city, seqs) = common::small_city(5, 12, 21);
    let train = &seqs[..50];
    let pipeline = common::pipeline(&city, train, 8);
    let cfg = PredictorConfig {
        lstm_hidden: 32,
        learning_rate: 0.01,
        batch_size: 10,
        dropout_p: 0.0,
        max_epochs: 200,
        patience: 200,
        ..PredictorConfig::new(8, Variant::LstmBocW2v)
    };
    let p = Predictor::train(cfg, pipeline, train, train).unwrap();
    let log = p.log.as_ref().unwrap();
    let fin = p.mean_loss(train).unwrap();
    assert!(fin < 0.1 * log.initial_train_loss, "final {fin} vs epoch-0 {}", log.initial_train_loss);
}

#[test]
fn early_stopping_keeps_best_weights_through_reload() {
    let (city, seqs) = common::small_city(6, 20, 33);
    let (train, val) = seqs.split_at(80);
    let pipeline = common::pipeline(&city, train, 6);
    // a high learning rate overfits 80 samples fast, so validation turns up early
    let cfg = PredictorConfig {
        lstm_hidden: 16,
        learning_rate: 0.02,
        batch_size: 8,
        dropout_p: 0.0,
        max_epochs: 150,
        ..PredictorConfig::new(6, Variant::LstmBocW2v)
    };
    let p = Predictor::train(cfg, pipeline, train, val).unwrap();
    let log = p.log.clone().unwrap();
    assert_eq!(log.stop, StopReason::Patience, "{:?}", log.epochs.last());
    assert_eq!(log.epochs.len(), log.best_epoch + 10);
    let tail_min = log.epochs[log.best_epoch..].iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert!(tail_min >= log.best_val_loss);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let saved = SavedModel::Lstm(p.clone());
    let digest = saved.save(&path).unwrap();
    let back = SavedModel::load(&path).unwrap();
    assert_eq!(back.digest(), digest);
    assert_eq!(back.to_json(), saved.to_json());
    let SavedModel::Lstm(q) = back else { panic!("wrong kind") };
    assert!(q.tensors == p.tensors, "tensors changed on reload");
    let val_loss = q.mean_loss(val).unwrap();
    assert!((val_loss - log.best_val_loss).abs() < 1e-12, "{val_loss} vs {}", log.best_val_loss);
    let a = p.predict_all(val).unwrap();
    let b = q.predict_all(val).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.lat().to_bits() == y.lat().to_bits() && x.lon().to_bits() == y.lon().to_bits()));
}

#[test]
fn nn_baseline_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = ClusterModel::from_centroids(common::random_centroids(25, &mut rng));
    for _ in 0..200 {
        let p = Coordinate::new(41.05 + rng.random::<f64>() * 0.3, -8.75 + rng.random::<f64>() * 0.3).unwrap();
        let mut best = 0;
        for (i, c) in model.centroids.iter().enumerate() {
            if haversine_km(p, *c) < haversine_km(p, model.centroids[best]) {
                best = i;
            }
        }
        assert_eq!(predict_nn_baseline(&model, p), model.centroids[best]);
    }
}

#[test]
fn mmlp_windows_and_missing_polylines() {
    let (_, seqs) = common::small_city(2, 6, 4);
    let mut seq = seqs[0].clone();
    let pts: Vec<Coordinate> = (0..3).map(|i| Coordinate::new(41.0 + i as f64, -8.0).unwrap()).collect();
    seq.last_trip_polyline = Some(pts);
    let x = mmlp_input(MmlpVariant::Mmlp, &seq, &Standardization::IDENTITY).unwrap();
    let lats: Vec<f64> = x.chunks(2).map(|c| c[0]).collect();
    assert_eq!(lats, [41.0, 42.0, 43.0, 43.0, 43.0, 41.0, 41.0, 41.0, 42.0, 43.0]);

    let y = mmlp_input(MmlpVariant::MmlpSeq, &seq, &Standardization::IDENTITY).unwrap();
    assert_eq!(y.len(), 18);
    let pad = 2 * (9 - seq.len());
    assert!(y[..pad].iter().all(|v| *v == 0.0));
    assert_eq!(y[y.len() - 2], seq.current_pickup.loc.lat());

    seq.last_trip_polyline = None;
    assert!(matches!(
        mmlp_input(MmlpVariant::Mmlp, &seq, &Standardization::IDENTITY),
        Err(ModelError::MissingPolyline(_))
    ));
    let clusters = common::clusters_for(&seqs, 2);
    let drivers = nextdrop::experiment::fit_drivers(&seqs);
    let cfg = MmlpConfig { hidden: 8, ..MmlpConfig::new(MmlpVariant::Mmlp) };
    assert!(matches!(
        MmlpModel::train(cfg, clusters, drivers, std::slice::from_ref(&seq), std::slice::from_ref(&seq)),
        Err(ModelError::MissingPolyline(_))
    ));
}

#[test]
fn mmlp_cross_entropy_falls_over_first_epochs() {
    let (_, seqs) = common::small_city(6, 20, 12);
    let clusters = common::clusters_for(&seqs, 6);
    let drivers = nextdrop::experiment::fit_drivers(&seqs);
    for variant in [MmlpVariant::Mmlp, MmlpVariant::MmlpSeq] {
        let cfg = MmlpConfig { hidden: 64, batch_size: 20, max_epochs: 10, patience: 10, ..MmlpConfig::new(variant) };
        let m = MmlpModel::train(cfg, clusters.clone(), drivers.clone(), &seqs, &seqs).unwrap();
        let log = m.log.unwrap();
        assert_eq!(log.epochs.len(), 10);
        let mut prev = log.initial_val_loss;
        for e in &log.epochs {
            assert!(e.val_loss < prev, "{variant:?}: {} after {prev}", e.val_loss);
            prev = e.val_loss;
        }
    }
}

#[test]
fn mmlp_one_hot_softmax_gives_centroid() {
    let c = vec![Coordinate::new(41.1, -8.6).unwrap(), Coordinate::new(41.2, -8.5).unwrap()];
    let y = nextdrop::model::weighted_centroid(&[0.0, 1.0], &c).unwrap();
    assert!(haversine_km(y, c[1]) < 1e-9);
}
