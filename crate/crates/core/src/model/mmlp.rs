//! Multi-layer perceptron baselines over flattened coordinates.
//!
//! `mmlp` reads the first five and last five GPS points of the most recent
//! completed trip; `mmlp_seq` reads the whole alternating pick-up/drop-off
//! sequence, left-padded with zeros to nine points. Both append the hour,
//! weekday, day-type and driver embeddings of the current pick-up, pass
//! through one ReLU layer and a softmax over the clusters, and train with
//! cross-entropy against the nearest centroid. The point estimate is the
//! probability-weighted centroid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::engine::{self, FitOptions, Objective, Optimizer, Phase};
use super::{check_layout, weighted_centroid, ModelError, NamedTensor, Standardization, TrainingLog};
use crate::clustering::ClusterModel;
use crate::features::{CategoricalTables, DriverVocab, CAT_DIM, MAX_STEPS};
use crate::geo::Coordinate;
use crate::ingest::DriverSequence;
use crate::tensor_nn::{dense, glorot_uniform, softmax, Graph, SgdMomentum, Tensor, TensorError, Var};

const HOUR: usize = 0;
const WEEKDAY: usize = 1;
const DAY_TYPE: usize = 2;
const DRIVER: usize = 3;
const HIDDEN_W: usize = 4;
const HIDDEN_B: usize = 5;
const SOFT_W: usize = 6;
const SOFT_B: usize = 7;

/// Points taken from each end of the polyline.
pub const MMLP_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmlpVariant {
    Mmlp,
    MmlpSeq,
}

impl MmlpVariant {
    pub fn name(self) -> &'static str {
        match self {
            MmlpVariant::Mmlp => "mmlp",
            MmlpVariant::MmlpSeq => "mmlp_seq",
        }
    }

    fn coord_width(self) -> usize {
        match self {
            MmlpVariant::Mmlp => 4 * MMLP_WINDOW,
            MmlpVariant::MmlpSeq => 2 * MAX_STEPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmlpConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub variant: MmlpVariant,
}

impl MmlpConfig {
    pub fn new(variant: MmlpVariant) -> Self {
        MmlpConfig {
            hidden: 500,
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 200,
            max_epochs: 200,
            patience: 10,
            seed: 1,
            variant,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(ModelError::Config("hidden, batch_size and patience must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::Config("learning_rate must be positive and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

fn layout(cfg: &MmlpConfig, m: usize, drivers: usize) -> Vec<(String, Vec<usize>)> {
    let input = cfg.variant.coord_width() + 4 * CAT_DIM;
    vec![
        ("hour".into(), vec![24, CAT_DIM]),
        ("weekday".into(), vec![7, CAT_DIM]),
        ("day_type".into(), vec![3, CAT_DIM]),
        ("driver".into(), vec![drivers, CAT_DIM]),
        ("hidden.w".into(), vec![cfg.hidden, input]),
        ("hidden.b".into(), vec![cfg.hidden]),
        ("softmax.w".into(), vec![m, cfg.hidden]),
        ("softmax.b".into(), vec![m]),
    ]
}

/// Standardized coordinate block of the network input.
pub fn mmlp_input(variant: MmlpVariant, seq: &DriverSequence, s: &Standardization) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(variant.coord_width());
    match variant {
        MmlpVariant::Mmlp => {
            let poly = seq
                .last_trip_polyline
                .as_deref()
                .filter(|p| !p.is_empty())
                .ok_or(ModelError::MissingPolyline(seq.sample_id))?;
            let n = poly.len();
            // short traces repeat their end points to fill each window
            let first = (0..MMLP_WINDOW).map(|i| poly[i.min(n - 1)]);
            let last = (0..MMLP_WINDOW).map(|i| poly[(n + i).saturating_sub(MMLP_WINDOW)]);
            for p in first.chain(last) {
                out.extend(s.forward(p));
            }
        }
        MmlpVariant::MmlpSeq => {
            let pts: Vec<Coordinate> = seq.points().map(|p| p.loc).collect();
            if pts.len() > MAX_STEPS {
                return Err(ModelError::Mismatch(format!("{} sequence points exceed {MAX_STEPS}", pts.len())));
            }
            out.resize(2 * (MAX_STEPS - pts.len()), 0.0);
            for p in pts {
                out.extend(s.forward(p));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct MmlpSample {
    coords: Vec<f64>,
    cats: [usize; 4],
    class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmlpModel {
    pub config: MmlpConfig,
    pub clusters: ClusterModel,
    pub drivers: DriverVocab,
    pub standardization: Standardization,
    pub tensors: Vec<NamedTensor>,
    pub log: Option<TrainingLog>,
}

fn logits_graph(g: &mut Graph<'_>, vars: &[Var], s: &MmlpSample) -> Result<Var, TensorError> {
    let coords = g.constant(s.coords.clone());
    let mut parts = vec![coords];
    for (t, &idx) in [HOUR, WEEKDAY, DAY_TYPE, DRIVER].iter().zip(&s.cats) {
        parts.push(g.row(vars[*t], idx)?);
    }
    let x = g.concat(&parts)?;
    let pre = dense(g, x, vars[HIDDEN_W], vars[HIDDEN_B])?;
    let h = g.relu(pre)?;
    dense(g, h, vars[SOFT_W], vars[SOFT_B])
}

struct MmlpObjective<'a> {
    train: &'a [MmlpSample],
    val: &'a [MmlpSample],
}

impl Objective for MmlpObjective<'_> {
    fn count(&self, phase: Phase) -> usize {
        match phase {
            Phase::Train => self.train.len(),
            Phase::Val => self.val.len(),
        }
    }

    fn loss<'p>(
        &self,
        g: &mut Graph<'p>,
        vars: &[Var],
        phase: Phase,
        idx: usize,
        _rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, TensorError> {
        let s = match phase {
            Phase::Train => &self.train[idx],
            Phase::Val => &self.val[idx],
        };
        let logits = logits_graph(g, vars, s)?;
        g.cross_entropy(logits, s.class)
    }
}

impl MmlpModel {
    pub fn init(
        config: MmlpConfig,
        clusters: ClusterModel,
        drivers: DriverVocab,
        standardization: Standardization,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let m = clusters.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cats = CategoricalTables::random(drivers.size(), &mut rng);
        let shapes = layout(&config, m, drivers.size());
        let (h, input) = (shapes[HIDDEN_W].1[0], shapes[HIDDEN_W].1[1]);
        let values = vec![
            cats.hour.weights,
            cats.weekday.weights,
            cats.day_type.weights,
            cats.driver.weights,
            Tensor::matrix(h, input, glorot_uniform(h, input, &mut rng))?,
            Tensor::zeros(vec![h]),
            Tensor::matrix(m, h, glorot_uniform(m, h, &mut rng))?,
            Tensor::zeros(vec![m]),
        ];
        let tensors = shapes.into_iter().zip(values).map(|((name, _), tensor)| NamedTensor { name, tensor }).collect();
        Ok(MmlpModel { config, clusters, drivers, standardization, tensors, log: None })
    }

    /// Fits target scaling on `train`, then SGD with momentum and early
    /// stopping on validation cross-entropy.
    pub fn train(
        config: MmlpConfig,
        clusters: ClusterModel,
        drivers: DriverVocab,
        train: &[DriverSequence],
        val: &[DriverSequence],
    ) -> Result<Self, ModelError> {
        if train.is_empty() {
            return Err(ModelError::EmptySplit("train"));
        }
        if val.is_empty() {
            return Err(ModelError::EmptySplit("validation"));
        }
        let targets =
            train.iter().map(|s| s.target.ok_or(ModelError::MissingTarget(s.sample_id))).collect::<Result<Vec<_>, _>>()?;
        let mut model = MmlpModel::init(config, clusters, drivers, Standardization::fit(&targets))?;
        let train_s = train.iter().map(|s| model.sample(s)).collect::<Result<Vec<_>, _>>()?;
        let val_s = val.iter().map(|s| model.sample(s)).collect::<Result<Vec<_>, _>>()?;
        let obj = MmlpObjective { train: &train_s, val: &val_s };
        let trainable = vec![true; model.tensors.len()];
        let opts = FitOptions {
            max_epochs: config.max_epochs,
            patience: config.patience,
            batch_size: config.batch_size,
            seed: config.seed,
            clip_norm: None,
        };
        let mut optimizer = Optimizer::Sgd(SgdMomentum::new(config.learning_rate, config.momentum));
        model.log = Some(engine::fit(&obj, &mut model.tensors, &trainable, &opts, &mut optimizer)?);
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        check_layout(&self.tensors, &layout(&self.config, self.clusters.len(), self.drivers.size()))?;
        let s = &self.standardization;
        if !s.mean.iter().chain(&s.std).all(|v| v.is_finite()) || s.std.iter().any(|v| *v <= 0.0) {
            return Err(ModelError::Format("invalid standardization".into()));
        }
        Ok(())
    }

    fn sample(&self, seq: &DriverSequence) -> Result<MmlpSample, ModelError> {
        let m = &seq.temporal_meta;
        let class = seq.target.map(|t| self.clusters.assign(t)).unwrap_or(0);
        Ok(MmlpSample {
            coords: mmlp_input(self.config.variant, seq, &self.standardization)?,
            cats: [m.hour as usize, m.weekday as usize, m.day_type as usize, self.drivers.index(&seq.driver_id)],
            class,
        })
    }

    pub fn probabilities(&self, seq: &DriverSequence) -> Result<Vec<f64>, ModelError> {
        let s = self.sample(seq)?;
        let mut g = Graph::new();
        let vars = engine::bind(&mut g, &self.tensors, None);
        let logits = logits_graph(&mut g, &vars, &s)?;
        Ok(softmax(g.value(logits)))
    }

    pub fn predict(&self, seq: &DriverSequence) -> Result<Coordinate, ModelError> {
        Ok(weighted_centroid(&self.probabilities(seq)?, &self.clusters.centroids)?)
    }

    pub fn predict_all(&self, seqs: &[DriverSequence]) -> Result<Vec<Coordinate>, ModelError> {
        seqs.par_iter().map(|s| self.predict(s)).collect()
    }
}
