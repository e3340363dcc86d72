use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::engine::{self, FitOptions, Objective, Optimizer, Phase};
use super::{
    check_layout, weighted_centroid, Mode, ModelError, NamedTensor, PredictorConfig, Standardization, StopReason,
    TrainingLog,
};
use crate::clustering::{map_trace, ClusterModel};
use crate::features::{
    assemble, step_inputs, BocMap, CategoricalTables, DriverVocab, EmbeddingTable, FeatureTensor, StepInputs,
    ZoneEmbedding, ZoneSource, CAT_DIM, MAX_STEPS, STEP_WIDTH, ZONE_DIM,
};
use crate::geo::Coordinate;
use crate::ingest::DriverSequence;
use crate::tensor_nn::{
    attention, dense, dropout_mask, glorot_uniform, lstm_step, softmax, AdamState, Graph, LstmParams, LstmVars,
    Tensor, TensorError, Var,
};

const ZONE: usize = 0;
const HOUR: usize = 1;
const WEEKDAY: usize = 2;
const DAY_TYPE: usize = 3;
const DRIVER: usize = 4;
const ATTENTION: usize = 5;
const LSTM: usize = 6;
const SOFT_W: usize = 14;
const SOFT_B: usize = 15;
const OUT_W: usize = 16;

const LSTM_NAMES: [&str; 8] = ["w_f", "w_i", "w_c", "w_o", "b_f", "b_i", "b_c", "b_o"];

fn layout(m: usize, drivers: usize, hidden: usize, mode: Mode) -> Vec<(String, Vec<usize>)> {
    let mut l = vec![
        ("zone".to_string(), vec![m, ZONE_DIM]),
        ("hour".to_string(), vec![24, CAT_DIM]),
        ("weekday".to_string(), vec![7, CAT_DIM]),
        ("day_type".to_string(), vec![3, CAT_DIM]),
        ("driver".to_string(), vec![drivers, CAT_DIM]),
        ("attention".to_string(), vec![STEP_WIDTH]),
    ];
    for (i, n) in LSTM_NAMES.iter().enumerate() {
        let shape = if i < 4 { vec![hidden, hidden + STEP_WIDTH] } else { vec![hidden] };
        l.push((format!("lstm.{n}"), shape));
    }
    l.push(("softmax.w".to_string(), vec![m, hidden]));
    l.push(("softmax.b".to_string(), vec![m]));
    if mode == Mode::Regression {
        l.push(("output.w".to_string(), vec![2, m]));
    }
    l
}

/// Everything fitted on the training split that the model consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePipeline {
    pub clusters: ClusterModel,
    pub boc: Option<BocMap>,
    pub cbow: Option<ZoneEmbedding>,
    pub drivers: DriverVocab,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Point(Coordinate),
    /// Classification mode: probabilities over the clusters.
    Probabilities(Vec<f64>),
}

/// One training or evaluation example in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: StepInputs,
    /// Standardized (lat, lon) of the drop-off.
    pub target: [f64; 2],
    /// Nearest centroid to the drop-off.
    pub class: usize,
}

/// A live model and its checkpoint at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub clusters: ClusterModel,
    pub boc: Option<BocMap>,
    pub cbow: Option<ZoneEmbedding>,
    pub drivers: DriverVocab,
    pub standardization: Standardization,
    pub tensors: Vec<NamedTensor>,
    pub log: Option<TrainingLog>,
}

fn lstm_vars(vars: &[Var], hidden: usize) -> LstmVars {
    let v = &vars[LSTM..LSTM + 8];
    LstmVars { hidden, w_f: v[0], w_i: v[1], w_c: v[2], w_o: v[3], b_f: v[4], b_i: v[5], b_c: v[6], b_o: v[7] }
}

/// Per-step input vectors built from embedding lookups.
fn step_vars(g: &mut Graph<'_>, vars: &[Var], inp: &StepInputs) -> Result<Vec<Var>, TensorError> {
    let driver = g.row(vars[DRIVER], inp.driver)?;
    (0..inp.len())
        .map(|s| {
            let zone = g.row(vars[ZONE], inp.zones[s])?;
            let boc = g.constant(inp.boc[s].to_vec());
            let hour = g.row(vars[HOUR], inp.hours[s])?;
            let weekday = g.row(vars[WEEKDAY], inp.weekdays[s])?;
            let day_type = g.row(vars[DAY_TYPE], inp.day_types[s])?;
            g.concat(&[zone, boc, hour, weekday, day_type, driver])
        })
        .collect()
}

/// Attention, LSTM over the valid steps, optional dropout, softmax layer.
/// Returns `(logits, probabilities)`.
fn head(
    g: &mut Graph<'_>,
    vars: &[Var],
    cfg: &PredictorConfig,
    steps: &[Var],
    mask: &[bool],
    dropout: Option<Vec<f64>>,
) -> Result<(Var, Var), TensorError> {
    let att = attention(g, steps, mask, vars[ATTENTION])?;
    let lstm = lstm_vars(vars, cfg.lstm_hidden);
    let mut h = g.constant(vec![0.0; cfg.lstm_hidden]);
    let mut c = g.constant(vec![0.0; cfg.lstm_hidden]);
    for x in att.outputs.iter().flatten() {
        (h, c) = lstm_step(g, &lstm, *x, h, c, cfg.lstm_activation)?;
    }
    if let Some(m) = dropout {
        h = g.mul_const(h, m)?;
    }
    let logits = dense(g, h, vars[SOFT_W], vars[SOFT_B])?;
    let probs = g.softmax(logits)?;
    Ok((logits, probs))
}

fn sample_loss(
    g: &mut Graph<'_>,
    vars: &[Var],
    cfg: &PredictorConfig,
    s: &Sample,
    dropout: Option<Vec<f64>>,
) -> Result<Var, TensorError> {
    let steps = step_vars(g, vars, &s.inputs)?;
    let mask = vec![true; steps.len()];
    let (logits, probs) = head(g, vars, cfg, &steps, &mask, dropout)?;
    match cfg.mode {
        Mode::Regression => {
            let y = g.matvec(vars[OUT_W], probs)?;
            g.mse(y, &s.target)
        }
        Mode::Classification => g.cross_entropy(logits, s.class),
    }
}

struct LstmObjective<'a> {
    cfg: PredictorConfig,
    train: &'a [Sample],
    val: &'a [Sample],
}

impl Objective for LstmObjective<'_> {
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
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, TensorError> {
        let s = match phase {
            Phase::Train => &self.train[idx],
            Phase::Val => &self.val[idx],
        };
        let p = self.cfg.dropout_p;
        let mask = rng.filter(|_| p > 0.0).map(|r| dropout_mask(self.cfg.lstm_hidden, p, r));
        sample_loss(g, vars, &self.cfg, s, mask)
    }
}

fn target_of(seq: &DriverSequence) -> Result<Coordinate, ModelError> {
    seq.target.ok_or(ModelError::MissingTarget(seq.sample_id))
}

impl Predictor {
    /// Untrained model. In regression mode the output layer holds the
    /// standardized centroids.
    pub fn init(
        config: PredictorConfig,
        pipeline: FeaturePipeline,
        standardization: Standardization,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let m = pipeline.clusters.len();
        if config.k_clusters != m {
            return Err(ModelError::Mismatch(format!("config expects {} clusters, model has {m}", config.k_clusters)));
        }
        if let Some(b) = &pipeline.boc {
            if b.vectors.len() != m {
                return Err(ModelError::Mismatch(format!("BOC map covers {} clusters, expected {m}", b.vectors.len())));
            }
        }
        if config.variant.uses_boc() && pipeline.boc.is_none() {
            return Err(ModelError::Config(format!("{} needs a BOC map", config.variant.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let zone = match (config.variant.uses_cbow(), &pipeline.cbow) {
            (true, Some(z)) => {
                if z.table.weights.shape() != [m, ZONE_DIM] {
                    return Err(ModelError::Mismatch(format!("CBOW table {:?}", z.table.weights.shape())));
                }
                z.table.weights.clone()
            }
            (true, None) => return Err(ModelError::Config("lstm_boc_w2v needs a CBOW zone embedding".into())),
            (false, _) => EmbeddingTable::random(m, ZONE_DIM, true, &mut rng).weights,
        };
        let cats = CategoricalTables::random(pipeline.drivers.size(), &mut rng);
        let h = config.lstm_hidden;
        let lstm = LstmParams::init(h, STEP_WIDTH, &mut rng);
        let mut values = vec![
            zone,
            cats.hour.weights,
            cats.weekday.weights,
            cats.day_type.weights,
            cats.driver.weights,
            Tensor::zeros(vec![STEP_WIDTH]),
        ];
        values.extend(lstm.tensors().into_iter().cloned());
        values.push(Tensor::matrix(m, h, glorot_uniform(m, h, &mut rng))?);
        values.push(Tensor::zeros(vec![m]));
        if config.mode == Mode::Regression {
            let mut out = Vec::with_capacity(2 * m);
            let z: Vec<[f64; 2]> = pipeline.clusters.centroids.iter().map(|c| standardization.forward(*c)).collect();
            out.extend(z.iter().map(|v| v[0]));
            out.extend(z.iter().map(|v| v[1]));
            values.push(Tensor::matrix(2, m, out)?);
        }
        let names = layout(m, pipeline.drivers.size(), h, config.mode);
        let tensors =
            names.into_iter().zip(values).map(|((name, _), tensor)| NamedTensor { name, tensor }).collect();
        let model = Predictor {
            config,
            clusters: pipeline.clusters,
            boc: if config.variant.uses_boc() { pipeline.boc } else { None },
            cbow: if config.variant.uses_cbow() { pipeline.cbow } else { None },
            drivers: pipeline.drivers,
            standardization,
            tensors,
            log: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Fits target scaling on `train`, trains with Adam and patience-based
    /// early stopping on `val`, and returns the best-validation parameters.
    pub fn train(
        config: PredictorConfig,
        pipeline: FeaturePipeline,
        train: &[DriverSequence],
        val: &[DriverSequence],
    ) -> Result<Self, ModelError> {
        if train.is_empty() {
            return Err(ModelError::EmptySplit("train"));
        }
        if val.is_empty() {
            return Err(ModelError::EmptySplit("validation"));
        }
        let targets = train.iter().map(target_of).collect::<Result<Vec<_>, _>>()?;
        let mut model = Predictor::init(config, pipeline, Standardization::fit(&targets))?;
        let train_s = train.iter().map(|s| model.sample(s)).collect::<Result<Vec<_>, _>>()?;
        let val_s = val.iter().map(|s| model.sample(s)).collect::<Result<Vec<_>, _>>()?;
        let obj = LstmObjective { cfg: config, train: &train_s, val: &val_s };
        let trainable = model.trainable();
        let opts = FitOptions {
            max_epochs: config.max_epochs,
            patience: config.patience,
            batch_size: config.batch_size,
            seed: config.seed,
            clip_norm: config.clip_norm,
        };
        let mut optimizer = Optimizer::Adam(AdamState::new(config.learning_rate));
        model.log = Some(engine::fit(&obj, &mut model.tensors, &trainable, &opts, &mut optimizer)?);
        Ok(model)
    }

    /// The zone table is frozen when it comes from CBOW.
    pub fn trainable(&self) -> Vec<bool> {
        (0..self.tensors.len()).map(|i| !(i == ZONE && self.config.variant.uses_cbow())).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let m = self.clusters.len();
        if self.config.k_clusters != m {
            return Err(ModelError::Mismatch(format!("config expects {} clusters, model has {m}", self.config.k_clusters)));
        }
        check_layout(&self.tensors, &layout(m, self.drivers.size(), self.config.lstm_hidden, self.config.mode))?;
        if self.boc.as_ref().is_some_and(|b| b.vectors.len() != m) {
            return Err(ModelError::Mismatch("BOC map size".into()));
        }
        if let Some(z) = &self.cbow {
            if z.table.weights.shape() != [m, ZONE_DIM] || z.present.len() != m {
                return Err(ModelError::Mismatch("CBOW table shape".into()));
            }
        }
        let s = &self.standardization;
        if !s.mean.iter().chain(&s.std).all(|v| v.is_finite()) || s.std.iter().any(|v| *v <= 0.0) {
            return Err(ModelError::Format("invalid standardization".into()));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn inputs(&self, seq: &DriverSequence) -> Result<StepInputs, ModelError> {
        let trace = map_trace(&self.clusters, seq);
        if trace.len() > MAX_STEPS {
            return Err(crate::features::FeatureError::TooLong { len: trace.len(), max: MAX_STEPS }.into());
        }
        Ok(step_inputs(seq, &trace, self.boc.as_ref(), &self.drivers)?)
    }

    pub fn sample(&self, seq: &DriverSequence) -> Result<Sample, ModelError> {
        let target = target_of(seq)?;
        Ok(Sample {
            inputs: self.inputs(seq)?,
            target: self.standardization.forward(target),
            class: self.clusters.assign(target),
        })
    }

    /// Training loss of one sample as a graph over `vars`, which must follow
    /// the layout of [`Predictor::tensors`].
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        sample: &Sample,
        dropout: Option<Vec<f64>>,
    ) -> Result<Var, TensorError> {
        sample_loss(g, vars, &self.config, sample, dropout)
    }

    pub fn categorical_tables(&self) -> CategoricalTables {
        let t = |i: usize| EmbeddingTable { weights: self.tensors[i].tensor.clone(), trainable: true };
        CategoricalTables { hour: t(HOUR), weekday: t(WEEKDAY), day_type: t(DAY_TYPE), driver: t(DRIVER) }
    }

    /// The padded per-step input the network sees.
    pub fn features(&self, seq: &DriverSequence) -> Result<FeatureTensor, ModelError> {
        let trace = map_trace(&self.clusters, seq);
        let zone = EmbeddingTable { weights: self.tensors[ZONE].tensor.clone(), trainable: false };
        Ok(assemble(
            seq,
            &trace,
            ZoneSource::Table(&zone),
            self.boc.as_ref(),
            &self.categorical_tables(),
            &self.drivers,
            MAX_STEPS,
        )?)
    }

    /// Maps softmax-layer logits through the prediction head.
    pub fn output_from_logits(&self, logits: &[f64]) -> Result<Coordinate, ModelError> {
        if logits.len() != self.clusters.len() {
            return Err(ModelError::Mismatch(format!("{} logits for {} clusters", logits.len(), self.clusters.len())));
        }
        let p = softmax(logits);
        self.output_from_probs(&p)
    }

    fn output_from_probs(&self, p: &[f64]) -> Result<Coordinate, ModelError> {
        match self.config.mode {
            Mode::Regression => {
                let w = &self.tensors[OUT_W].tensor;
                let dot = |r: usize| w.row(r).iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
                Ok(self.standardization.inverse([dot(0), dot(1)])?)
            }
            Mode::Classification => Ok(weighted_centroid(p, &self.clusters.centroids)?),
        }
    }

    /// Logits of the softmax layer for a sequence (no dropout).
    pub fn logits(&self, seq: &DriverSequence) -> Result<Vec<f64>, ModelError> {
        let inp = self.inputs(seq)?;
        let mut g = Graph::new();
        let vars = engine::bind(&mut g, &self.tensors, None);
        let steps = step_vars(&mut g, &vars, &inp)?;
        let mask = vec![true; steps.len()];
        let (logits, _) = head(&mut g, &vars, &self.config, &steps, &mask, None)?;
        Ok(g.value(logits).to_vec())
    }

    /// Inference on an assembled feature tensor.
    pub fn forward(&self, ft: &FeatureTensor) -> Result<Prediction, ModelError> {
        if ft.values.shape().len() != 2 || ft.values.cols() != STEP_WIDTH || ft.mask.len() != ft.values.rows() {
            return Err(ModelError::Mismatch(format!("feature tensor {:?}", ft.values.shape())));
        }
        let mut g = Graph::new();
        let vars = engine::bind(&mut g, &self.tensors, None);
        let steps: Vec<Var> = (0..ft.values.rows()).map(|r| g.constant(ft.values.row(r).to_vec())).collect();
        let (_, probs) = head(&mut g, &vars, &self.config, &steps, &ft.mask, None)?;
        let p = g.value(probs).to_vec();
        match self.config.mode {
            Mode::Regression => Ok(Prediction::Point(self.output_from_probs(&p)?)),
            Mode::Classification => Ok(Prediction::Probabilities(p)),
        }
    }

    /// Point estimate in either mode.
    pub fn predict(&self, seq: &DriverSequence) -> Result<Coordinate, ModelError> {
        self.output_from_logits(&self.logits(seq)?)
    }

    pub fn predict_all(&self, seqs: &[DriverSequence]) -> Result<Vec<Coordinate>, ModelError> {
        seqs.par_iter().map(|s| self.predict(s)).collect()
    }

    /// Mean training objective (no dropout) over `seqs`.
    pub fn mean_loss(&self, seqs: &[DriverSequence]) -> Result<f64, ModelError> {
        let samples = seqs.iter().map(|s| self.sample(s)).collect::<Result<Vec<_>, _>>()?;
        let obj = LstmObjective { cfg: self.config, train: &[], val: &samples };
        Ok(engine::mean_loss(&obj, &self.tensors, Phase::Val)?)
    }

    pub fn diverged(&self) -> bool {
        self.log.as_ref().is_some_and(|l| matches!(l.stop, StopReason::Diverged { .. }))
    }
}
