//! The attention-LSTM destination predictor, its training loop, checkpoints,
//! and the baselines it is compared against.
//!
//! Targets are standardized per coordinate on the training split. In
//! regression mode the network ends in a softmax over the `m` clusters
//! followed by a `2 x m` linear layer initialized with the standardized
//! centroids, so that at initialization the prediction is exactly the
//! probability-weighted mean of the cluster centres. In classification mode
//! that layer is dropped, the loss is cross-entropy against the nearest
//! centroid, and the point estimate is `Σ P_i c_i` over the raw centroids.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clustering::ClusterModel;
use crate::features::FeatureError;
use crate::geo::{Coordinate, GeoError};
use crate::tensor_nn::{LstmActivation, Tensor, TensorError};

mod engine;
mod lstm;
mod mmlp;

pub use engine::{EarlyStop, EarlyStopping};
pub use lstm::{FeaturePipeline, Prediction, Predictor, Sample};
pub use mmlp::{mmlp_input, MmlpConfig, MmlpModel, MmlpVariant};

pub const CHECKPOINT_FORMAT: &str = "nextdrop-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("sample {0} has no target drop-off")]
    MissingTarget(u64),
    #[error("sample {0} has no raw polyline; the mmlp baseline needs GPS traces, use mmlp_seq for pick-up/drop-off-only data")]
    MissingPolyline(u64),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Regression,
    Classification,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression" | "reg" => Ok(Mode::Regression),
            "classification" | "cls" => Ok(Mode::Classification),
            _ => Err(format!("unknown mode {s:?} (expected regression or classification)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Regression => "regression",
            Mode::Classification => "classification",
        })
    }
}

/// Input tiers of the recurrent model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Driver and time embeddings plus a randomly initialized, trainable zone
    /// embedding.
    Lstm,
    /// Adds the per-cluster bag-of-concepts.
    LstmBoc,
    /// Adds the bag-of-concepts and replaces the zone table with the frozen
    /// CBOW embedding.
    LstmBocW2v,
}

impl Variant {
    pub fn uses_boc(self) -> bool {
        !matches!(self, Variant::Lstm)
    }

    pub fn uses_cbow(self) -> bool {
        matches!(self, Variant::LstmBocW2v)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::LstmBoc => "lstm_boc",
            Variant::LstmBocW2v => "lstm_boc_w2v",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lstm" => Ok(Variant::Lstm),
            "lstm_boc" => Ok(Variant::LstmBoc),
            "lstm_boc_w2v" => Ok(Variant::LstmBocW2v),
            _ => Err(format!("unknown lstm variant {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub lstm_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub k_clusters: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mode: Mode,
    pub lstm_activation: LstmActivation,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub variant: Variant,
}

impl PredictorConfig {
    pub fn new(k_clusters: usize, variant: Variant) -> Self {
        PredictorConfig {
            lstm_hidden: 128,
            learning_rate: 1e-3,
            batch_size: 64,
            dropout_p: 0.5,
            k_clusters,
            max_epochs: 200,
            patience: 10,
            seed: 1,
            mode: Mode::Regression,
            lstm_activation: LstmActivation::Relu,
            clip_norm: Some(5.0),
            variant,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if self.lstm_hidden == 0 || self.batch_size == 0 || self.k_clusters == 0 {
            return bad("lstm_hidden, batch_size and k_clusters must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Per-coordinate affine scaling of (lat, lon), fitted on training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Standardization {
    pub const IDENTITY: Standardization = Standardization { mean: [0.0; 2], std: [1.0; 2] };

    /// Population mean and standard deviation; a degenerate spread scales by 1.
    pub fn fit(points: &[Coordinate]) -> Self {
        if points.is_empty() {
            return Self::IDENTITY;
        }
        let n = points.len() as f64;
        let mut mean = [0.0; 2];
        for p in points {
            mean[0] += p.lat();
            mean[1] += p.lon();
        }
        mean = mean.map(|m| m / n);
        let mut var = [0.0; 2];
        for p in points {
            var[0] += (p.lat() - mean[0]).powi(2);
            var[1] += (p.lon() - mean[1]).powi(2);
        }
        let std = var.map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        });
        Standardization { mean, std }
    }

    pub fn forward(&self, p: Coordinate) -> [f64; 2] {
        [(p.lat() - self.mean[0]) / self.std[0], (p.lon() - self.mean[1]) / self.std[1]]
    }

    /// Inverse scaling; the latitude is clamped onto the sphere.
    pub fn inverse(&self, z: [f64; 2]) -> Result<Coordinate, GeoError> {
        let lat = (z[0] * self.std[0] + self.mean[0]).clamp(-90.0, 90.0);
        Coordinate::new(lat, z[1] * self.std[1] + self.mean[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss during the epoch (dropout active).
    pub train_loss: f64,
    /// Validation loss after the epoch (dropout off).
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// A non-finite loss or gradient; the parameters are the last best snapshot.
    Diverged { epoch: usize, reason: String },
}

/// Losses are MSE on standardized coordinates in regression mode and
/// cross-entropy in classification mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Loss on the training split before the first update.
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch improved on the initial parameters.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub(crate) fn check_layout(tensors: &[NamedTensor], expected: &[(String, Vec<usize>)]) -> Result<(), ModelError> {
    if tensors.len() != expected.len() {
        return Err(ModelError::Format(format!("{} tensors, expected {}", tensors.len(), expected.len())));
    }
    for (t, (name, shape)) in tensors.iter().zip(expected) {
        if &t.name != name || t.tensor.shape() != shape.as_slice() {
            return Err(ModelError::Format(format!(
                "tensor {} {:?}, expected {name} {shape:?}",
                t.name,
                t.tensor.shape()
            )));
        }
    }
    Ok(())
}

/// Centroid nearest to the pick-up.
pub fn predict_nn_baseline(model: &ClusterModel, pickup: Coordinate) -> Coordinate {
    model.centroid(model.assign(pickup))
}

/// `Σ P_i c_i` over latitude and longitude.
pub fn weighted_centroid(probs: &[f64], centroids: &[Coordinate]) -> Result<Coordinate, GeoError> {
    let (mut lat, mut lon) = (0.0, 0.0);
    for (p, c) in probs.iter().zip(centroids) {
        lat += p * c.lat();
        lon += p * c.lon();
    }
    Coordinate::new(lat.clamp(-90.0, 90.0), lon)
}

/// Any trained model, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SavedModel {
    Lstm(Predictor),
    Mmlp(MmlpModel),
}

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format: String,
    version: u32,
    model: M,
}

impl SavedModel {
    /// Deterministic JSON; floats round-trip exactly.
    pub fn to_json(&self) -> String {
        let env = Envelope { format: CHECKPOINT_FORMAT.to_string(), version: CHECKPOINT_VERSION, model: self };
        serde_json::to_string(&env).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let env: Envelope<SavedModel> = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if env.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Format(format!("unknown format {:?}", env.format)));
        }
        if env.version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {}", env.version)));
        }
        match &env.model {
            SavedModel::Lstm(p) => p.validate()?,
            SavedModel::Mmlp(m) => m.validate()?,
        }
        Ok(env.model)
    }

    pub fn save(&self, path: &Path) -> Result<String, ModelError> {
        let text = self.to_json();
        std::fs::write(path, &text).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Ok(digest(text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn digest(&self) -> String {
        digest(self.to_json().as_bytes())
    }

    pub fn centroids(&self) -> &[Coordinate] {
        match self {
            SavedModel::Lstm(p) => &p.clusters.centroids,
            SavedModel::Mmlp(m) => &m.clusters.centroids,
        }
    }
}

/// Lower-case hex SHA-256.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
