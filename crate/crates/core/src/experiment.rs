//! Experiment orchestration: config files, the random split, artifact fitting
//! on the training split, model runs, EDS results and reports.
//!
//! Every fitted statistic (centroids, BOC, CBOW table, target scaling, driver
//! vocabulary) is computed from the training split alone. Outputs are
//! byte-identical for identical data, config and seeds; wall-clock timings
//! are kept out of the results file unless explicitly requested.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clustering::{fit_kmeans, map_trace, ClusterError, ClusterModel, KMeansParams};
use crate::features::{build_boc, train_cbow, BocMap, CbowParams, DriverVocab, FeatureError, ZoneEmbedding};
use crate::geo::{eds_km, median_km, Coordinate};
use crate::ingest::{
    build_sequences, parse_pois, parse_timezone, parse_trips, select_top_drivers, DriverSequence, HolidayCalendar,
    IngestError, SequenceOptions, TripFormat,
};
use crate::model::{
    digest, predict_nn_baseline, FeaturePipeline, MmlpConfig, MmlpModel, MmlpVariant, Mode, ModelError, Predictor,
    PredictorConfig, SavedModel, Variant,
};
use crate::tensor_nn::LstmActivation;

pub const RESULTS_HEADER: &str = "model,city,mean_eds_km,median_eds_km,n_test,seed,wall_s";
pub const DUMP_HEADER: &str = "sample_id,pred_lat,pred_lon,true_lat,true_lon,eds_km";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("split: {0}")]
    Split(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("results file {path}: {reason}")]
    Results { path: String, reason: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// model menu

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    Nn,
    Mmlp(MmlpVariantKey),
    Lstm(VariantKey, ModeKey),
}

/// Orderable wrappers, so model specs can key maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MmlpVariantKey {
    Mmlp,
    MmlpSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum VariantKey {
    Lstm,
    LstmBoc,
    LstmBocW2v,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModeKey {
    Regression,
    Classification,
}

impl From<MmlpVariantKey> for MmlpVariant {
    fn from(k: MmlpVariantKey) -> Self {
        match k {
            MmlpVariantKey::Mmlp => MmlpVariant::Mmlp,
            MmlpVariantKey::MmlpSeq => MmlpVariant::MmlpSeq,
        }
    }
}

impl From<VariantKey> for Variant {
    fn from(k: VariantKey) -> Self {
        match k {
            VariantKey::Lstm => Variant::Lstm,
            VariantKey::LstmBoc => Variant::LstmBoc,
            VariantKey::LstmBocW2v => Variant::LstmBocW2v,
        }
    }
}

impl From<ModeKey> for Mode {
    fn from(k: ModeKey) -> Self {
        match k {
            ModeKey::Regression => Mode::Regression,
            ModeKey::Classification => Mode::Classification,
        }
    }
}

impl ModelKind {
    /// Name used in results: the menu name, with `_classification` appended
    /// for classification-mode LSTMs.
    pub fn name(&self) -> String {
        match self {
            ModelKind::Nn => "nn".into(),
            ModelKind::Mmlp(v) => MmlpVariant::from(*v).name().into(),
            ModelKind::Lstm(v, ModeKey::Regression) => Variant::from(*v).name().into(),
            ModelKind::Lstm(v, ModeKey::Classification) => format!("{}_classification", Variant::from(*v).name()),
        }
    }

    pub fn needs_pois(&self) -> bool {
        matches!(self, ModelKind::Lstm(v, _) if Variant::from(*v).uses_boc())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    /// `name` or `name:mode`, e.g. `lstm_boc_w2v:classification`. Only the
    /// LSTM tiers take a mode.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, mode) = match s.split_once(':') {
            Some((n, m)) => (n.trim(), Some(m.trim())),
            None => (s.trim(), None),
        };
        let mode_key = match mode.map(Mode::from_str).transpose()? {
            None | Some(Mode::Regression) => ModeKey::Regression,
            Some(Mode::Classification) => ModeKey::Classification,
        };
        let lstm = |v| Ok(ModelKind::Lstm(v, mode_key));
        let plain = |k: ModelKind| match mode {
            None => Ok(k),
            Some(_) => Err(format!("model {name:?} has no regression/classification mode")),
        };
        match name {
            "nn" => plain(ModelKind::Nn),
            "mmlp" => plain(ModelKind::Mmlp(MmlpVariantKey::Mmlp)),
            "mmlp_seq" => plain(ModelKind::Mmlp(MmlpVariantKey::MmlpSeq)),
            "lstm" => lstm(VariantKey::Lstm),
            "lstm_boc" => lstm(VariantKey::LstmBoc),
            "lstm_boc_w2v" => lstm(VariantKey::LstmBocW2v),
            _ => Err(format!("unknown model {name:?}")),
        }
    }
}

// ---------------------------------------------------------------------------
// spec

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub city: String,
    pub trips: PathBuf,
    pub format: TripFormat,
    pub pois: Option<PathBuf>,
    pub holidays: Option<PathBuf>,
    pub timezone: String,
    pub top_drivers: Option<usize>,
    pub history_k: usize,
    pub max_gap_hours: f64,
    pub fractions: [f64; 3],
    pub split_seed: u64,
    pub seed: u64,
    pub k_clusters: usize,
    pub kmeans_restarts: usize,
    pub models: Vec<ModelKind>,
    pub output_dir: PathBuf,
    pub lstm_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lstm_activation: LstmActivation,
    pub clip_norm: Option<f64>,
    pub mmlp_hidden: usize,
    pub mmlp_learning_rate: f64,
    pub mmlp_batch_size: usize,
    pub mmlp_max_epochs: usize,
    pub cbow_epochs: usize,
    pub record_wall_time: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            city: "city".into(),
            trips: PathBuf::new(),
            format: TripFormat::PolylineCsv,
            pois: None,
            holidays: None,
            timezone: "UTC".into(),
            top_drivers: None,
            history_k: 8,
            max_gap_hours: 3.0,
            fractions: [0.65, 0.15, 0.20],
            split_seed: 42,
            seed: 1,
            k_clusters: 100,
            kmeans_restarts: 10,
            models: vec![ModelKind::Nn],
            output_dir: PathBuf::from("out"),
            lstm_hidden: 128,
            learning_rate: 1e-3,
            batch_size: 64,
            dropout_p: 0.5,
            max_epochs: 200,
            patience: 10,
            lstm_activation: LstmActivation::Relu,
            clip_norm: Some(5.0),
            mmlp_hidden: 500,
            mmlp_learning_rate: 0.001,
            mmlp_batch_size: 200,
            mmlp_max_epochs: 200,
            cbow_epochs: 5,
            record_wall_time: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

impl ExperimentSpec {
    /// `key = value` lines; `#` starts a comment. Relative paths are resolved
    /// against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ExperimentError> {
        let mut spec = ExperimentSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config { line: i + 1, reason: format!("expected key = value, got {line:?}") })?;
            spec.set(k.trim(), v.trim(), base).map_err(|reason| ExperimentError::Config { line: i + 1, reason })?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Sets one key; command-line overrides use the same entry point.
    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<(), String> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        match key {
            "city" => self.city = v.to_string(),
            "trips" | "dataset" => self.trips = path(v),
            "format" => self.format = v.parse().map_err(|e: IngestError| e.to_string())?,
            "pois" => self.pois = (!v.is_empty()).then(|| path(v)),
            "holidays" => self.holidays = (!v.is_empty()).then(|| path(v)),
            "timezone" => self.timezone = v.to_string(),
            "top_drivers" => self.top_drivers = Some(parse_value(key, v)?),
            "history_k" => self.history_k = parse_value(key, v)?,
            "max_gap_hours" => self.max_gap_hours = parse_value(key, v)?,
            "fractions" | "split" => {
                let parts: Vec<f64> =
                    v.split([',', '/']).map(|p| parse_value(key, p.trim())).collect::<Result<_, _>>()?;
                self.fractions = parts.try_into().map_err(|_| format!("{key}: expected three fractions"))?;
            }
            "split_seed" => self.split_seed = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "k_clusters" | "k" => self.k_clusters = parse_value(key, v)?,
            "kmeans_restarts" => self.kmeans_restarts = parse_value(key, v)?,
            "models" => {
                self.models = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(ModelKind::from_str)
                    .collect::<Result<_, _>>()?;
            }
            "output_dir" | "out" => self.output_dir = path(v),
            "lstm_hidden" => self.lstm_hidden = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "dropout_p" | "dropout" => self.dropout_p = parse_value(key, v)?,
            "max_epochs" => self.max_epochs = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "lstm_activation" => self.lstm_activation = v.parse()?,
            "clip_norm" => {
                self.clip_norm = match v {
                    "none" | "off" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "mmlp_hidden" => self.mmlp_hidden = parse_value(key, v)?,
            "mmlp_learning_rate" => self.mmlp_learning_rate = parse_value(key, v)?,
            "mmlp_batch_size" => self.mmlp_batch_size = parse_value(key, v)?,
            "mmlp_max_epochs" => self.mmlp_max_epochs = parse_value(key, v)?,
            "cbow_epochs" => self.cbow_epochs = parse_value(key, v)?,
            "record_wall_time" => self.record_wall_time = parse_bool(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Spec(m));
        let f = self.fractions;
        if f.iter().any(|x| !(x.is_finite() && *x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {f:?} must be positive and sum to 1"));
        }
        if self.k_clusters == 0 {
            return bad("k_clusters must be positive".into());
        }
        if self.history_k == 0 || !self.history_k.is_multiple_of(2) || self.history_k > 8 {
            return bad("history_k must be an even number between 2 and 8".into());
        }
        if self.models.is_empty() {
            return bad("no models requested".into());
        }
        self.predictor_config(Variant::Lstm, Mode::Regression).validate()?;
        self.mmlp_config(MmlpVariant::MmlpSeq).validate()?;
        Ok(())
    }

    pub fn predictor_config(&self, variant: Variant, mode: Mode) -> PredictorConfig {
        PredictorConfig {
            lstm_hidden: self.lstm_hidden,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            dropout_p: self.dropout_p,
            k_clusters: self.k_clusters,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            mode,
            lstm_activation: self.lstm_activation,
            clip_norm: self.clip_norm,
            variant,
        }
    }

    pub fn mmlp_config(&self, variant: MmlpVariant) -> MmlpConfig {
        MmlpConfig {
            hidden: self.mmlp_hidden,
            learning_rate: self.mmlp_learning_rate,
            momentum: 0.9,
            batch_size: self.mmlp_batch_size,
            max_epochs: self.mmlp_max_epochs,
            patience: self.patience,
            seed: self.seed,
            variant,
        }
    }

    pub fn sequence_options(&self) -> Result<SequenceOptions, ExperimentError> {
        let holidays = match &self.holidays {
            Some(p) => HolidayCalendar::load(p)?,
            None => HolidayCalendar::weekends_only(),
        };
        Ok(SequenceOptions {
            k: self.history_k,
            max_gap_hours: self.max_gap_hours,
            timezone: parse_timezone(&self.timezone)?,
            holidays,
        })
    }
}

// ---------------------------------------------------------------------------
// split

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<DriverSequence>,
    pub val: Vec<DriverSequence>,
    pub test: Vec<DriverSequence>,
}

/// Sizes of the train / validation / test parts: `floor(n·f + ½)` for the
/// first two, the remainder for test.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3], ExperimentError> {
    let part = |f: f64| (n as f64 * f + 0.5).floor() as usize;
    let (train, val) = (part(fractions[0]), part(fractions[1]));
    let test = n.checked_sub(train + val).ok_or_else(|| ExperimentError::Split("fractions exceed 1".into()))?;
    let sizes = [train, val, test];
    if sizes.contains(&0) {
        return Err(ExperimentError::Split(format!("{n} samples give an empty split {sizes:?}")));
    }
    Ok(sizes)
}

/// Uniformly random permutation by seed, then contiguous slicing.
pub fn split(seqs: &[DriverSequence], fractions: [f64; 3], seed: u64) -> Result<Splits, ExperimentError> {
    let [train, val, _] = split_sizes(seqs.len(), fractions)?;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |r: std::ops::Range<usize>| order[r].iter().map(|&i| seqs[i].clone()).collect();
    Ok(Splits { train: take(0..train), val: take(train..train + val), test: take(train + val..seqs.len()) })
}

/// Parses trips and builds sequences as configured.
pub fn prepare(spec: &ExperimentSpec) -> Result<(Vec<DriverSequence>, usize), ExperimentError> {
    let parsed = parse_trips(&spec.trips, spec.format)?;
    let rejects = parsed.rejects.len();
    let trips = match spec.top_drivers {
        Some(n) => select_top_drivers(parsed.records, n),
        None => parsed.records,
    };
    Ok((build_sequences(trips, &spec.sequence_options()?)?, rejects))
}

// ---------------------------------------------------------------------------
// fitted artifacts

fn targets(seqs: &[DriverSequence]) -> Result<Vec<Coordinate>, ExperimentError> {
    seqs.iter().map(|s| s.target.ok_or(ModelError::MissingTarget(s.sample_id).into())).collect()
}

pub fn fit_clusters(train: &[DriverSequence], spec: &ExperimentSpec) -> Result<ClusterModel, ExperimentError> {
    let params = KMeansParams { n_init: spec.kmeans_restarts.max(1), ..KMeansParams::new(spec.k_clusters, spec.seed) };
    Ok(fit_kmeans(&targets(train)?, &params)?)
}

/// Cluster ids of history ⊕ pick-up ⊕ drop-off for every training sample.
pub fn cbow_corpus(clusters: &ClusterModel, train: &[DriverSequence]) -> Vec<Vec<usize>> {
    train
        .iter()
        .map(|s| {
            let mut ids = map_trace(clusters, s).0;
            if let Some(t) = s.target {
                ids.push(clusters.assign(t));
            }
            ids
        })
        .collect()
}

pub fn fit_cbow(clusters: &ClusterModel, train: &[DriverSequence], spec: &ExperimentSpec) -> Result<ZoneEmbedding, ExperimentError> {
    let params = CbowParams { epochs: spec.cbow_epochs, seed: spec.seed, ..CbowParams::default() };
    Ok(train_cbow(&cbow_corpus(clusters, train), clusters.len(), &params)?.embedding)
}

pub fn fit_boc(clusters: &ClusterModel, pois: &Path) -> Result<BocMap, ExperimentError> {
    Ok(build_boc(clusters, &parse_pois(pois)?.pois))
}

pub fn fit_drivers(train: &[DriverSequence]) -> DriverVocab {
    DriverVocab::fit(train.iter().map(|s| s.driver_id.as_str()))
}

/// Everything fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub clusters: ClusterModel,
    pub boc: Option<BocMap>,
    pub cbow: Option<ZoneEmbedding>,
    pub drivers: DriverVocab,
}

impl Artifacts {
    pub fn fit(train: &[DriverSequence], spec: &ExperimentSpec, pois_needed: bool, cbow_needed: bool) -> Result<Self, ExperimentError> {
        let clusters = fit_clusters(train, spec)?;
        let boc = match (&spec.pois, pois_needed) {
            (Some(p), true) => Some(fit_boc(&clusters, p)?),
            _ => None,
        };
        let cbow = if cbow_needed { Some(fit_cbow(&clusters, train, spec)?) } else { None };
        Ok(Artifacts { clusters, boc, cbow, drivers: fit_drivers(train) })
    }

    pub fn pipeline(&self) -> FeaturePipeline {
        FeaturePipeline {
            clusters: self.clusters.clone(),
            boc: self.boc.clone(),
            cbow: self.cbow.clone(),
            drivers: self.drivers.clone(),
        }
    }

    /// SHA-256 per artifact, for reproducibility and leakage checks.
    pub fn digests(&self) -> BTreeMap<String, String> {
        let mut d = BTreeMap::new();
        d.insert("clusters".into(), digest(self.clusters.to_text().as_bytes()));
        if let Some(b) = &self.boc {
            d.insert("boc".into(), digest(b.to_csv().as_bytes()));
        }
        if let Some(c) = &self.cbow {
            d.insert("cbow".into(), digest(serde_json::to_string(c).expect("serializable").as_bytes()));
        }
        d.insert("drivers".into(), digest(serde_json::to_string(&self.drivers).expect("serializable").as_bytes()));
        d
    }
}

// ---------------------------------------------------------------------------
// results

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub model: String,
    pub city: String,
    pub mean_eds_km: f64,
    pub median_eds_km: f64,
    pub n_test: usize,
    pub seed: u64,
    pub wall_s: f64,
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{},{:.3}",
            self.model, self.city, self.mean_eds_km, self.median_eds_km, self.n_test, self.seed, self.wall_s
        )
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>, String> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| e.to_string())?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != RESULTS_HEADER {
        return Err(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format!("row {}: {e}", i + 2))?;
        let num = |j: usize| -> Result<f64, String> {
            rec[j].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("row {}: bad number {:?}", i + 2, &rec[j]))
        };
        let int = |j: usize| -> Result<u64, String> { rec[j].parse().map_err(|_| format!("row {}: bad integer {:?}", i + 2, &rec[j])) };
        let row = ResultRow {
            model: rec[0].to_string(),
            city: rec[1].to_string(),
            mean_eds_km: num(2)?,
            median_eds_km: num(3)?,
            n_test: int(4)? as usize,
            seed: int(5)?,
            wall_s: num(6)?,
        };
        if row.mean_eds_km < 0.0 || row.median_eds_km < 0.0 {
            return Err(format!("row {}: negative EDS", i + 2));
        }
        out.push(row);
    }
    Ok(out)
}

/// Per-sample errors for one model on the test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub sample_ids: Vec<u64>,
    pub predictions: Vec<Coordinate>,
    pub truths: Vec<Coordinate>,
    pub eds: Vec<f64>,
}

impl Evaluation {
    pub fn new(test: &[DriverSequence], predictions: Vec<Coordinate>) -> Result<Self, ExperimentError> {
        let truths = targets(test)?;
        let eds = predictions.iter().zip(&truths).map(|(p, t)| eds_km(*p, *t)).collect();
        Ok(Evaluation { sample_ids: test.iter().map(|s| s.sample_id).collect(), predictions, truths, eds })
    }

    pub fn mean(&self) -> f64 {
        self.eds.iter().sum::<f64>() / self.eds.len().max(1) as f64
    }

    pub fn median(&self) -> f64 {
        median_km(&self.eds).unwrap_or(0.0)
    }

    pub fn dump_csv(&self) -> String {
        let mut s = format!("{DUMP_HEADER}\n");
        for i in 0..self.eds.len() {
            let (p, t) = (self.predictions[i], self.truths[i]);
            let _ = writeln!(s, "{},{},{},{},{},{}", self.sample_ids[i], p.lat(), p.lon(), t.lat(), t.lon(), self.eds[i]);
        }
        s
    }
}

/// A trained model of any kind.
#[allow(clippy::large_enum_variant)] // one per model, never stored in bulk
pub enum Trained {
    Nn(ClusterModel),
    Saved(SavedModel),
}

impl Trained {
    pub fn predict_all(&self, seqs: &[DriverSequence]) -> Result<Vec<Coordinate>, ExperimentError> {
        Ok(match self {
            Trained::Nn(c) => seqs.iter().map(|s| predict_nn_baseline(c, s.current_pickup.loc)).collect(),
            Trained::Saved(SavedModel::Lstm(p)) => p.predict_all(seqs)?,
            Trained::Saved(SavedModel::Mmlp(m)) => m.predict_all(seqs)?,
        })
    }
}

pub fn train_model(
    kind: ModelKind,
    spec: &ExperimentSpec,
    art: &Artifacts,
    splits: &Splits,
) -> Result<Trained, ExperimentError> {
    match kind {
        ModelKind::Nn => Ok(Trained::Nn(art.clusters.clone())),
        ModelKind::Mmlp(v) => {
            let m = MmlpModel::train(spec.mmlp_config(v.into()), art.clusters.clone(), art.drivers.clone(), &splits.train, &splits.val)?;
            Ok(Trained::Saved(SavedModel::Mmlp(m)))
        }
        ModelKind::Lstm(v, mode) => {
            let variant = Variant::from(v);
            if variant.uses_boc() && art.boc.is_none() {
                return Err(ExperimentError::Spec(format!("{} needs a POI file (key `pois`)", kind.name())));
            }
            let p = Predictor::train(spec.predictor_config(variant, mode.into()), art.pipeline(), &splits.train, &splits.val)?;
            Ok(Trained::Saved(SavedModel::Lstm(p)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFailure {
    pub model: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<ModelFailure>,
    pub artifact_digests: BTreeMap<String, String>,
    pub checkpoint_digests: BTreeMap<String, String>,
    pub n_sequences: usize,
    pub rejected_rows: usize,
}

/// Trains and evaluates every requested model on one split. A failing model
/// is recorded and the others still run.
pub fn run(spec: &ExperimentSpec) -> Result<RunOutput, ExperimentError> {
    spec.validate()?;
    let (seqs, rejected_rows) = prepare(spec)?;
    let splits = split(&seqs, spec.fractions, spec.split_seed)?;
    run_on_splits(spec, &splits, seqs.len(), rejected_rows)
}

pub fn run_on_splits(
    spec: &ExperimentSpec,
    splits: &Splits,
    n_sequences: usize,
    rejected_rows: usize,
) -> Result<RunOutput, ExperimentError> {
    let out = &spec.output_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let pois_needed = spec.models.iter().any(ModelKind::needs_pois);
    let cbow_needed = spec.models.iter().any(|m| matches!(m, ModelKind::Lstm(VariantKey::LstmBocW2v, _)));
    let art = Artifacts::fit(&splits.train, spec, pois_needed, cbow_needed)?;
    art.clusters.save(&out.join("clusters.txt"))?;
    if let Some(b) = &art.boc {
        write_file(&out.join("boc.csv"), &b.to_csv())?;
    }
    if let Some(c) = &art.cbow {
        write_file(&out.join("cbow.json"), &serde_json::to_string(c).expect("serializable"))?;
    }

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut checkpoint_digests = BTreeMap::new();
    let mut timings = "model,wall_s\n".to_string();
    for kind in &spec.models {
        let name = kind.name();
        let started = Instant::now();
        let result = train_model(*kind, spec, &art, splits).and_then(|trained| {
            let eval = Evaluation::new(&splits.test, trained.predict_all(&splits.test)?)?;
            Ok((trained, eval))
        });
        let wall = started.elapsed().as_secs_f64();
        match result {
            Ok((trained, eval)) => {
                let dir = out.join(&name);
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                write_file(&dir.join("eds.csv"), &eval.dump_csv())?;
                if let Trained::Saved(m) = &trained {
                    checkpoint_digests.insert(name.clone(), m.save(&dir.join("checkpoint.json"))?);
                }
                let _ = writeln!(timings, "{name},{wall:.3}");
                rows.push(ResultRow {
                    model: name,
                    city: spec.city.clone(),
                    mean_eds_km: eval.mean(),
                    median_eds_km: eval.median(),
                    n_test: eval.eds.len(),
                    seed: spec.seed,
                    wall_s: if spec.record_wall_time { wall } else { 0.0 },
                });
            }
            Err(e) => failures.push(ModelFailure { model: name, error: e.to_string() }),
        }
    }
    write_file(&out.join("results.csv"), &results_csv(&rows))?;
    write_file(&out.join("timings.csv"), &timings)?;
    let mut fail_csv = String::from("model,error\n");
    for f in &failures {
        let _ = writeln!(fail_csv, "{},\"{}\"", f.model, f.error.replace('"', "'"));
    }
    write_file(&out.join("failures.csv"), &fail_csv)?;
    Ok(RunOutput { rows, failures, artifact_digests: art.digests(), checkpoint_digests, n_sequences, rejected_rows })
}

// ---------------------------------------------------------------------------
// reporting

/// Merges result files into one table sorted by city, then model.
pub fn merge_results(files: &[PathBuf]) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut rows = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(f).map_err(io_err(f))?;
        rows.extend(parse_results(&text).map_err(|reason| ExperimentError::Results { path: f.display().to_string(), reason })?);
    }
    rows.sort_by(|a, b| a.city.cmp(&b.city).then_with(|| a.model.cmp(&b.model)));
    Ok(rows)
}

/// Fixed-width text table of mean and median EDS.
pub fn summary_table(rows: &[ResultRow]) -> String {
    let mut s = format!("{:<14} {:<28} {:>10} {:>12} {:>8}\n", "city", "model", "mean_km", "median_km", "n_test");
    for r in rows {
        let _ = writeln!(s, "{:<14} {:<28} {:>10.3} {:>12.3} {:>8}", r.city, r.model, r.mean_eds_km, r.median_eds_km, r.n_test);
    }
    s
}

pub const HISTOGRAM_BIN_KM: f64 = 0.5;
pub const HISTOGRAM_BINS: usize = 40;

/// `model,bin_lo_km,bin_hi_km,count` with a final open-ended bin.
pub fn histogram_csv(model: &str, eds: &[f64]) -> String {
    let mut counts = vec![0usize; HISTOGRAM_BINS + 1];
    for e in eds {
        counts[((e / HISTOGRAM_BIN_KM) as usize).min(HISTOGRAM_BINS)] += 1;
    }
    let mut s = String::new();
    for (i, c) in counts.iter().enumerate() {
        let lo = i as f64 * HISTOGRAM_BIN_KM;
        let hi = if i == HISTOGRAM_BINS { "inf".to_string() } else { format!("{}", lo + HISTOGRAM_BIN_KM) };
        let _ = writeln!(s, "{model},{lo},{hi},{c}");
    }
    s
}

/// Reads the `eds_km` column of a per-sample dump.
pub fn read_dump_eds(path: &Path) -> Result<Vec<f64>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |reason: String| ExperimentError::Results { path: path.display().to_string(), reason };
    let mut lines = text.lines();
    if lines.next() != Some(DUMP_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.rsplit(',').next().and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(format!("bad row {l:?}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_size_rule() {
        let f = [0.65, 0.15, 0.20];
        assert_eq!(split_sizes(100, f).unwrap(), [65, 15, 20]);
        assert_eq!(split_sizes(999, f).unwrap(), [649, 150, 200]);
        assert!(split_sizes(3, f).is_err());
    }

    #[test]
    fn model_names() {
        assert_eq!("nn".parse::<ModelKind>().unwrap(), ModelKind::Nn);
        let k: ModelKind = "lstm_boc_w2v:classification".parse().unwrap();
        assert_eq!(k.name(), "lstm_boc_w2v_classification");
        assert_eq!("lstm_boc".parse::<ModelKind>().unwrap().name(), "lstm_boc");
        assert!("mmlp:classification".parse::<ModelKind>().is_err());
        assert!("gru".parse::<ModelKind>().is_err());
    }

    #[test]
    fn spec_parsing() {
        let text = "# demo\ncity = porto\ntrips = data/trips.csv  # relative\nmodels = nn, lstm:classification\nfractions = 0.7, 0.1, 0.2\nrecord_wall_time = yes\n";
        let s = ExperimentSpec::parse(text, Path::new("/base")).unwrap();
        assert_eq!(s.city, "porto");
        assert_eq!(s.trips, PathBuf::from("/base/data/trips.csv"));
        assert_eq!(s.models.len(), 2);
        assert_eq!(s.fractions, [0.7, 0.1, 0.2]);
        assert!(s.record_wall_time);
        for bad in ["nonsense", "bogus = 1", "fractions = 0.5, 0.5, 0.5", "models = ", "patience = 0"] {
            assert!(ExperimentSpec::parse(bad, Path::new(".")).is_err(), "{bad}");
        }
    }

    #[test]
    fn results_round_trip_and_histogram() {
        let row = ResultRow { model: "nn".into(), city: "x".into(), mean_eds_km: 1.5, median_eds_km: 1.25, n_test: 3, seed: 1, wall_s: 0.0 };
        let parsed = parse_results(&results_csv(std::slice::from_ref(&row))).unwrap();
        assert_eq!(parsed, vec![row]);
        assert!(parse_results("a,b\n").is_err());
        let h = histogram_csv("nn", &[0.1, 0.6, 0.7, 100.0]);
        assert!(h.starts_with("nn,0,0.5,1\nnn,0.5,1,2\n"));
        assert!(h.ends_with("nn,20,inf,1\n"));
    }
}
