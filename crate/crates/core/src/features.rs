//! Per-step input features: bag-of-concepts POI counts per cluster, CBOW zone
//! embeddings over cluster traces, categorical embedding tables, and the
//! assembly of a padded `[steps, 70]` feature tensor.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{ClusterModel, ClusterTrace};
use crate::ingest::{DriverSequence, MacroCategory, Poi};
use crate::tensor_nn::Tensor;

pub const ZONE_DIM: usize = 20;
pub const BOC_DIM: usize = 10;
pub const CAT_DIM: usize = 10;
/// zone ⊕ boc ⊕ hour ⊕ weekday ⊕ day type ⊕ driver
pub const STEP_WIDTH: usize = ZONE_DIM + BOC_DIM + 4 * CAT_DIM;
/// Eight history points plus the current pick-up.
pub const MAX_STEPS: usize = 9;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("empty CBOW corpus")]
    EmptyCorpus,
    #[error("CBOW corpus has a single distinct token; no negatives can be drawn")]
    SingleToken,
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("trace has {trace} ids but the sequence has {seq} points")]
    TraceMismatch { trace: usize, seq: usize },
    #[error("sequence of {len} steps exceeds the {max}-step window")]
    TooLong { len: usize, max: usize },
    #[error("table {name}: {detail}")]
    Table { name: &'static str, detail: String },
}

// ---------------------------------------------------------------------------
// bag of concepts

/// POI counts per macro-category, in [`MacroCategory::ALL`] order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BocVector(pub [u32; BOC_DIM]);

impl BocVector {
    /// `ln(1 + count)` per category.
    pub fn log_scaled(&self) -> [f64; BOC_DIM] {
        self.0.map(|c| (c as f64).ln_1p())
    }

    pub fn total(&self) -> u64 {
        self.0.iter().map(|&c| c as u64).sum()
    }
}

/// One BOC vector per cluster id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BocMap {
    pub vectors: Vec<BocVector>,
}

impl BocMap {
    pub fn zeros(m: usize) -> Self {
        BocMap { vectors: vec![BocVector::default(); m] }
    }

    pub fn get(&self, cluster: usize) -> BocVector {
        self.vectors.get(cluster).copied().unwrap_or_default()
    }

    /// `cluster_id` followed by the ten counts.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cluster_id");
        for c in MacroCategory::ALL {
            let _ = write!(s, ",{}", c.name().to_lowercase().replace(' ', "_"));
        }
        s.push('\n');
        for (id, v) in self.vectors.iter().enumerate() {
            let _ = write!(s, "{id}");
            for c in v.0 {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// Assigns every POI to its nearest centroid and counts macro-categories.
pub fn build_boc(model: &ClusterModel, pois: &[Poi]) -> BocMap {
    let mut map = BocMap::zeros(model.len());
    for p in pois {
        let c = model.assign(p.loc);
        map.vectors[c].0[p.macro_category.index()] += 1;
    }
    map
}

// ---------------------------------------------------------------------------
// embedding tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub weights: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn zeros(vocab: usize, dim: usize, trainable: bool) -> Self {
        EmbeddingTable { weights: Tensor::zeros(vec![vocab, dim]), trainable }
    }

    /// Entries uniform in `±0.05`.
    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, trainable: bool, rng: &mut R) -> Self {
        let data = (0..vocab * dim).map(|_| rng.random_range(-0.05..0.05)).collect();
        EmbeddingTable { weights: Tensor::matrix(vocab, dim, data).expect("finite"), trainable }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, id: usize) -> Option<&[f64]> {
        (id < self.vocab_size()).then(|| self.weights.row(id))
    }
}

/// CBOW-trained cluster vectors. Clusters absent from the corpus embed to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneEmbedding {
    pub table: EmbeddingTable,
    pub present: Vec<bool>,
}

impl ZoneEmbedding {
    pub fn lookup(&self, id: usize) -> Vec<f64> {
        match self.table.row(id) {
            Some(r) if self.present[id] => r.to_vec(),
            _ => vec![0.0; self.table.dim()],
        }
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbowParams {
    pub dim: usize,
    pub window: usize,
    pub negative: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CbowParams {
    fn default() -> Self {
        CbowParams { dim: ZONE_DIM, window: 5, negative: 5, epochs: 5, lr: 0.025, seed: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct CbowResult {
    pub embedding: ZoneEmbedding,
    /// Mean negative-sampling loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// CBOW with negative sampling over token sentences (cluster traces).
///
/// Every token counts (no frequency cutoff). Per position the effective
/// window is drawn uniformly from `1..=window`; the context mean predicts the
/// centre token against `negative` noise tokens drawn from the unigram
/// distribution raised to 0.75. The learning rate decays linearly to
/// `lr * 1e-4`.
pub fn train_cbow(corpus: &[Vec<usize>], vocab: usize, params: &CbowParams) -> Result<CbowResult, FeatureError> {
    let total_tokens: usize = corpus.iter().map(Vec::len).sum();
    if total_tokens == 0 {
        return Err(FeatureError::EmptyCorpus);
    }
    let mut counts = vec![0u64; vocab];
    for &t in corpus.iter().flatten() {
        if t >= vocab {
            return Err(FeatureError::TokenOutOfRange { token: t, vocab });
        }
        counts[t] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(FeatureError::SingleToken);
    }

    let mut cumulative = Vec::with_capacity(vocab);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }
    let draw_negative = |rng: &mut ChaCha8Rng| {
        let x = rng.random::<f64>() * acc;
        cumulative.partition_point(|&c| c <= x).min(vocab - 1)
    };

    let dim = params.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let half = 0.5 / dim as f64;
    let mut syn0: Vec<f64> = (0..vocab * dim).map(|_| rng.random_range(-half..half)).collect();
    let mut syn1 = vec![0.0; vocab * dim];
    let mut hidden = vec![0.0; dim];
    let mut err = vec![0.0; dim];
    let window = params.window.max(1);
    let total_work = (params.epochs * total_tokens).max(1) as f64;
    let min_lr = params.lr * 1e-4;
    let mut processed = 0usize;
    let mut epoch_losses = Vec::with_capacity(params.epochs);

    for _ in 0..params.epochs {
        let (mut loss, mut pairs) = (0.0, 0usize);
        for sentence in corpus {
            for pos in 0..sentence.len() {
                let alpha = (params.lr * (1.0 - processed as f64 / total_work)).max(min_lr);
                processed += 1;
                let reach = rng.random_range(1..=window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(sentence.len() - 1);
                let context: Vec<usize> = (lo..=hi).filter(|&j| j != pos).map(|j| sentence[j]).collect();
                if context.is_empty() {
                    continue;
                }
                hidden.iter_mut().for_each(|h| *h = 0.0);
                for &c in &context {
                    for (h, w) in hidden.iter_mut().zip(&syn0[c * dim..(c + 1) * dim]) {
                        *h += w;
                    }
                }
                let inv = 1.0 / context.len() as f64;
                hidden.iter_mut().for_each(|h| *h *= inv);
                err.iter_mut().for_each(|e| *e = 0.0);

                let target = sentence[pos];
                for d in 0..=params.negative {
                    let (word, label) = if d == 0 {
                        (target, 1.0)
                    } else {
                        let w = draw_negative(&mut rng);
                        if w == target {
                            continue;
                        }
                        (w, 0.0)
                    };
                    let out = &mut syn1[word * dim..(word + 1) * dim];
                    let score: f64 = hidden.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                    let f = sigmoid(score);
                    loss -= if label > 0.5 { f.max(1e-12).ln() } else { (1.0 - f).max(1e-12).ln() };
                    pairs += 1;
                    let gsc = (label - f) * alpha;
                    for ((e, o), h) in err.iter_mut().zip(out.iter_mut()).zip(&hidden) {
                        *e += gsc * *o;
                        *o += gsc * h;
                    }
                }
                for &c in &context {
                    for (w, e) in syn0[c * dim..(c + 1) * dim].iter_mut().zip(&err) {
                        *w += e;
                    }
                }
            }
        }
        epoch_losses.push(if pairs > 0 { loss / pairs as f64 } else { 0.0 });
    }

    let present: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    for (id, p) in present.iter().enumerate() {
        if !p {
            syn0[id * dim..(id + 1) * dim].iter_mut().for_each(|w| *w = 0.0);
        }
    }
    let table = EmbeddingTable { weights: Tensor::matrix(vocab, dim, syn0).expect("finite"), trainable: false };
    Ok(CbowResult { embedding: ZoneEmbedding { table, present }, epoch_losses })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ---------------------------------------------------------------------------
// categorical features

/// Driver id → embedding row. Row 0 is shared by drivers unseen in training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DriverVocab {
    ids: BTreeMap<String, usize>,
}

impl DriverVocab {
    pub fn fit<'a>(drivers: impl IntoIterator<Item = &'a str>) -> Self {
        let mut ids = BTreeMap::new();
        for d in drivers {
            ids.entry(d.to_string()).or_insert(0);
        }
        for (i, v) in ids.values_mut().enumerate() {
            *v = i + 1;
        }
        DriverVocab { ids }
    }

    pub fn index(&self, driver: &str) -> usize {
        self.ids.get(driver).copied().unwrap_or(0)
    }

    /// Known drivers plus the unknown row.
    pub fn size(&self) -> usize {
        self.ids.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalTables {
    pub hour: EmbeddingTable,
    pub weekday: EmbeddingTable,
    pub day_type: EmbeddingTable,
    pub driver: EmbeddingTable,
}

impl CategoricalTables {
    pub fn random<R: Rng + ?Sized>(n_drivers: usize, rng: &mut R) -> Self {
        CategoricalTables {
            hour: EmbeddingTable::random(24, CAT_DIM, true, rng),
            weekday: EmbeddingTable::random(7, CAT_DIM, true, rng),
            day_type: EmbeddingTable::random(3, CAT_DIM, true, rng),
            driver: EmbeddingTable::random(n_drivers, CAT_DIM, true, rng),
        }
    }

    pub fn zeros(n_drivers: usize) -> Self {
        CategoricalTables {
            hour: EmbeddingTable::zeros(24, CAT_DIM, true),
            weekday: EmbeddingTable::zeros(7, CAT_DIM, true),
            day_type: EmbeddingTable::zeros(3, CAT_DIM, true),
            driver: EmbeddingTable::zeros(n_drivers, CAT_DIM, true),
        }
    }

    pub fn check(&self) -> Result<(), FeatureError> {
        let expect = |name: &'static str, t: &EmbeddingTable, rows: Option<usize>| {
            if t.dim() != CAT_DIM || rows.is_some_and(|r| r != t.vocab_size()) || t.vocab_size() == 0 {
                return Err(FeatureError::Table {
                    name,
                    detail: format!("shape {:?}", t.weights.shape()),
                });
            }
            Ok(())
        };
        expect("hour", &self.hour, Some(24))?;
        expect("weekday", &self.weekday, Some(7))?;
        expect("day_type", &self.day_type, Some(3))?;
        expect("driver", &self.driver, None)
    }
}

/// Categorical indices and constant inputs of one sample, one entry per
/// valid step. The graph-side model looks embeddings up from these.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    pub zones: Vec<usize>,
    pub boc: Vec<[f64; BOC_DIM]>,
    pub hours: Vec<usize>,
    pub weekdays: Vec<usize>,
    pub day_types: Vec<usize>,
    pub driver: usize,
}

impl StepInputs {
    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }
}

pub fn step_inputs(
    seq: &DriverSequence,
    trace: &ClusterTrace,
    boc: Option<&BocMap>,
    drivers: &DriverVocab,
) -> Result<StepInputs, FeatureError> {
    if trace.len() != seq.len() || seq.step_meta.len() != seq.len() {
        return Err(FeatureError::TraceMismatch { trace: trace.len(), seq: seq.len() });
    }
    let zones = trace.ids().to_vec();
    let boc = zones
        .iter()
        .map(|&z| boc.map(|b| b.get(z).log_scaled()).unwrap_or([0.0; BOC_DIM]))
        .collect();
    Ok(StepInputs {
        zones,
        boc,
        hours: seq.step_meta.iter().map(|m| m.hour as usize).collect(),
        weekdays: seq.step_meta.iter().map(|m| m.weekday as usize).collect(),
        day_types: seq.step_meta.iter().map(|m| m.day_type as usize).collect(),
        driver: drivers.index(&seq.driver_id),
    })
}

/// Left-padded `[max_steps, STEP_WIDTH]` inputs with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl FeatureTensor {
    pub fn valid_steps(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Zone lookups used during assembly: a frozen CBOW table or a plain
/// (trainable) table.
#[derive(Debug, Clone, Copy)]
pub enum ZoneSource<'a> {
    Cbow(&'a ZoneEmbedding),
    Table(&'a EmbeddingTable),
}

impl ZoneSource<'_> {
    fn lookup(&self, id: usize) -> Vec<f64> {
        match self {
            ZoneSource::Cbow(z) => z.lookup(id),
            ZoneSource::Table(t) => t.row(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.dim()]),
        }
    }
}

/// Concatenates, per step, zone ⊕ log-BOC ⊕ hour ⊕ weekday ⊕ day type ⊕
/// driver embeddings and left-pads to `max_steps`.
pub fn assemble(
    seq: &DriverSequence,
    trace: &ClusterTrace,
    zone: ZoneSource<'_>,
    boc: Option<&BocMap>,
    tables: &CategoricalTables,
    drivers: &DriverVocab,
    max_steps: usize,
) -> Result<FeatureTensor, FeatureError> {
    tables.check()?;
    let inputs = step_inputs(seq, trace, boc, drivers)?;
    let n = inputs.len();
    if n > max_steps {
        return Err(FeatureError::TooLong { len: n, max: max_steps });
    }
    let mut values = Tensor::zeros(vec![max_steps, STEP_WIDTH]);
    let mut mask = vec![false; max_steps];
    let pad = max_steps - n;
    let cat = |t: &EmbeddingTable, id: usize| t.row(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; CAT_DIM]);
    for s in 0..n {
        let mut row: Vec<f64> = Vec::with_capacity(STEP_WIDTH);
        let z = zone.lookup(inputs.zones[s]);
        if z.len() != ZONE_DIM {
            return Err(FeatureError::Table { name: "zone", detail: format!("dimension {}", z.len()) });
        }
        row.extend(z);
        row.extend(inputs.boc[s]);
        row.extend(cat(&tables.hour, inputs.hours[s]));
        row.extend(cat(&tables.weekday, inputs.weekdays[s]));
        row.extend(cat(&tables.day_type, inputs.day_types[s]));
        row.extend(cat(&tables.driver, inputs.driver));
        values.row_mut(pad + s).copy_from_slice(&row);
        mask[pad + s] = true;
    }
    Ok(FeatureTensor { values, mask })
}
