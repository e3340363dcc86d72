//! `nextdrop` command line: the pipeline as resumable stages sharing one
//! output directory, plus `run` for everything at once.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nextdrop::clustering::ClusterModel;
use nextdrop::experiment::{
    fit_boc, fit_cbow, fit_clusters, fit_drivers, histogram_csv, merge_results, prepare, read_dump_eds, results_csv,
    run, split, summary_table, train_model, Artifacts, Evaluation, ExperimentError, ExperimentSpec, ModelKind, ResultRow, Splits,
    Trained, VariantKey,
};
use nextdrop::features::ZoneEmbedding;
use nextdrop::ingest::{load_sequences, write_sequences, DriverSequence};
use nextdrop::model::SavedModel;

const SEQUENCES: &str = "sequences.jsonl";
const CLUSTERS: &str = "clusters.txt";
const CBOW: &str = "cbow.json";
const BOC: &str = "boc.csv";
const CHECKPOINT: &str = "checkpoint.json";
const RESULTS: &str = "results.csv";

#[derive(Parser)]
#[command(name = "nextdrop", version, about = "Next taxi drop-off prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw trips and write driver sequences as JSON lines.
    Prepare(SpecArgs),
    /// Fit K-means on the drop-offs of the training split.
    Cluster(SpecArgs),
    /// Train CBOW zone embeddings and, if a POI file is set, BOC vectors.
    Embed(SpecArgs),
    /// Train every configured model and write its checkpoint.
    Train(SpecArgs),
    /// Score the checkpoints on the test split.
    Evaluate(SpecArgs),
    /// Merge result files into one summary and write EDS histograms.
    Report(ReportArgs),
    /// All stages in one go.
    Run(SpecArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Raw trip file (key `trips`).
    #[arg(long)]
    trips: Option<String>,
    /// `polyline_csv` or `od_csv` (key `format`).
    #[arg(long)]
    format: Option<String>,
    /// POI file (key `pois`).
    #[arg(long)]
    pois: Option<String>,
    /// Output directory shared by all stages (key `output_dir`).
    #[arg(short, long)]
    out: Option<String>,
    /// Comma-separated model list, e.g. `nn,lstm_boc_w2v:classification` (key `models`).
    #[arg(long)]
    models: Option<String>,
    /// Number of destination clusters (key `k_clusters`).
    #[arg(short = 'k', long)]
    k_clusters: Option<String>,
    /// Training seed (key `seed`).
    #[arg(long)]
    seed: Option<String>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSV files to merge.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Directory for `summary.csv` and `histograms.csv`.
    #[arg(short, long, default_value = "report")]
    out: PathBuf,
}

enum CliError {
    /// An earlier stage has not produced its output yet.
    Stage { stage: &'static str, missing: PathBuf },
    Failed(String),
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Failed(e.to_string())
    }
}

macro_rules! fail {
    ($e:expr) => {
        $e.map_err(|e| CliError::Failed(e.to_string()))
    };
}

impl SpecArgs {
    fn spec(&self) -> Result<ExperimentSpec, CliError> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::default(),
        };
        let flags = [
            ("trips", &self.trips),
            ("format", &self.format),
            ("pois", &self.pois),
            ("output_dir", &self.out),
            ("models", &self.models),
            ("k_clusters", &self.k_clusters),
            ("seed", &self.seed),
        ];
        let mut overrides: Vec<(String, String)> =
            flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect();
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Failed(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        // flags are relative to where the command runs, not to the config file
        for (k, v) in overrides {
            spec.set(&k, &v, Path::new(".")).map_err(|e| CliError::Failed(format!("--{k}: {e}")))?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Stage { stage, missing: path })
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fail!(std::fs::create_dir_all(dir))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn splits(spec: &ExperimentSpec) -> Result<Splits, CliError> {
    let path = require(spec.output_dir.join(SEQUENCES), "prepare")?;
    let seqs = fail!(load_sequences(&path))?;
    Ok(split(&seqs, spec.fractions, spec.split_seed)?)
}

fn load_clusters(spec: &ExperimentSpec) -> Result<ClusterModel, CliError> {
    fail!(ClusterModel::load(&require(spec.output_dir.join(CLUSTERS), "cluster")?))
}

/// Artifacts as saved by `cluster` and `embed`; those a model list does not
/// need may be absent.
fn load_artifacts(spec: &ExperimentSpec, train: &[DriverSequence]) -> Result<Artifacts, CliError> {
    let clusters = load_clusters(spec)?;
    let needs_cbow = spec.models.iter().any(|m| matches!(m, ModelKind::Lstm(VariantKey::LstmBocW2v, _)));
    let needs_boc = spec.models.iter().any(ModelKind::needs_pois);
    let cbow = if needs_cbow {
        let text = fail!(std::fs::read_to_string(require(spec.output_dir.join(CBOW), "embed")?))?;
        Some(fail!(serde_json::from_str::<ZoneEmbedding>(&text))?)
    } else {
        None
    };
    let boc = match (&spec.pois, needs_boc) {
        (Some(p), true) => Some(fit_boc(&clusters, p)?),
        _ => None,
    };
    Ok(Artifacts { clusters, boc, cbow, drivers: fit_drivers(train) })
}

fn cmd_prepare(spec: &ExperimentSpec) -> Result<(), CliError> {
    let (seqs, rejected) = prepare(spec)?;
    let path = spec.output_dir.join(SEQUENCES);
    fail!(std::fs::create_dir_all(&spec.output_dir))?;
    let file = fail!(File::create(&path))?;
    fail!(write_sequences(BufWriter::new(file), &seqs))?;
    println!("{} sequences ({rejected} rejected rows) -> {}", seqs.len(), path.display());
    Ok(())
}

fn cmd_cluster(spec: &ExperimentSpec) -> Result<(), CliError> {
    let s = splits(spec)?;
    let model = fit_clusters(&s.train, spec)?;
    let path = spec.output_dir.join(CLUSTERS);
    fail!(model.save(&path))?;
    println!("{} clusters, inertia {:.3} km² -> {}", model.len(), model.inertia, path.display());
    Ok(())
}

fn cmd_embed(spec: &ExperimentSpec) -> Result<(), CliError> {
    let s = splits(spec)?;
    let clusters = load_clusters(spec)?;
    let emb = fit_cbow(&clusters, &s.train, spec)?;
    let path = spec.output_dir.join(CBOW);
    write(&path, &fail!(serde_json::to_string(&emb))?)?;
    println!("{}-d zone embeddings for {} clusters -> {}", emb.dim(), clusters.len(), path.display());
    if let Some(p) = &spec.pois {
        let boc = fit_boc(&clusters, p)?;
        write(&spec.output_dir.join(BOC), &boc.to_csv())?;
    }
    Ok(())
}

fn cmd_train(spec: &ExperimentSpec) -> Result<(), CliError> {
    let s = splits(spec)?;
    let art = load_artifacts(spec, &s.train)?;
    for kind in &spec.models {
        let name = kind.name();
        match train_model(*kind, spec, &art, &s)? {
            Trained::Nn(_) => println!("{name}: nothing to train"),
            Trained::Saved(m) => {
                let path = spec.output_dir.join(&name).join(CHECKPOINT);
                fail!(std::fs::create_dir_all(path.parent().unwrap()))?;
                let digest = fail!(m.save(&path))?;
                println!("{name}: checkpoint {} (sha256 {digest})", path.display());
            }
        }
    }
    Ok(())
}

fn cmd_evaluate(spec: &ExperimentSpec) -> Result<(), CliError> {
    let s = splits(spec)?;
    let mut rows = Vec::new();
    for kind in &spec.models {
        let name = kind.name();
        let trained = match kind {
            ModelKind::Nn => Trained::Nn(load_clusters(spec)?),
            _ => Trained::Saved(fail!(SavedModel::load(&require(spec.output_dir.join(&name).join(CHECKPOINT), "train")?))?),
        };
        let eval = Evaluation::new(&s.test, trained.predict_all(&s.test)?)?;
        write(&spec.output_dir.join(&name).join("eds.csv"), &eval.dump_csv())?;
        rows.push(ResultRow {
            model: name,
            city: spec.city.clone(),
            mean_eds_km: eval.mean(),
            median_eds_km: eval.median(),
            n_test: eval.eds.len(),
            seed: spec.seed,
            wall_s: 0.0,
        });
    }
    write(&spec.output_dir.join(RESULTS), &results_csv(&rows))?;
    print!("{}", summary_table(&rows));
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    for f in &args.results {
        require(f.clone(), "evaluate")?;
    }
    let rows = merge_results(&args.results)?;
    write(&args.out.join("summary.csv"), &results_csv(&rows))?;
    // per-sample dumps live next to each results file, one directory per model
    let mut hist = String::from("model,bin_lo_km,bin_hi_km,count\n");
    let mut seen = BTreeMap::new();
    for f in &args.results {
        let base = f.parent().unwrap_or(Path::new("."));
        for r in merge_results(std::slice::from_ref(f))? {
            let dump = base.join(&r.model).join("eds.csv");
            if dump.exists() {
                let label = format!("{}/{}", r.city, r.model);
                if seen.insert(label.clone(), ()).is_none() {
                    hist.push_str(&histogram_csv(&label, &read_dump_eds(&dump)?));
                }
            }
        }
    }
    write(&args.out.join("histograms.csv"), &hist)?;
    print!("{}", summary_table(&rows));
    Ok(())
}

fn cmd_run(spec: &ExperimentSpec) -> Result<(), CliError> {
    let out = run(spec)?;
    print!("{}", summary_table(&out.rows));
    for f in &out.failures {
        eprintln!("{}: failed: {}", f.model, f.error);
    }
    if out.rows.is_empty() {
        return Err(CliError::Failed("every model failed".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Report(a) => cmd_report(a),
        Command::Prepare(a) => a.spec().and_then(|s| cmd_prepare(&s)),
        Command::Cluster(a) => a.spec().and_then(|s| cmd_cluster(&s)),
        Command::Embed(a) => a.spec().and_then(|s| cmd_embed(&s)),
        Command::Train(a) => a.spec().and_then(|s| cmd_train(&s)),
        Command::Evaluate(a) => a.spec().and_then(|s| cmd_evaluate(&s)),
        Command::Run(a) => a.spec().and_then(|s| cmd_run(&s)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Stage { stage, missing }) => {
            eprintln!("error: {} not found; run `nextdrop {stage}` first", missing.display());
            ExitCode::from(2)
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
