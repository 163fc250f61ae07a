//! The `hose` command line: stats, cluster, train, eval, synth and
//! export-hierarchy.
//!
//! Every command writes `<command>.manifest.json` next to its outputs. All
//! fields except `timing` depend only on the inputs and the configuration.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_rational::BigRational;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{read_corpus, read_features, read_json, read_jsonl, read_vocab, write_json, write_jsonl, RelationVocab};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, ConstraintMode, EvalConfig, ImagePredictions, Task};
use crate::hsa::{export_hierarchy, hsa_cluster, parse_hierarchy, ContextDictionary, HierarchyFormat, HsaOptions, SimilarityUpdate};
use crate::kg::{build_kg, CooccurrenceModel, CooccurrenceUnit};
use crate::scalar::Similarity;
use crate::sec::{
    build_frequency_bias, Activation, AdjacencyMode, Checkpoint, ScoreFusion, SecConfig, SecHead, SecModel,
    DEFAULT_BIAS_EPSILON,
};
use crate::synth::{generate, SynthConfig, SynthMode};
use crate::train::{train, BranchWeights, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "hose", version, about = "Knowledge-graph clustering and structured relation classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Co-occurrence counts and conditional probabilities of a corpus.
    Stats(StatsArgs),
    /// Cluster object classes into K contexts.
    Cluster(ClusterArgs),
    /// Train a relation head.
    Train(TrainArgs),
    /// Recall@K of a checkpoint or of a prediction file.
    Eval(EvalArgs),
    /// Generate a synthetic corpus with planted clusters.
    Synth(SynthArgs),
    /// Convert a merge hierarchy between nested JSON and Newick.
    ExportHierarchy(ExportArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub unit: Option<CooccurrenceUnit>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Arithmetic {
    /// Arbitrary-precision rationals.
    #[default]
    Exact,
    Float,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of contexts.
    #[arg(short = 'k', long = "k")]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub update: Option<SimilarityUpdate>,
    #[arg(long, value_enum)]
    pub arithmetic: Option<Arithmetic>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub dictionary: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_structured: Option<f64>,
    #[arg(long)]
    pub lr_unstructured: Option<f64>,
    /// Loss weight of the flat branch; the structured branch gets the rest.
    #[arg(long)]
    pub flat_weight: Option<f64>,
    #[arg(long)]
    pub negative_ratio: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub relation_dim: Option<usize>,
    #[arg(long)]
    pub spatial_dim: Option<usize>,
    #[arg(long)]
    pub gcn_layers: Option<usize>,
    #[arg(long)]
    pub gcn_hidden: Option<usize>,
    #[arg(long, value_enum)]
    pub activation: Option<Activation>,
    #[arg(long, value_enum)]
    pub adjacency: Option<AdjacencyMode>,
    #[arg(long, value_enum)]
    pub unit: Option<CooccurrenceUnit>,
    #[arg(long)]
    pub bias_epsilon: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Structured,
    Flat,
    /// 0.7 flat + 0.3 structured.
    Weighted,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Externally produced predictions; required for sgcls and sgdet.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long, value_enum)]
    pub mode: Option<ConstraintMode>,
    /// Recall cutoffs; repeat for several.
    #[arg(long = "k")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub per_pair_cap: Option<usize>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Skip the frequency-bias table.
    #[arg(long)]
    pub no_bias: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub predicates: Option<usize>,
    #[arg(long)]
    pub train_images: Option<usize>,
    #[arg(long)]
    pub test_images: Option<usize>,
    #[arg(long)]
    pub exponent: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<SynthModeArg>,
    #[arg(long)]
    pub copies: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthModeArg {
    Sampled,
    ExactPatterns,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Input format; guessed from the extension when omitted (`.nwk` is Newick).
    #[arg(long, value_enum)]
    pub from: Option<HierarchyFormat>,
    #[arg(long, value_enum)]
    pub to: HierarchyFormat,
    #[arg(long, value_enum, default_value = "exact")]
    pub arithmetic: Arithmetic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    #[serde(default)]
    pub unit: CooccurrenceUnit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub update: SimilarityUpdate,
    #[serde(default)]
    pub arithmetic: Arithmetic,
}

/// Architecture options of the head; `K`, `R` and `d_f` come from the inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    pub embedding_dim: usize,
    pub relation_dim: usize,
    pub spatial_dim: usize,
    pub gcn_layers: usize,
    #[serde(default)]
    pub gcn_hidden: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub adjacency: AdjacencyMode,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let c = SecConfig::new(1, 1);
        ModelOptions {
            embedding_dim: c.embedding_dim,
            relation_dim: c.relation_dim,
            spatial_dim: c.spatial_dim,
            gcn_layers: c.gcn_layers,
            gcn_hidden: c.gcn_hidden,
            activation: c.activation,
            adjacency: c.adjacency,
        }
    }
}

fn default_bias_epsilon() -> f64 {
    DEFAULT_BIAS_EPSILON
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub unit: CooccurrenceUnit,
    #[serde(default = "default_bias_epsilon")]
    pub bias_epsilon: f64,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        TrainCommandConfig {
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            unit: CooccurrenceUnit::default(),
            bias_epsilon: DEFAULT_BIAS_EPSILON,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCommandConfig {
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub fusion: ScoreFusion,
    #[serde(default = "default_true")]
    pub use_bias: bool,
}

impl Default for EvalCommandConfig {
    fn default() -> Self {
        EvalCommandConfig { eval: EvalConfig::default(), fusion: ScoreFusion::default(), use_bias: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_seconds: f64,
}

/// Provenance record written by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// The only field allowed to differ between identical runs.
    pub timing: Timing,
}

struct Run {
    command: &'static str,
    started: Instant,
    seed: Option<u64>,
    config: Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run {
            command,
            started: Instant::now(),
            seed: None,
            config: Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }

    // Outputs are recorded relative to the output directory so reruns elsewhere compare equal.
    fn output(&mut self, path: &Path) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
        self.outputs.push(name.unwrap_or_else(|| path.display().to_string()));
    }

    fn config<C: Serialize>(&mut self, config: &C) -> Result<()> {
        self.config = serde_json::to_value(config).map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        write_json(&path, value)?;
        self.output(&path);
        Ok(())
    }

    fn write_text(&mut self, path: PathBuf, text: &str) -> Result<()> {
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.output(&path);
        Ok(())
    }

    fn write_jsonl<'a, T: Serialize + 'a>(&mut self, path: PathBuf, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
        write_jsonl(&path, items)?;
        self.output(&path);
        Ok(())
    }

    fn finish(self, dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.into(),
            tool_version: TOOL_VERSION.into(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            timing: Timing { wall_time_seconds: self.started.elapsed().as_secs_f64() },
        };
        write_json(&dir.join(format!("{}.manifest.json", self.command)), &manifest)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        Some(p) => read_json(p).map_err(|e| Error::config(format!("config file: {e}"))),
        None => Ok(C::default()),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let mut run = Run::new("stats");
    let mut config: StatsConfig = load_config(args.config.as_deref())?;
    set(&mut config.unit, args.unit);
    run.config(&config)?;
    run.input("corpus", &args.corpus);
    run.input("vocab", &args.vocab);
    let vocab = read_vocab(&args.vocab)?;
    let corpus = read_corpus(&args.corpus)?;
    let model = CooccurrenceModel::<f64>::fit(&corpus, &vocab, config.unit)?;
    create_dir(&args.out)?;
    run.write_json(args.out.join("cooccurrence_counts.json"), &model.counts)?;
    #[derive(Serialize)]
    struct Probabilities<'a> {
        n: usize,
        rows: &'a [Vec<f64>],
    }
    let prob = Probabilities { n: model.counts.n, rows: &model.prob };
    run.write_json(args.out.join("conditional_probability.json"), &prob)?;
    run.finish(&args.out)
}

fn cluster_outputs<S: Similarity>(
    vocab: &RelationVocab,
    kg: &crate::kg::KnowledgeGraph,
    k: usize,
    update: SimilarityUpdate,
) -> Result<(ContextDictionary, String, String)> {
    let clustering = hsa_cluster::<S>(kg, k, HsaOptions { update })?;
    let names = vocab.class_names.as_deref();
    Ok((
        clustering.dictionary,
        export_hierarchy(&clustering.tree, HierarchyFormat::NestedJson, names),
        export_hierarchy(&clustering.tree, HierarchyFormat::Newick, names),
    ))
}

fn cmd_cluster(args: ClusterArgs) -> Result<()> {
    let mut run = Run::new("cluster");
    let mut config: ClusterConfig = load_config(args.config.as_deref())?;
    if args.k.is_some() {
        config.k = args.k;
    }
    set(&mut config.update, args.update);
    set(&mut config.arithmetic, args.arithmetic);
    let k = config.k.ok_or_else(|| Error::config("the number of clusters K is required (--k or config \"k\")"))?;
    run.config(&config)?;
    run.input("corpus", &args.corpus);
    run.input("vocab", &args.vocab);
    let vocab = read_vocab(&args.vocab)?;
    let corpus = read_corpus(&args.corpus)?;
    let kg = build_kg(&corpus, &vocab)?;
    let (dictionary, json, newick) = match config.arithmetic {
        Arithmetic::Exact => cluster_outputs::<BigRational>(&vocab, &kg, k, config.update)?,
        Arithmetic::Float => cluster_outputs::<f64>(&vocab, &kg, k, config.update)?,
    };
    create_dir(&args.out)?;
    run.write_json(args.out.join("dictionary.json"), &dictionary)?;
    run.write_text(args.out.join("hierarchy.json"), &json)?;
    run.write_text(args.out.join("hierarchy.nwk"), &newick)?;
    run.finish(&args.out)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run = Run::new("train");
    let mut config: TrainCommandConfig = load_config(args.config.as_deref())?;
    let t = &mut config.train;
    set(&mut t.seed, args.seed);
    set(&mut t.epochs, args.epochs);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.lr_structured, args.lr_structured);
    set(&mut t.lr_unstructured, args.lr_unstructured);
    set(&mut t.negative_pair_ratio, args.negative_ratio);
    set(&mut t.momentum, args.momentum);
    if let Some(w) = args.flat_weight {
        t.branch_weights = BranchWeights { flat: w, structured: 1.0 - w };
    }
    let m = &mut config.model;
    set(&mut m.embedding_dim, args.embedding_dim);
    set(&mut m.relation_dim, args.relation_dim);
    set(&mut m.spatial_dim, args.spatial_dim);
    set(&mut m.gcn_layers, args.gcn_layers);
    if args.gcn_hidden.is_some() {
        m.gcn_hidden = args.gcn_hidden;
    }
    set(&mut m.activation, args.activation);
    set(&mut m.adjacency, args.adjacency);
    set(&mut config.unit, args.unit);
    set(&mut config.bias_epsilon, args.bias_epsilon);
    config.train.validate()?;
    run.config(&config)?;
    run.seed = Some(config.train.seed);
    for (name, path) in [
        ("corpus", &args.corpus),
        ("features", &args.features),
        ("vocab", &args.vocab),
        ("dictionary", &args.dictionary),
    ] {
        run.input(name, path);
    }

    let vocab = read_vocab(&args.vocab)?;
    let corpus = read_corpus(&args.corpus)?;
    let features = read_features(&args.features)?;
    let dictionary: ContextDictionary = read_json(&args.dictionary)?;
    if dictionary.num_classes() != vocab.num_object_classes {
        return Err(Error::config(format!(
            "dictionary covers {} classes but the vocabulary has {}",
            dictionary.num_classes(),
            vocab.num_object_classes
        )));
    }
    let m = &config.model;
    let sec = SecConfig {
        feature_dim: features.dim,
        embedding_dim: m.embedding_dim,
        relation_dim: m.relation_dim,
        spatial_dim: m.spatial_dim,
        num_contexts: dictionary.k(),
        num_predicates: vocab.num_predicates,
        gcn_layers: m.gcn_layers,
        gcn_hidden: m.gcn_hidden,
        activation: m.activation,
        adjacency: m.adjacency,
    };
    let cooccurrence = CooccurrenceModel::<f64>::fit(&corpus, &vocab, config.unit)?;
    let bias = build_frequency_bias(&corpus, &vocab, config.bias_epsilon)?;
    let head = SecHead::init(sec, config.train.seed)?;
    let mut model = SecModel::new(head, dictionary, &cooccurrence, bias)?;
    let log = train(&mut model, &corpus, &features, &config.train)?;
    create_dir(&args.out)?;
    run.write_json(args.out.join("checkpoint.json"), &model.to_checkpoint())?;
    run.write_jsonl(args.out.join("train_log.jsonl"), &log)?;
    run.finish(&args.out)
}

#[derive(Serialize)]
struct Metrics {
    task: Task,
    mode: ConstraintMode,
    recall: BTreeMap<usize, f64>,
    images_evaluated: usize,
    images_skipped_empty_gt: usize,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut run = Run::new("eval");
    let mut config: EvalCommandConfig = load_config(args.config.as_deref())?;
    let e = &mut config.eval;
    set(&mut e.task, args.task);
    set(&mut e.mode, args.mode);
    if !args.ks.is_empty() {
        e.ks = args.ks.clone();
    }
    set(&mut e.iou_threshold, args.iou_threshold);
    if args.per_pair_cap.is_some() {
        e.per_pair_cap = args.per_pair_cap;
    }
    if let Some(f) = args.fusion {
        config.fusion = match f {
            FusionArg::Structured => ScoreFusion::Structured,
            FusionArg::Flat => ScoreFusion::Flat,
            FusionArg::Weighted => ScoreFusion::Weighted { flat: 0.7, structured: 0.3 },
        };
    }
    if args.no_bias {
        config.use_bias = false;
    }
    config.eval.validate()?;
    if config.eval.per_pair_cap.is_some() && config.eval.mode == ConstraintMode::GraphConstraint {
        return Err(Error::config("a per-pair cap only applies without the graph constraint"));
    }
    run.config(&config)?;
    run.input("corpus", &args.corpus);
    let corpus = read_corpus(&args.corpus)?;
    create_dir(&args.out)?;

    let predictions: Vec<ImagePredictions> = match (&args.predictions, &args.checkpoint) {
        (Some(path), None) => {
            run.input("predictions", path);
            read_jsonl(path)?
        }
        (None, Some(ck_path)) => {
            if config.eval.task != Task::Prdcls {
                return Err(Error::config("sgcls and sgdet need externally supplied --predictions"));
            }
            let features_path = args
                .features
                .as_ref()
                .ok_or_else(|| Error::config("--checkpoint needs --features"))?;
            run.input("checkpoint", ck_path);
            run.input("features", features_path);
            let checkpoint: Checkpoint = read_json(ck_path)?;
            let model = SecModel::<f64>::from_checkpoint(&checkpoint)?;
            run.seed = Some(checkpoint.seed);
            let features = read_features(features_path)?;
            let preds = corpus
                .iter()
                .map(|s| {
                    let f = features
                        .get(&s.image_id)
                        .ok_or_else(|| Error::lookup(format!("no features for image {}", s.image_id)))?;
                    model.predict(s, f, config.fusion, config.use_bias)
                })
                .collect::<Result<Vec<_>>>()?;
            run.write_jsonl(args.out.join("predictions.jsonl"), &preds)?;
            preds
        }
        _ => return Err(Error::config("give exactly one of --checkpoint or --predictions")),
    };
    let report = recall_at_k(&predictions, &corpus, &config.eval)?;
    let metrics = Metrics {
        task: report.task,
        mode: report.mode,
        recall: report.recall.clone(),
        images_evaluated: report.images_evaluated,
        images_skipped_empty_gt: report.images_skipped,
    };
    run.write_json(args.out.join("metrics.json"), &metrics)?;
    run.finish(&args.out)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut run = Run::new("synth");
    let mut config: SynthConfig = load_config(args.config.as_deref())?;
    set(&mut config.seed, args.seed);
    set(&mut config.num_classes, args.classes);
    set(&mut config.num_clusters, args.clusters);
    set(&mut config.num_predicates, args.predicates);
    set(&mut config.train_images, args.train_images);
    set(&mut config.test_images, args.test_images);
    set(&mut config.long_tail_exponent, args.exponent);
    set(&mut config.feature_dim, args.feature_dim);
    set(&mut config.noise, args.noise);
    set(&mut config.copies, args.copies);
    if let Some(mode) = args.mode {
        config.mode = match mode {
            SynthModeArg::Sampled => SynthMode::Sampled,
            SynthModeArg::ExactPatterns => SynthMode::ExactPatterns,
        };
    }
    run.config(&config)?;
    run.seed = Some(config.seed);
    let corpus = generate(&config).map_err(|e| match e {
        Error::Input(m) => Error::config(m),
        other => other,
    })?;
    create_dir(&args.out)?;
    let o = &args.out;
    run.write_json(o.join("vocab.json"), &corpus.vocab)?;
    run.write_jsonl(o.join("train.jsonl"), &corpus.train)?;
    run.write_jsonl(o.join("train_features.jsonl"), corpus.train_features.records())?;
    run.write_jsonl(o.join("test.jsonl"), &corpus.test)?;
    run.write_jsonl(o.join("test_features.jsonl"), corpus.test_features.records())?;
    run.write_json(o.join("ground_truth.json"), &corpus.ground_truth)?;
    run.finish(o)
}

fn convert<S: Similarity>(text: &str, from: HierarchyFormat, to: HierarchyFormat) -> Result<String> {
    let (tree, names) = parse_hierarchy::<S>(text, from)?;
    Ok(export_hierarchy(&tree, to, names.as_deref()))
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let mut run = Run::new("export-hierarchy");
    let from = args.from.unwrap_or(match args.input.extension().and_then(|e| e.to_str()) {
        Some("nwk") | Some("newick") => HierarchyFormat::Newick,
        _ => HierarchyFormat::NestedJson,
    });
    let label = |f: HierarchyFormat| f.to_possible_value().map(|v| v.get_name().to_string());
    run.config(&serde_json::json!({
        "from": label(from),
        "to": label(args.to),
        "arithmetic": args.arithmetic,
    }))?;
    run.input("input", &args.input);
    let text = fs::read_to_string(&args.input).map_err(|e| Error::io(args.input.display().to_string(), e))?;
    let out = match args.arithmetic {
        Arithmetic::Exact => convert::<BigRational>(&text, from, args.to)?,
        Arithmetic::Float => convert::<f64>(&text, from, args.to)?,
    };
    let dir = match args.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_dir(&dir)?;
    run.write_text(args.out.clone(), &out)?;
    run.finish(&dir)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats(a) => cmd_stats(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ExportHierarchy(a) => cmd_export(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
