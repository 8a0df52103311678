//! File-based pipeline stages over a work directory. Each stage reads the
//! previous stage's files and writes its own; re-running a stage with the
//! same inputs rewrites identical bytes under the mock backend.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::catalog::{Catalog, CatalogError};
use crate::config::{ConfigError, RunConfig};
use crate::fusion::{
    fuse_batch, read_knowledge, write_knowledge, BackendError, FusionCache, FusionConfig,
    KnowledgeDocument, DEFAULT_INPUT_CHAR_CAP,
};
use crate::instructions::{
    build_examples, default_tasks, export_dataset, sample_per_user, write_tasks, DatasetError,
    ExportSummary, InstructionExample, Split, TaskTemplate, UserInputs, Variant,
};
use crate::jsonl::{self, JsonlError};
use crate::metrics::{evaluate_variant, EvalError, EvalReport, Grouping};
use crate::prompt::{render_sequence, BehaviorText, TemplateRegistry};
use crate::recommender::{
    export_semantic_features, feature_names, features_csv, read_predictions, recommend_batch,
    write_predictions, RecommendError, UserContext,
};
use crate::store::{
    AnonymizationPolicy, BehaviorSequence, BehaviorStore, IngestSummary, StoreError,
};
use crate::synth::{generate_corpus, CorpusConfig, LabelRecord, SynthError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] JsonlError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Consistency(String),
}

impl PipelineError {
    /// 2 for consistency/validation problems, 3 when the model backend failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Backend(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Tuned model or the base model of the no-tuning comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelChoice {
    #[default]
    Tuned,
    Base,
}

/// A named inference run: `full`, `no_hkf`, `no_it`, `no_hkf_no_it`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunName {
    pub variant: Variant,
    pub model: ModelChoice,
}

impl fmt::Display for RunName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.variant, self.model) {
            (Variant::Full, ModelChoice::Tuned) => f.write_str("full"),
            (Variant::NoHkf, ModelChoice::Tuned) => f.write_str("no_hkf"),
            (Variant::Full, ModelChoice::Base) => f.write_str("no_it"),
            (Variant::NoHkf, ModelChoice::Base) => f.write_str("no_hkf_no_it"),
        }
    }
}

impl std::str::FromStr for RunName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (variant, model) = match s {
            "full" => (Variant::Full, ModelChoice::Tuned),
            "no_hkf" => (Variant::NoHkf, ModelChoice::Tuned),
            "no_it" => (Variant::Full, ModelChoice::Base),
            "no_hkf_no_it" => (Variant::NoHkf, ModelChoice::Base),
            other => return Err(format!("unknown run `{other}`")),
        };
        Ok(Self { variant, model })
    }
}

/// Layout of a work directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("synth/events.jsonl")
    }

    pub fn labels_path(&self) -> PathBuf {
        self.root.join("synth/labels.jsonl")
    }

    pub fn profiles_path(&self) -> PathBuf {
        self.root.join("synth/profiles.jsonl")
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.root.join("synth/catalog.json")
    }

    pub fn knowledge_path(&self) -> PathBuf {
        self.root.join("knowledge.jsonl")
    }

    pub fn fusion_cache_path(&self) -> PathBuf {
        self.root.join("cache/fusion.jsonl")
    }

    pub fn dataset_dir(&self, variant: Variant) -> PathBuf {
        self.root.join("dataset").join(variant.as_str())
    }

    pub fn examples_path(&self, variant: Variant) -> PathBuf {
        self.dataset_dir(variant).join("examples.jsonl")
    }

    pub fn eval_labels_path(&self, variant: Variant) -> PathBuf {
        self.dataset_dir(variant).join("eval_labels.jsonl")
    }

    pub fn tasks_path(&self, variant: Variant) -> PathBuf {
        self.dataset_dir(variant).join("tasks.jsonl")
    }

    pub fn predictions_path(&self, run: RunName) -> PathBuf {
        self.root.join("predictions").join(format!("{run}.jsonl"))
    }

    pub fn features_path(&self, run: RunName) -> PathBuf {
        self.root.join("features").join(format!("{run}.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn open_store(&self, cfg: &RunConfig) -> Result<BehaviorStore> {
        Ok(BehaviorStore::open(cfg.store_root(&self.root))?)
    }

    /// The catalog written by `synth`, or the built-in one.
    pub fn catalog(&self) -> Result<Catalog> {
        let path = self.catalog_path();
        if path.exists() {
            Ok(Catalog::load(&path)?)
        } else {
            Ok(Catalog::shared().clone())
        }
    }
}

fn log_run(stage: &str, cfg: &RunConfig) {
    log::info!("{stage}: config sha256 {} seed {}", cfg.digest(), cfg.seed);
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Consistency(format!(
            "{} not found; run `{produced_by}` first",
            path.display()
        )))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub users: usize,
    pub events: usize,
    pub labels: usize,
    pub events_sha256: String,
    pub labels_sha256: String,
    pub profiles_sha256: String,
}

pub fn synth(
    ws: &Workspace,
    cfg: &RunConfig,
    users: usize,
    seed: u64,
    noise_rate: f64,
) -> Result<SynthSummary> {
    log_run("synth", cfg);
    log::info!("synth: users {users} seed {seed} noise {noise_rate}");
    let corpus = generate_corpus(&CorpusConfig {
        users,
        seed,
        noise_rate,
        cutoff_timestamp: cfg.cutoff_timestamp,
        ..CorpusConfig::default()
    })?;
    let events = corpus.history_events();
    let labels = corpus.labels();
    let events_sha256 = jsonl::write_jsonl(&ws.events_path(), &events)?;
    let labels_sha256 = jsonl::write_jsonl(&ws.labels_path(), &labels)?;
    let profiles_sha256 = jsonl::write_jsonl(&ws.profiles_path(), &corpus.profiles)?;
    jsonl::write_file(&ws.catalog_path(), &Catalog::shared().to_json())?;
    Ok(SynthSummary {
        users,
        events: events.len(),
        labels: labels.len(),
        events_sha256,
        labels_sha256,
        profiles_sha256,
    })
}

pub fn ingest(
    ws: &Workspace,
    cfg: &RunConfig,
    events_path: Option<&Path>,
    policy: Option<&AnonymizationPolicy>,
) -> Result<IngestSummary> {
    log_run("ingest", cfg);
    let path = events_path.map_or_else(|| ws.events_path(), Path::to_path_buf);
    require(&path, "synth")?;
    let summary = ws.open_store(cfg)?.ingest_file_with(&path, policy)?;
    log::info!(
        "ingest: accepted {} rejected {} duplicates {}",
        summary.accepted,
        summary.rejected,
        summary.duplicates
    );
    Ok(summary)
}

/// Every stored user's capped sequence, in user order.
pub fn load_sequences(store: &BehaviorStore, cap: usize) -> Result<Vec<BehaviorSequence>> {
    store
        .list_users()?
        .iter()
        .map(|u| Ok(store.get_user_sequence(u, cap)?))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FuseSummary {
    pub documents: usize,
    pub cache_hits: usize,
    pub sha256: String,
}

pub fn fuse(ws: &Workspace, cfg: &RunConfig, registry: &TemplateRegistry) -> Result<FuseSummary> {
    log_run("fuse", cfg);
    let backend = cfg.backend.build()?;
    let store = ws.open_store(cfg)?;
    let inputs: Vec<(BehaviorText, BehaviorSequence)> = load_sequences(&store, cfg.sequence_cap)?
        .into_iter()
        .map(|seq| (render_sequence(&seq, registry), seq))
        .collect();
    if inputs.is_empty() {
        return Err(PipelineError::Consistency(format!(
            "store {} holds no users; run `ingest` first",
            store.root().display()
        )));
    }
    let fusion_cfg = FusionConfig {
        concurrency: cfg.concurrency,
        ..FusionConfig::default()
    };
    let cache = if backend.is_mock() {
        None
    } else {
        Some(FusionCache::load(&ws.fusion_cache_path())?)
    };
    let outcome = fuse_batch(&inputs, &backend, &fusion_cfg, cache.as_ref());
    if let Some(c) = &cache {
        c.save(&ws.fusion_cache_path())?;
    }
    let sha256 = write_knowledge(&ws.knowledge_path(), &outcome.documents)?;
    if let Some(first) = outcome.failures.first() {
        for f in &outcome.failures {
            log::error!("{f}");
        }
        return Err(PipelineError::Backend(first.source.clone()));
    }
    Ok(FuseSummary {
        documents: outcome.documents.len(),
        cache_hits: outcome.cache_hits,
        sha256,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub variant: Variant,
    pub export: ExportSummary,
    pub test_labels: usize,
    pub skipped: usize,
}

fn behavior_texts(
    ws: &Workspace,
    cfg: &RunConfig,
    registry: &TemplateRegistry,
) -> Result<Vec<BehaviorText>> {
    let store = ws.open_store(cfg)?;
    Ok(load_sequences(&store, cfg.sequence_cap)?
        .iter()
        .map(|s| render_sequence(s, registry))
        .collect())
}

/// `train_per_user` thins the train split with a seeded per-user sample;
/// the test split is always complete.
pub fn build_dataset(
    ws: &Workspace,
    cfg: &RunConfig,
    variant: Variant,
    tasks: &[TaskTemplate],
    registry: &TemplateRegistry,
    train_per_user: Option<usize>,
) -> Result<DatasetSummary> {
    log_run("build-dataset", cfg);
    require(&ws.labels_path(), "synth")?;
    let labels: Vec<LabelRecord> = jsonl::read_jsonl(&ws.labels_path())?;
    let inputs = match variant {
        Variant::Full => {
            require(&ws.knowledge_path(), "fuse")?;
            UserInputs::from_knowledge(
                &read_knowledge(&ws.knowledge_path())?,
                DEFAULT_INPUT_CHAR_CAP,
            )
        }
        Variant::NoHkf => {
            UserInputs::from_behavior(&behavior_texts(ws, cfg, registry)?, DEFAULT_INPUT_CHAR_CAP)
        }
    };
    let mut outcome = build_examples(&inputs, &labels, tasks, cfg.cutoff_timestamp, cfg.max_k());
    if let Some(n) = train_per_user {
        let (train, test): (Vec<_>, Vec<_>) = outcome
            .examples
            .into_iter()
            .partition(|e| e.split == Split::Train);
        let mut kept = sample_per_user(&train, n, cfg.seed);
        kept.extend(test);
        kept.sort_by(|a, b| {
            (&a.user_id, &a.task_id, &a.example_id).cmp(&(&b.user_id, &b.task_id, &b.example_id))
        });
        outcome.examples = kept;
    }
    if !outcome.skipped.is_empty() {
        log::warn!(
            "build-dataset: {} labelled (user, task) pairs have no input",
            outcome.skipped.len()
        );
    }
    let dir = ws.dataset_dir(variant);
    let export = export_dataset(&outcome.examples, &dir)?;
    jsonl::write_jsonl(&ws.examples_path(variant), &outcome.examples)?;
    jsonl::write_jsonl(&ws.eval_labels_path(variant), &outcome.test_labels)?;
    write_tasks(&ws.tasks_path(variant), tasks)?;
    Ok(DatasetSummary {
        variant,
        export,
        test_labels: outcome.test_labels.len(),
        skipped: outcome.skipped.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct InferSummary {
    pub run: String,
    pub predictions: usize,
    pub parse_failures: usize,
    pub feature_rows: usize,
    pub sha256: String,
}

pub fn infer(ws: &Workspace, cfg: &RunConfig, run: RunName) -> Result<InferSummary> {
    log_run("infer", cfg);
    let backend_cfg = match run.model {
        ModelChoice::Tuned => &cfg.backend,
        ModelChoice::Base => cfg.base_backend.as_ref().ok_or_else(|| {
            PipelineError::Consistency(format!("run `{run}` needs a base_backend in the config"))
        })?,
    };
    let backend = backend_cfg.build()?;
    require(&ws.examples_path(run.variant), "build-dataset")?;
    let examples: Vec<InstructionExample> = jsonl::read_jsonl(&ws.examples_path(run.variant))?;
    let tasks: Vec<TaskTemplate> = jsonl::read_jsonl(&ws.tasks_path(run.variant))?;
    let tasks_by_id: BTreeMap<&str, &TaskTemplate> =
        tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let catalog = ws.catalog()?;

    let docs: Vec<KnowledgeDocument> = if ws.knowledge_path().exists() {
        read_knowledge(&ws.knowledge_path())?
    } else {
        Vec::new()
    };
    let docs_by_user: BTreeMap<&str, &KnowledgeDocument> =
        docs.iter().map(|d| (d.user_id.as_str(), d)).collect();
    let store = ws.open_store(cfg)?;

    let mut contexts = BTreeMap::new();
    let mut jobs = Vec::new();
    for e in examples.iter().filter(|e| e.split == Split::Test) {
        let task = tasks_by_id.get(e.task_id.as_str()).ok_or_else(|| {
            PipelineError::Consistency(format!("example `{}` names unknown task", e.example_id))
        })?;
        jobs.push((e.user_id.clone(), (*task).clone()));
        if contexts.contains_key(&e.user_id) {
            continue;
        }
        let ctx = match run.variant {
            Variant::Full => {
                let doc = docs_by_user.get(e.user_id.as_str()).ok_or_else(|| {
                    PipelineError::Consistency(format!(
                        "no knowledge document for user `{}`",
                        e.user_id
                    ))
                })?;
                UserContext::from_knowledge(doc, e.input.clone())
            }
            Variant::NoHkf => UserContext::from_behavior(
                store.get_user_sequence(&e.user_id, cfg.sequence_cap)?,
                e.input.clone(),
            ),
        };
        contexts.insert(e.user_id.clone(), ctx);
    }

    let outcome = recommend_batch(
        &contexts,
        &jobs,
        cfg.max_k(),
        &backend,
        &catalog,
        cfg.concurrency,
    );
    for f in &outcome.failures {
        log::error!("{f}");
    }
    if let Some(first) = outcome.failures.into_iter().next() {
        return Err(match first {
            RecommendError::Backend(e) => PipelineError::Backend(e.source),
            other => PipelineError::Consistency(other.to_string()),
        });
    }
    let recs = outcome.recommendations;
    let sha256 = write_predictions(&ws.predictions_path(run), &recs)?;
    let parse_failures = recs
        .iter()
        .filter(|r| r.parse_status == crate::recommender::ParseStatus::Failed)
        .count();

    let features = export_semantic_features(&docs, &recs, &catalog, &tasks);
    jsonl::write_file(
        &ws.features_path(run),
        &features_csv(&features.rows, &feature_names(&catalog)),
    )?;
    Ok(InferSummary {
        run: run.to_string(),
        predictions: recs.len(),
        parse_failures,
        feature_rows: features.rows.len(),
        sha256,
    })
}

fn write_report(ws: &Workspace, stem: &str, report: &EvalReport) -> Result<()> {
    let dir = ws.report_dir();
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    jsonl::write_file(&dir.join(format!("{stem}.json")), &json)?;
    jsonl::write_file(&dir.join(format!("{stem}.txt")), &report.to_table())?;
    Ok(())
}

/// Scores each run against the test labels of its own dataset variant and
/// writes `report/<stem>.{json,txt}`.
pub fn evaluate_runs(
    ws: &Workspace,
    cfg: &RunConfig,
    runs: &[RunName],
    grouping: Grouping,
    stem: &str,
) -> Result<EvalReport> {
    log_run("eval", cfg);
    let mut rows = Vec::new();
    for &run in runs {
        require(&ws.predictions_path(run), "infer")?;
        let labels: Vec<LabelRecord> = jsonl::read_jsonl(&ws.eval_labels_path(run.variant))?;
        let preds = read_predictions(&ws.predictions_path(run))?;
        rows.extend(evaluate_variant(
            &run.to_string(),
            &labels,
            &preds,
            &cfg.ks,
            grouping,
        )?);
    }
    let report = EvalReport {
        ks: cfg.ks.clone(),
        grouping,
        rows,
    };
    write_report(ws, stem, &report)?;
    Ok(report)
}

/// Scores arbitrary prediction files against one label file.
pub fn evaluate_files(
    ws: &Workspace,
    cfg: &RunConfig,
    labels_path: &Path,
    predictions: &[(String, PathBuf)],
    grouping: Grouping,
) -> Result<EvalReport> {
    log_run("eval", cfg);
    let report = crate::metrics::run_eval(labels_path, predictions, &cfg.ks, grouping)?;
    write_report(ws, "report", &report)?;
    Ok(report)
}

/// Builds both dataset variants, infers `full` and `no_hkf` (plus `no_it`
/// when a base backend is configured) and writes one combined report.
pub fn ablate(
    ws: &Workspace,
    cfg: &RunConfig,
    tasks: &[TaskTemplate],
    registry: &TemplateRegistry,
    grouping: Grouping,
) -> Result<EvalReport> {
    let mut runs = Vec::new();
    for variant in [Variant::Full, Variant::NoHkf] {
        build_dataset(ws, cfg, variant, tasks, registry, None)?;
        let run = RunName {
            variant,
            model: ModelChoice::Tuned,
        };
        infer(ws, cfg, run)?;
        runs.push(run);
    }
    if cfg.base_backend.is_some() {
        let run = RunName {
            variant: Variant::Full,
            model: ModelChoice::Base,
        };
        infer(ws, cfg, run)?;
        runs.push(run);
    }
    evaluate_runs(ws, cfg, &runs, grouping, "ablation")
}

/// synth, ingest, fuse and ablate in one go with the default tasks and templates.
pub fn run_all(
    ws: &Workspace,
    cfg: &RunConfig,
    users: usize,
    noise_rate: f64,
) -> Result<EvalReport> {
    let registry = crate::prompt::default_registry();
    synth(ws, cfg, users, cfg.seed, noise_rate)?;
    ingest(ws, cfg, None, None)?;
    fuse(ws, cfg, &registry)?;
    ablate(ws, cfg, &default_tasks(), &registry, Grouping::LabelKind)
}
