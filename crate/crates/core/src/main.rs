use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hkfr::config::{BackendKind, RunConfig};
use hkfr::instructions::{default_tasks, load_tasks, TaskTemplate, Variant};
use hkfr::metrics::Grouping;
use hkfr::pipeline::{self, ModelChoice, PipelineError, RunName, Workspace};
use hkfr::prompt::{default_registry, TemplateRegistry};
use hkfr::store::{AnonymizationPolicy, MaskField};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "hkfr",
    version,
    about = "Behavior fusion and LLM recommendation pipeline"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every stage's files.
    #[arg(long, global = true, default_value = "hkfr-work")]
    work_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override config file values.
#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    store_path: Option<PathBuf>,
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model_name: Option<String>,
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true)]
    sequence_cap: Option<usize>,
    #[arg(long, global = true)]
    cutoff_timestamp: Option<i64>,
    #[arg(long, global = true, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted preferences.
    Synth {
        #[arg(long, default_value_t = 100)]
        users: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Append events to the behavior store.
    Ingest {
        /// Defaults to the synthesized events.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Mask identifiers with this salt before storing.
        #[arg(long)]
        anonymize_salt: Option<String>,
        #[arg(long, value_delimiter = ',', requires = "anonymize_salt")]
        mask: Option<Vec<MaskField>>,
    },
    /// Fuse each user's behavior into a knowledge document.
    Fuse {
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Export instruction-tuning triples for one variant.
    BuildDataset {
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Keep at most this many train examples per user (seeded sample).
        #[arg(long)]
        per_user: Option<usize>,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Recommend for every test example of a variant.
    Infer {
        /// Use the configured base model instead of the tuned one.
        #[arg(long)]
        base_model: bool,
    },
    /// Score predictions against held-out labels.
    Eval {
        /// Runs to score: full, no_hkf, no_it, no_hkf_no_it.
        #[arg(long, value_delimiter = ',', conflicts_with = "labels")]
        runs: Option<Vec<RunName>>,
        /// Label file for scoring explicit prediction files.
        #[arg(long, requires = "predictions")]
        labels: Option<PathBuf>,
        /// `name=path` prediction files.
        #[arg(long, value_parser = parse_named_path)]
        predictions: Vec<(String, PathBuf)>,
        #[arg(long, default_value = "label_kind")]
        group_by: Grouping,
    },
    /// Compare full, no_hkf and (with a base backend) no_it in one report.
    Ablate {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value = "label_kind")]
        group_by: Grouping,
    },
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=path")?;
    Ok((name.to_string(), PathBuf::from(path)))
}

enum Failure {
    Usage(String),
    Pipeline(PipelineError),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

fn config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(v) = &o.store_path {
        cfg.store_path = Some(v.clone());
    }
    if let Some(v) = o.backend {
        cfg.backend.kind = v;
    }
    if let Some(v) = &o.endpoint {
        cfg.backend.endpoint = Some(v.clone());
    }
    if let Some(v) = &o.model_name {
        cfg.backend.model_name = v.clone();
    }
    if let Some(v) = o.concurrency {
        cfg.concurrency = v;
    }
    if let Some(v) = o.sequence_cap {
        cfg.sequence_cap = v;
    }
    if let Some(v) = o.cutoff_timestamp {
        cfg.cutoff_timestamp = v;
    }
    if let Some(v) = &o.ks {
        cfg.ks = v.clone();
    }
    if let Some(v) = o.variant {
        cfg.variant = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn registry(path: &Option<PathBuf>) -> Result<TemplateRegistry, Failure> {
    match path {
        Some(p) => TemplateRegistry::load(p).map_err(|e| Failure::Usage(e.to_string())),
        None => Ok(default_registry()),
    }
}

fn tasks(path: &Option<PathBuf>) -> Result<Vec<TaskTemplate>, Failure> {
    match path {
        Some(p) => load_tasks(p).map_err(|e| Failure::Usage(e.to_string())),
        None => Ok(default_tasks()),
    }
}

fn print<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("summary serializes")
    );
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = config(&cli)?;
    let ws = Workspace::new(&cli.work_dir);
    match &cli.command {
        Command::Synth { users, noise } => {
            print(&pipeline::synth(&ws, &cfg, *users, cfg.seed, *noise)?)
        }
        Command::Ingest {
            events,
            anonymize_salt,
            mask,
        } => {
            let policy = match anonymize_salt {
                Some(salt) => Some(
                    match mask {
                        Some(fields) => AnonymizationPolicy::with_fields(
                            salt.as_bytes(),
                            fields.iter().copied(),
                        ),
                        None => AnonymizationPolicy::new(salt.as_bytes()),
                    }
                    .map_err(|e| Failure::Usage(e.to_string()))?,
                ),
                None => None,
            };
            print(&pipeline::ingest(
                &ws,
                &cfg,
                events.as_deref(),
                policy.as_ref(),
            )?);
        }
        Command::Fuse { templates } => print(&pipeline::fuse(&ws, &cfg, &registry(templates)?)?),
        Command::BuildDataset {
            tasks: t,
            per_user,
            templates,
        } => print(&pipeline::build_dataset(
            &ws,
            &cfg,
            cfg.variant,
            &tasks(t)?,
            &registry(templates)?,
            *per_user,
        )?),
        Command::Infer { base_model } => {
            let model = if *base_model {
                ModelChoice::Base
            } else {
                ModelChoice::Tuned
            };
            print(&pipeline::infer(
                &ws,
                &cfg,
                RunName {
                    variant: cfg.variant,
                    model,
                },
            )?);
        }
        Command::Eval {
            runs,
            labels,
            predictions,
            group_by,
        } => {
            let report = match labels {
                Some(l) => pipeline::evaluate_files(&ws, &cfg, l, predictions, *group_by)?,
                None => {
                    let runs = runs.clone().unwrap_or_else(|| {
                        vec![RunName {
                            variant: cfg.variant,
                            model: ModelChoice::Tuned,
                        }]
                    });
                    pipeline::evaluate_runs(&ws, &cfg, &runs, *group_by, "report")?
                }
            };
            print!("{}", report.to_table());
        }
        Command::Ablate {
            tasks: t,
            templates,
            group_by,
        } => {
            let report = pipeline::ablate(&ws, &cfg, &tasks(t)?, &registry(templates)?, *group_by)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
