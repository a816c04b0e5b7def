//! Command-line surface: tree-search and baseline runs, evaluation, level
//! analysis and cache maintenance.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use crate::baseline::{run_coder, BaselineMode};
use crate::config::{BackendKind, ConfigError, RunConfig, CONFIG_HELP};
use crate::corpus::{load_documents, load_gold_labels, read_label_file, FilterReport, GoldLabels};
use crate::eval::{evaluate, level_analysis, ClassSetPolicy};
use crate::llm::{
    cache_clear, cache_stats, CachedBackend, CompletionBackend, HttpBackend, HttpConfig, OracleBackend, OracleConfig,
    ReplayBackend,
};
use crate::ontology::Ontology;
use crate::prompting::{PromptTemplate, TemplateKind};
use crate::report;
use crate::search::{
    read_traces, run_corpus, run_parallel, write_predictions, write_traces, DocOutcome, SearchSettings,
    UNLIMITED_BUDGET,
};

#[derive(Parser, Debug)]
#[command(
    name = "icd-treesearch",
    version,
    about = "Assign ICD codes to case notes by LLM-guided search over the code hierarchy",
    after_long_help = CONFIG_HELP
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the tree search over every document in the corpus.
    #[command(after_long_help = CONFIG_HELP)]
    Search {
        /// Run configuration file.
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run the single-prompt clinical-coder baseline.
    #[command(after_long_help = CONFIG_HELP)]
    Baseline {
        #[arg(short, long)]
        config: PathBuf,
        /// How codes are read back from the answer.
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Micro/macro precision, recall and F1 of a predictions file.
    Eval {
        /// Predictions TSV (doc_id<TAB>code).
        #[arg(long)]
        predictions: PathBuf,
        /// Gold labels TSV; filtered to assignable codes before scoring.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyArg::Gold)]
        policy: PolicyArg,
        /// Row label in the table.
        #[arg(long, default_value = "predictions")]
        label: String,
        /// Also write metrics.json, metrics.txt and metrics.csv here.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Cumulative per-level metrics from tree-search traces.
    Levels {
        /// Directory of <doc_id>.json traces.
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyArg::Gold)]
        policy: PolicyArg,
        /// Also write levels.json, levels.txt and levels.csv here.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Inspect or empty a response cache directory.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand, Debug)]
pub enum CacheAction {
    /// Number of entries and total size.
    Stats {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Delete every entry.
    Clear {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ModeArg {
    MatchCodes,
    MatchDescriptions,
}

impl From<ModeArg> for BaselineMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::MatchCodes => BaselineMode::MatchCodes,
            ModeArg::MatchDescriptions => BaselineMode::MatchDescriptions,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum PolicyArg {
    Gold,
    GoldUnionPredicted,
}

impl From<PolicyArg> for ClassSetPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Gold => ClassSetPolicy::Gold,
            PolicyArg::GoldUnionPredicted => ClassSetPolicy::GoldUnionPredicted,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Table,
    Json,
    Csv,
}

/// What a corpus run did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Ok,
    DocumentsFailed { failed: usize, total: usize },
}

impl Status {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Status::Ok => ExitCode::SUCCESS,
            Status::DocumentsFailed { .. } => ExitCode::from(2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Pipeline {
    TreeSearch,
    Baseline(BaselineMode),
}

#[derive(Debug, Serialize)]
struct FailureRecord {
    doc_id: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_mode: Option<String>,
    tool_version: &'static str,
    config: &'a RunConfig,
    config_hash: String,
    template_id: String,
    backend_id: String,
    model_id: String,
    temperature: f64,
    budget: serde_json::Value,
    rng_seed: u64,
    documents: usize,
    succeeded: usize,
    truncated: usize,
    prompts_total: usize,
    prompts_per_document: BTreeMap<String, usize>,
    failures: Vec<FailureRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    filter_report: Option<FilterReport>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<Status>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}

pub fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Search { config } => execute(&RunConfig::load(config)?, Pipeline::TreeSearch),
        Command::Baseline { config, mode } => execute(&RunConfig::load(config)?, Pipeline::Baseline(mode.into())),
        Command::Eval {
            predictions,
            gold,
            ontology,
            policy,
            label,
            output_dir,
            format,
        } => {
            let ontology = Ontology::load(&ontology)?;
            let gold = load_gold_labels(&gold, &ontology)?;
            let pred = read_label_file(&predictions)?;
            let metrics = evaluate(&gold.labels, &pred, policy.into())?;
            let rendered = [
                report::metrics_table(&label, &metrics),
                report::to_json(&metrics),
                report::metrics_csv(&metrics),
            ];
            emit(&rendered, format, output_dir.as_deref(), "metrics")?;
            Ok(Status::Ok)
        }
        Command::Levels {
            traces,
            gold,
            ontology,
            policy,
            output_dir,
            format,
        } => {
            let ontology = Ontology::load(&ontology)?;
            let gold = load_gold_labels(&gold, &ontology)?;
            let traces = read_traces(&traces)?;
            let levels = level_analysis(&gold.labels, &traces, &ontology, policy.into())?;
            let rendered = [
                report::levels_table(&levels),
                report::to_json(&levels),
                report::levels_csv(&levels),
            ];
            emit(&rendered, format, output_dir.as_deref(), "levels")?;
            Ok(Status::Ok)
        }
        Command::Cache { action } => {
            match action {
                CacheAction::Stats { dir } => {
                    let stats = cache_stats(&dir)?;
                    println!("{} entries, {} bytes", stats.entries, stats.bytes);
                }
                CacheAction::Clear { dir } => {
                    let removed = cache_clear(&dir)?;
                    println!("removed {removed} entries");
                }
            }
            Ok(Status::Ok)
        }
    }
}

/// Prints one rendering and optionally writes all three next to each other.
fn emit(rendered: &[String; 3], format: Format, output_dir: Option<&Path>, stem: &str) -> Result<()> {
    let shown = match format {
        Format::Table => &rendered[0],
        Format::Json => &rendered[1],
        Format::Csv => &rendered[2],
    };
    print!("{shown}");
    if let Some(dir) = output_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (ext, body) in ["txt", "json", "csv"].iter().zip(rendered) {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

fn load_template(config: &RunConfig, pipeline: Pipeline) -> Result<PromptTemplate> {
    let (template, field, expected) = match pipeline {
        Pipeline::TreeSearch => match &config.template_path {
            Some(p) => (PromptTemplate::load(p)?, "template_path", TemplateKind::TreeSearch),
            None => (
                PromptTemplate::builtin(&config.template)?,
                "template",
                TemplateKind::TreeSearch,
            ),
        },
        Pipeline::Baseline(_) => match &config.coder_template_path {
            Some(p) => (PromptTemplate::load(p)?, "coder_template_path", TemplateKind::Coder),
            None => (
                PromptTemplate::builtin("coder")?,
                "coder_template_path",
                TemplateKind::Coder,
            ),
        },
    };
    if template.kind != expected {
        return Err(ConfigError::Invalid {
            field,
            reason: format!(
                "template {} is a {} template, expected {}",
                template.id, template.kind, expected
            ),
        }
        .into());
    }
    Ok(template)
}

fn build_backend(
    config: &RunConfig,
    ontology: &Arc<Ontology>,
    gold: Option<&GoldLabels>,
    template: &PromptTemplate,
) -> Result<Box<dyn CompletionBackend>> {
    let b = &config.backend;
    let backend: Box<dyn CompletionBackend> = match b.kind {
        BackendKind::Http => {
            let var = b.credential_env_var.as_deref().unwrap_or_default();
            let key = std::env::var(var)
                .with_context(|| format!("environment variable {var} (backend.credential_env_var) is not set"))?;
            let mut http = HttpConfig::new(b.endpoint.clone().unwrap_or_default());
            http.api_key = Some(key);
            http.max_attempts = b.max_attempts;
            http.max_in_flight = b.max_in_flight;
            http.timeout_secs = b.timeout_secs;
            Box::new(HttpBackend::new(http)?)
        }
        BackendKind::Replay => {
            let dir = b.replay_dir.as_ref().expect("validated");
            Box::new(ReplayBackend::from_dir(dir)?)
        }
        BackendKind::Oracle => {
            let gold = gold.expect("validated").labels.clone();
            let mut oracle =
                OracleConfig::perfect(gold).with_noise(b.false_negative_rate, b.false_positive_rate, config.rng_seed);
            if let Some(m) = template.markers.affirmative.first() {
                oracle.affirmative = m.clone();
            }
            if let Some(m) = template.markers.negative.first() {
                oracle.negative = m.clone();
            }
            Box::new(OracleBackend::new(oracle, Arc::clone(ontology))?)
        }
    };
    Ok(match &config.cache_dir {
        Some(dir) => Box::new(CachedBackend::new(backend, dir)?),
        None => backend,
    })
}

/// Runs a search or baseline pipeline and writes its artifacts to
/// `output_dir`: predictions.tsv, traces/, manifest.json and, when gold labels
/// are configured, filter_report.json.
pub fn execute(config: &RunConfig, pipeline: Pipeline) -> Result<Status> {
    let ontology = Arc::new(Ontology::load(&config.ontology_path)?);
    let notes = load_documents(&config.documents_dir)?;
    let gold = match &config.gold_labels_path {
        Some(p) => Some(load_gold_labels(p, &ontology)?),
        None => None,
    };
    if let Some(g) = &gold {
        if g.report.unknown + g.report.non_assignable > 0 {
            warn!(
                "dropped {} unknown and {} non-assignable gold labels",
                g.report.unknown, g.report.non_assignable
            );
        }
    }
    let template = load_template(config, pipeline)?;
    let temperature = config
        .backend
        .temperature
        .unwrap_or_else(|| template.family.default_temperature());
    let budget = config.budget.resolve()?;
    let settings = SearchSettings {
        model_id: config.backend.model_id.clone(),
        temperature,
        max_output_tokens: config.backend.max_output_tokens,
        budget,
        frontier: config.frontier,
        match_mode: config.match_mode,
    };
    settings.validate()?;
    let backend = build_backend(config, &ontology, gold.as_ref(), &template)?;
    info!(
        "{} documents, template {}, backend {}",
        notes.len(),
        template.id,
        backend.backend_id()
    );

    let outcomes: Vec<DocOutcome> = match pipeline {
        Pipeline::TreeSearch => run_corpus(
            &notes,
            &ontology,
            backend.as_ref(),
            &template,
            &settings,
            config.workers,
        ),
        Pipeline::Baseline(mode) => run_parallel(&notes, config.workers, |note| {
            run_coder(note, &ontology, backend.as_ref(), &template, &settings, mode)
        }),
    };

    let out = &config.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_predictions(&out.join("predictions.tsv"), &outcomes)?;
    let trace_dir = out.join("traces");
    if trace_dir.exists() {
        fs::remove_dir_all(&trace_dir).with_context(|| format!("clearing {}", trace_dir.display()))?;
    }
    write_traces(&trace_dir, &outcomes)?;
    if let Some(g) = &gold {
        fs::write(out.join("filter_report.json"), report::to_json(&g.report))?;
    }

    let mut failures = Vec::new();
    let mut prompts = BTreeMap::new();
    let mut truncated = 0;
    for outcome in &outcomes {
        match outcome {
            Ok(r) => {
                prompts.insert(r.doc_id.clone(), r.trace.prompts_used);
                truncated += usize::from(r.truncated);
            }
            Err(f) => {
                warn!("{}: {}", f.doc_id, f.error);
                prompts.insert(f.doc_id.clone(), f.trace.prompts_used);
                failures.push(FailureRecord {
                    doc_id: f.doc_id.clone(),
                    error: f.error.to_string(),
                });
            }
        }
    }
    let manifest = Manifest {
        command: match pipeline {
            Pipeline::TreeSearch => "search",
            Pipeline::Baseline(_) => "baseline",
        },
        baseline_mode: match pipeline {
            Pipeline::Baseline(m) => Some(m.to_string()),
            Pipeline::TreeSearch => None,
        },
        tool_version: env!("CARGO_PKG_VERSION"),
        config,
        config_hash: config.hash(),
        template_id: template.id.clone(),
        backend_id: backend.backend_id(),
        model_id: settings.model_id.clone(),
        temperature,
        budget: if budget == UNLIMITED_BUDGET {
            "unlimited".into()
        } else {
            budget.into()
        },
        rng_seed: config.rng_seed,
        documents: outcomes.len(),
        succeeded: outcomes.len() - failures.len(),
        truncated,
        prompts_total: prompts.values().sum(),
        prompts_per_document: prompts,
        failures,
        filter_report: gold.as_ref().map(|g| g.report),
    };
    fs::write(out.join("manifest.json"), report::to_json(&manifest))?;

    let failed = manifest.failures.len();
    eprintln!(
        "{} of {} documents succeeded, {} prompts; outputs in {}",
        manifest.succeeded,
        manifest.documents,
        manifest.prompts_total,
        out.display()
    );
    if failed == outcomes.len() && failed > 0 {
        bail!("all {failed} documents failed");
    }
    Ok(if failed == 0 {
        Status::Ok
    } else {
        Status::DocumentsFailed {
            failed,
            total: outcomes.len(),
        }
    })
}

/// Process entry point.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(status) => status.exit_code(),
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins an error and its causes, skipping causes the previous message
/// already spells out.
pub fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}
