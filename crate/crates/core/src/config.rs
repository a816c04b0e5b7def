//! TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::ClassSetPolicy;
use crate::parsing::MatchMode;
use crate::search::{Frontier, DEFAULT_BUDGET, UNLIMITED_BUDGET};

/// Field reference printed by `--help`.
pub const CONFIG_HELP: &str = "\
CONFIGURATION FILE (TOML; relative paths resolve against the file's directory)

  ontology_path        Tab-separated ontology file: code, parent, level, assignable, description. Required.
  documents_dir        Directory of <doc_id>.txt case notes. Required.
  gold_labels_path     Two-column TSV doc_id<TAB>code. Required for the oracle backend; when
                       present, a filter report is written and labels outside the assignable
                       set are dropped.
  template             Built-in tree-search template: gpt-tree-search (default) or llama-tree-search.
  template_path        Tree-search template file; overrides `template`.
  coder_template_path  Coder baseline template file; default is the built-in coder template.
  budget               Prompts per document: a positive integer or \"unlimited\". Default 50.
  workers              Documents processed concurrently. Default 1.
  cache_dir            Response cache directory; unset disables caching.
  output_dir           Where predictions, traces and reports are written. Required.
  class_set_policy     Macro-average classes: gold (default) or gold_union_predicted.
  rng_seed             Seed for the simulated oracle. Default 0.
  frontier             Order in which discovered parents are expanded: fifo (default) or lifo.
  match_mode           Description matching: substring (default) or token_boundary.

  [backend]
  kind                 http, replay or oracle. Required.
  model_id             Model name sent to the endpoint and part of every cache key. Required.
  endpoint             Chat-completions URL (http only).
  credential_env_var   Environment variable holding the API key (http only). Keys are never
                       read from the config file.
  temperature          Sampling temperature >= 0. Default: the template family's minimum
                       (0 for gpt, 0.001 for llama).
  max_output_tokens    Completion length cap. Default 1024.
  replay_dir           Directory of recorded cache entries (replay only).
  false_negative_rate  Oracle probability of missing a relevant candidate. Default 0.
  false_positive_rate  Oracle probability of accepting an irrelevant candidate. Default 0.
  max_attempts         HTTP attempts per request before giving up. Default 5.
  max_in_flight        Concurrent HTTP requests. Default 4.
  timeout_secs         HTTP request timeout. Default 120.
";

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Replay,
    Oracle,
}

/// A prompt budget: a count or the string "unlimited".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Count(u64),
    Keyword(String),
}

impl Default for Budget {
    fn default() -> Self {
        Budget::Count(DEFAULT_BUDGET as u64)
    }
}

impl Budget {
    pub fn resolve(&self) -> Result<usize, ConfigError> {
        match self {
            Budget::Count(0) => Err(invalid("budget", "must be at least 1")),
            Budget::Count(n) => Ok(usize::try_from(*n).unwrap_or(UNLIMITED_BUDGET)),
            Budget::Keyword(k) if k == "unlimited" => Ok(UNLIMITED_BUDGET),
            Budget::Keyword(k) => Err(invalid(
                "budget",
                format!("expected a positive integer or \"unlimited\", got {k:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_env_var: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_dir: Option<PathBuf>,
    #[serde(default)]
    pub false_negative_rate: f64,
    #[serde(default)]
    pub false_positive_rate: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_output_tokens() -> u32 {
    1024
}
fn default_max_attempts() -> u32 {
    5
}
fn default_max_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_workers() -> usize {
    1
}
fn default_template() -> String {
    "gpt-tree-search".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub ontology_path: PathBuf,
    pub documents_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_labels_path: Option<PathBuf>,
    pub backend: BackendConfig,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coder_template_path: Option<PathBuf>,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub class_set_policy: ClassSetPolicy,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub frontier: Frontier,
    #[serde(default)]
    pub match_mode: MatchMode,
}

impl RunConfig {
    /// Reads, resolves relative paths and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.ontology_path);
        join(&mut self.documents_dir);
        join(&mut self.output_dir);
        for p in [
            &mut self.gold_labels_path,
            &mut self.template_path,
            &mut self.coder_template_path,
            &mut self.cache_dir,
            &mut self.backend.replay_dir,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let file = |field, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(invalid(field, format!("{} is not a file", p.display())))
            }
        };
        let dir = |field, p: &Path| {
            if p.is_dir() {
                Ok(())
            } else {
                Err(invalid(field, format!("{} is not a directory", p.display())))
            }
        };
        file("ontology_path", &self.ontology_path)?;
        dir("documents_dir", &self.documents_dir)?;
        if let Some(p) = &self.gold_labels_path {
            file("gold_labels_path", p)?;
        }
        if let Some(p) = &self.template_path {
            file("template_path", p)?;
        }
        if let Some(p) = &self.coder_template_path {
            file("coder_template_path", p)?;
        }
        self.budget.resolve()?;
        if self.workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }

        let b = &self.backend;
        if b.model_id.trim().is_empty() {
            return Err(invalid("backend.model_id", "must not be empty"));
        }
        if let Some(t) = b.temperature {
            if !t.is_finite() || t < 0.0 {
                return Err(invalid("backend.temperature", "must be a non-negative number"));
            }
        }
        if b.max_output_tokens == 0 {
            return Err(invalid("backend.max_output_tokens", "must be at least 1"));
        }
        match b.kind {
            BackendKind::Http => {
                if b.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
                    return Err(invalid("backend.endpoint", "required for the http backend"));
                }
                if b.credential_env_var.as_deref().is_none_or(|e| e.trim().is_empty()) {
                    return Err(invalid("backend.credential_env_var", "required for the http backend"));
                }
                if b.max_attempts == 0 {
                    return Err(invalid("backend.max_attempts", "must be at least 1"));
                }
                if b.max_in_flight == 0 {
                    return Err(invalid("backend.max_in_flight", "must be at least 1"));
                }
            }
            BackendKind::Replay => match &b.replay_dir {
                Some(p) => dir("backend.replay_dir", p)?,
                None => return Err(invalid("backend.replay_dir", "required for the replay backend")),
            },
            BackendKind::Oracle => {
                if self.gold_labels_path.is_none() {
                    return Err(invalid("gold_labels_path", "required for the oracle backend"));
                }
                for (field, rate) in [
                    ("backend.false_negative_rate", b.false_negative_rate),
                    ("backend.false_positive_rate", b.false_positive_rate),
                ] {
                    if !(0.0..=1.0).contains(&rate) {
                        return Err(invalid(field, "must lie in [0, 1]"));
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
