//! LLM-guided tree search.
//!
//! Starting from the chapters, each step shows the model the children of one
//! node and asks which are mentioned in the note. Relevant assignable codes are
//! collected; relevant internal codes join a frontier whose head supplies the
//! next step's candidates. The loop stops when the frontier is empty or the
//! prompt budget is spent.
//!
//! Every step is recorded in a [`SearchTrace`]. With k predicted labels found
//! at depth d, the number of prompts grows with k and d, and both can be read
//! off the trace (`assigned_codes` and the levels in `relevant_by_level`).

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{format_label_rows, CaseNote, LabelSets};
use crate::llm::{CompletionBackend, CompletionRequest, LlmError, PromptContext};
use crate::ontology::{Ontology, OntologyError, ROOT_CODE};
use crate::parsing::{match_code_descriptions, Candidate, MatchMode, ParsedDecision, Polarity};
use crate::prompting::{render_tree_prompt, PromptTemplate, TemplateError};

/// Prompt budget per document.
pub const DEFAULT_BUDGET: usize = 50;
/// Budget sentinel meaning "run until the frontier is empty".
pub const UNLIMITED_BUDGET: usize = usize::MAX;

#[derive(Error, Debug)]
pub enum SearchError {
    #[error("backend failure: {0}")]
    Backend(#[from] LlmError),
    #[error("template: {0}")]
    Template(#[from] TemplateError),
    #[error("ontology: {0}")]
    Ontology(#[from] OntologyError),
    #[error("invalid search settings: {0}")]
    Settings(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse trace {path}: {reason}")]
    BadTrace { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frontier {
    /// Take the oldest discovered parent next.
    #[default]
    Fifo,
    /// Take the newest discovered parent next.
    Lifo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub budget: usize,
    pub frontier: Frontier,
    pub match_mode: MatchMode,
}

impl SearchSettings {
    pub fn new(model_id: impl Into<String>) -> Self {
        SearchSettings {
            model_id: model_id.into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            budget: DEFAULT_BUDGET,
            frontier: Frontier::Fifo,
            match_mode: MatchMode::Substring,
        }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.budget == 0 {
            return Err(SearchError::Settings("budget must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(SearchError::Settings("temperature must be non-negative".into()));
        }
        Ok(())
    }

    fn request(&self, template: &PromptTemplate, user_text: String, context: PromptContext) -> CompletionRequest {
        CompletionRequest {
            system_text: template.system_text.clone(),
            user_text,
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            context: Some(context),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStep {
    pub prompt_index: usize,
    /// Node whose children were the candidates; `None` for single-prompt
    /// baselines.
    pub parent_code: Option<String>,
    pub candidate_codes: Vec<String>,
    pub raw_response: String,
    pub decisions: Vec<ParsedDecision>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub doc_id: String,
    pub prompt_index: usize,
    pub reason: String,
}

/// Two or more assigned leaves under the same parent, e.g. a condition "with"
/// and "without" complications.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiblingConflict {
    pub parent: String,
    pub codes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub doc_id: String,
    pub template_id: String,
    pub steps: Vec<SearchStep>,
    pub prompts_used: usize,
    pub truncated: bool,
    pub assigned_codes: Vec<String>,
    /// Level → codes judged relevant at that level.
    pub relevant_by_level: BTreeMap<u8, BTreeSet<String>>,
    pub parse_warnings: Vec<ParseWarning>,
    pub sibling_conflicts: Vec<SiblingConflict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SearchTrace {
    fn new(doc_id: &str, template_id: &str) -> Self {
        SearchTrace {
            doc_id: doc_id.to_string(),
            template_id: template_id.to_string(),
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchResult {
    pub doc_id: String,
    pub assigned_codes: BTreeSet<String>,
    pub trace: SearchTrace,
    pub truncated: bool,
}

/// A failed document search. The trace holds every step completed before the
/// failure.
#[derive(Debug)]
pub struct SearchFailure {
    pub doc_id: String,
    pub error: SearchError,
    pub trace: Box<SearchTrace>,
}

impl SearchFailure {
    pub(crate) fn new(mut trace: SearchTrace, error: SearchError) -> Self {
        trace.error = Some(error.to_string());
        trace.prompts_used = trace.steps.len();
        SearchFailure {
            doc_id: trace.doc_id.clone(),
            error,
            trace: Box::new(trace),
        }
    }
}

/// Finds groups of assigned codes sharing a parent.
pub fn sibling_conflicts(assigned: &BTreeSet<String>, ontology: &Ontology) -> Vec<SiblingConflict> {
    let mut by_parent: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for code in assigned {
        if let Ok(Some(parent)) = ontology.parent(code) {
            by_parent.entry(parent).or_default().push(code.clone());
        }
    }
    by_parent
        .into_iter()
        .filter(|(_, codes)| codes.len() > 1)
        .map(|(parent, codes)| SiblingConflict {
            parent: parent.to_string(),
            codes,
        })
        .collect()
}

pub(crate) fn finish_trace(
    mut trace: SearchTrace,
    assigned: BTreeSet<String>,
    truncated: bool,
    ontology: &Ontology,
) -> SearchResult {
    trace.prompts_used = trace.steps.len();
    trace.truncated = truncated;
    trace.assigned_codes = assigned.iter().cloned().collect();
    trace.sibling_conflicts = sibling_conflicts(&assigned, ontology);
    SearchResult {
        doc_id: trace.doc_id.clone(),
        assigned_codes: assigned,
        truncated,
        trace,
    }
}

/// Runs the budget-limited tree search for one document.
pub fn search_tree(
    note: &CaseNote,
    ontology: &Ontology,
    backend: &dyn CompletionBackend,
    template: &PromptTemplate,
    settings: &SearchSettings,
) -> Result<SearchResult, SearchFailure> {
    let mut trace = SearchTrace::new(&note.doc_id, &template.id);
    if let Err(e) = settings.validate() {
        return Err(SearchFailure::new(trace, e));
    }

    let mut assigned = BTreeSet::new();
    let mut frontier: VecDeque<String> = VecDeque::new();
    let mut enqueued: HashSet<String> = HashSet::new();
    let mut parent = Some(ROOT_CODE.to_string());
    let mut truncated = false;

    while let Some(current) = parent.take() {
        if trace.steps.len() >= settings.budget {
            truncated = true;
            break;
        }
        let candidate_codes = match ontology.child_codes(&current) {
            Ok(c) => c.to_vec(),
            Err(e) => return Err(SearchFailure::new(trace, e.into())),
        };
        let candidates: Vec<Candidate> = candidate_codes
            .iter()
            .map(|c| {
                Candidate::new(
                    c.clone(),
                    ontology.node(c).map(|n| n.description.clone()).unwrap_or_default(),
                )
            })
            .collect();

        let prompt_index = trace.steps.len();
        let user_text = match render_tree_prompt(template, note, &candidates) {
            Ok(t) => t,
            Err(e) => return Err(SearchFailure::new(trace, e.into())),
        };
        let request = settings.request(
            template,
            user_text,
            PromptContext {
                doc_id: note.doc_id.clone(),
                candidate_codes: candidate_codes.clone(),
            },
        );
        let response = match backend.complete(&request) {
            Ok(r) => r,
            Err(e) => return Err(SearchFailure::new(trace, e.into())),
        };

        let parsed = match_code_descriptions(&response.text, &candidates, &template.markers, settings.match_mode);
        if let Some(reason) = &parsed.warning {
            trace.parse_warnings.push(ParseWarning {
                doc_id: note.doc_id.clone(),
                prompt_index,
                reason: reason.clone(),
            });
        }
        let relevant: HashSet<&str> = parsed.relevant_codes().collect();
        // Candidate order, not response line order, decides discovery order.
        for code in candidate_codes.iter().filter(|c| relevant.contains(c.as_str())) {
            let node = ontology.node(code).expect("candidate codes come from the ontology");
            trace
                .relevant_by_level
                .entry(node.level.0)
                .or_default()
                .insert(code.clone());
            if node.assignable {
                assigned.insert(code.clone());
            } else if enqueued.insert(code.clone()) {
                frontier.push_back(code.clone());
            }
        }
        trace.steps.push(SearchStep {
            prompt_index,
            parent_code: Some(current),
            candidate_codes,
            raw_response: response.text,
            decisions: parsed.decisions,
        });

        while parent.is_none() {
            let next = match settings.frontier {
                Frontier::Fifo => frontier.pop_front(),
                Frontier::Lifo => frontier.pop_back(),
            };
            match next {
                // Childless internal nodes offer nothing to ask about.
                Some(code) if ontology.node(&code).is_ok_and(|n| n.children.is_empty()) => continue,
                Some(code) => parent = Some(code),
                None => break,
            }
        }
    }

    Ok(finish_trace(trace, assigned, truncated, ontology))
}

/// Outcome of processing one document in a corpus run.
pub type DocOutcome = Result<SearchResult, SearchFailure>;

/// Runs `task` over every note with at most `workers` documents in flight.
/// Results come back in input order regardless of scheduling.
pub fn run_parallel<F>(notes: &[CaseNote], workers: usize, task: F) -> Vec<DocOutcome>
where
    F: Fn(&CaseNote) -> DocOutcome + Sync,
{
    let workers = workers.max(1);
    if workers == 1 {
        return notes.iter().map(&task).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool builds");
    pool.install(|| notes.par_iter().map(&task).collect())
}

/// Tree search over a whole corpus.
pub fn run_corpus(
    notes: &[CaseNote],
    ontology: &Ontology,
    backend: &dyn CompletionBackend,
    template: &PromptTemplate,
    settings: &SearchSettings,
    workers: usize,
) -> Vec<DocOutcome> {
    run_parallel(notes, workers, |note| {
        search_tree(note, ontology, backend, template, settings)
    })
}

/// Predictions of the successful documents.
pub fn predictions(outcomes: &[DocOutcome]) -> LabelSets {
    outcomes
        .iter()
        .filter_map(|o| o.as_ref().ok())
        .map(|r| (r.doc_id.clone(), r.assigned_codes.clone()))
        .collect()
}

/// Writes the sorted `doc_id<TAB>code` predictions file.
pub fn write_predictions(path: &Path, outcomes: &[DocOutcome]) -> Result<(), SearchError> {
    fs::write(path, format_label_rows(&predictions(outcomes))).map_err(|source| SearchError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes one `<doc_id>.json` trace per document, failed ones included.
pub fn write_traces(dir: &Path, outcomes: &[DocOutcome]) -> Result<(), SearchError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SearchError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for outcome in outcomes {
        let trace = match outcome {
            Ok(r) => &r.trace,
            Err(f) => f.trace.as_ref(),
        };
        let path = dir.join(format!("{}.json", trace.doc_id));
        fs::write(&path, trace.to_json()).map_err(io(&path))?;
    }
    Ok(())
}

/// Reads every `*.json` trace in `dir`, sorted by document id.
pub fn read_traces(dir: &Path) -> Result<Vec<SearchTrace>, SearchError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SearchError::Io { path, source }
    };
    let mut traces = Vec::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let trace: SearchTrace = serde_json::from_str(&text).map_err(|e| SearchError::BadTrace {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        traces.push(trace);
    }
    traces.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    Ok(traces)
}

/// Codes marked relevant anywhere in a trace.
pub fn relevant_decisions(trace: &SearchTrace) -> impl Iterator<Item = &ParsedDecision> {
    trace
        .steps
        .iter()
        .flat_map(|s| s.decisions.iter())
        .filter(|d| d.polarity == Polarity::Relevant)
}
