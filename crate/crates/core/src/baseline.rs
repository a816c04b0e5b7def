//! Single-prompt "clinical coder" baseline: one prompt per note, codes read
//! back either by their IDs or by their descriptions.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::CaseNote;
use crate::llm::{CompletionBackend, CompletionRequest, PromptContext};
use crate::ontology::Ontology;
use crate::parsing::{extract_codes_by_description, extract_codes_by_id};
use crate::prompting::{render_coder_prompt, PromptTemplate};
use crate::search::{finish_trace, DocOutcome, SearchFailure, SearchSettings, SearchStep, SearchTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    MatchCodes,
    MatchDescriptions,
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMode::MatchCodes => "match-codes",
            BaselineMode::MatchDescriptions => "match-descriptions",
        })
    }
}

impl FromStr for BaselineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "match-codes" => Ok(BaselineMode::MatchCodes),
            "match-descriptions" => Ok(BaselineMode::MatchDescriptions),
            other => Err(format!("unknown baseline mode {other:?}")),
        }
    }
}

pub fn extract(mode: BaselineMode, response: &str, ontology: &Ontology) -> BTreeSet<String> {
    match mode {
        BaselineMode::MatchCodes => extract_codes_by_id(response, ontology),
        BaselineMode::MatchDescriptions => extract_codes_by_description(response, ontology),
    }
}

/// Prompts once and parses the answer. The trace has a single step whose
/// decisions list is empty; the predicted codes land in `assigned_codes`.
pub fn run_coder(
    note: &CaseNote,
    ontology: &Ontology,
    backend: &dyn CompletionBackend,
    template: &PromptTemplate,
    settings: &SearchSettings,
    mode: BaselineMode,
) -> DocOutcome {
    let mut trace = SearchTrace {
        doc_id: note.doc_id.clone(),
        template_id: template.id.clone(),
        ..Default::default()
    };
    let user_text = match render_coder_prompt(template, note) {
        Ok(t) => t,
        Err(e) => return Err(SearchFailure::new(trace, e.into())),
    };
    let request = CompletionRequest {
        system_text: template.system_text.clone(),
        user_text,
        model_id: settings.model_id.clone(),
        temperature: settings.temperature,
        max_output_tokens: settings.max_output_tokens,
        context: Some(PromptContext {
            doc_id: note.doc_id.clone(),
            candidate_codes: Vec::new(),
        }),
    };
    let response = match backend.complete(&request) {
        Ok(r) => r,
        Err(e) => return Err(SearchFailure::new(trace, e.into())),
    };
    let codes = extract(mode, &response.text, ontology);
    trace.steps.push(SearchStep {
        prompt_index: 0,
        parent_code: None,
        candidate_codes: Vec::new(),
        raw_response: response.text,
        decisions: Vec::new(),
    });
    Ok(finish_trace(trace, codes, false, ontology))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ReplayBackend;

    fn ontology() -> Ontology {
        Ontology::parse(
            "ROOT\t\t0\t0\t\n\
             C00-D49\tROOT\t1\t0\tNeoplasms (C00-D49)\n\
             C60-C63\tC00-D49\t2\t0\tMalignant neoplasms of male genital organs (C60-C63)\n\
             C63\tC60-C63\t3\t0\tMalignant neoplasm of other and unspecified male genital organs\n\
             C63.2\tC63\t4\t1\tMalignant neoplasm of scrotum\n\
             C63.7\tC63\t4\t1\tMalignant neoplasm of other specified male genital organs\n",
        )
        .unwrap()
    }

    #[test]
    fn modes_diverge_on_mismatched_pairs() {
        let o = ontology();
        let note = CaseNote {
            doc_id: "d".into(),
            text: "Scrotal mass.".into(),
        };
        let template = PromptTemplate::builtin("coder").unwrap();
        let settings = SearchSettings::new("gpt-4");
        let prompt = render_coder_prompt(&template, &note).unwrap();
        let mut replay = ReplayBackend::default();
        replay.insert(
            &CompletionRequest::new("gpt-4", prompt),
            "C63.2 - Malignant neoplasm of left testis\nC63.7 - Malignant neoplasm of other specified male genital organs",
        );
        let by_code = run_coder(&note, &o, &replay, &template, &settings, BaselineMode::MatchCodes).unwrap();
        let by_desc = run_coder(
            &note,
            &o,
            &replay,
            &template,
            &settings,
            BaselineMode::MatchDescriptions,
        )
        .unwrap();
        assert_eq!(by_code.assigned_codes.iter().collect::<Vec<_>>(), ["C63.2", "C63.7"]);
        assert_eq!(by_desc.assigned_codes.iter().collect::<Vec<_>>(), ["C63.7"]);
        assert_eq!(by_code.trace.prompts_used, 1);
        assert_eq!("match-codes".parse::<BaselineMode>().unwrap(), BaselineMode::MatchCodes);
    }
}
