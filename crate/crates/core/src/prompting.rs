//! Prompt templates and rendering.
//!
//! Templates are plain text files with a TOML header between `---` lines:
//!
//! ```text
//! ---
//! id = "gpt-tree-search-v1"
//! family = "gpt"
//! kind = "tree_search"
//! candidate_line_format = "- {description}"
//! affirmative_markers = ["relevant"]
//! negative_markers = ["not relevant"]
//! ---
//! ...body with {case_note} and {code_descriptions}...
//! ```
//!
//! Tree-search bodies hold `{case_note}` and `{code_descriptions}` exactly
//! once each; coder bodies hold only `{case_note}`. Substitution is a single
//! pass, so placeholder-like text inside a case note is left untouched.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CaseNote;
use crate::parsing::{normalize_text, Candidate, Markers};

const CASE_NOTE: &str = "{case_note}";
const CODE_DESCRIPTIONS: &str = "{code_descriptions}";

const BUILTIN_GPT_TREE: &str = include_str!("../templates/gpt_tree_search.txt");
const BUILTIN_LLAMA_TREE: &str = include_str!("../templates/llama_tree_search.txt");
const BUILTIN_CODER: &str = include_str!("../templates/coder.txt");

#[derive(Error, Debug)]
pub enum TemplateError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template header: {0}")]
    Header(String),
    #[error("template {id}: placeholder {placeholder} must appear exactly once, found {count}")]
    Placeholder {
        id: String,
        placeholder: &'static str,
        count: usize,
    },
    #[error("template {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("template {id} is a {actual} template, expected {expected}")]
    WrongKind {
        id: String,
        expected: TemplateKind,
        actual: TemplateKind,
    },
    #[error("no candidates to render")]
    NoCandidates,
    #[error("unknown built-in template {0:?}")]
    UnknownBuiltin(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Gpt,
    Llama,
}

impl ModelFamily {
    /// Lowest temperature the family's hosted API accepts reliably.
    pub fn default_temperature(self) -> f64 {
        match self {
            ModelFamily::Gpt => 0.0,
            ModelFamily::Llama => 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    TreeSearch,
    Coder,
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::TreeSearch => "tree_search",
            TemplateKind::Coder => "coder",
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    id: String,
    family: ModelFamily,
    kind: TemplateKind,
    #[serde(default = "default_line_format")]
    candidate_line_format: String,
    #[serde(default)]
    affirmative_markers: Vec<String>,
    #[serde(default)]
    negative_markers: Vec<String>,
    #[serde(default)]
    system_text: Option<String>,
    #[serde(default)]
    notes: Option<String>,
}

fn default_line_format() -> String {
    "- {description}".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub family: ModelFamily,
    pub kind: TemplateKind,
    pub body: String,
    pub markers: Markers,
    pub candidate_line_format: String,
    pub system_text: Option<String>,
    pub notes: Option<String>,
}

impl PromptTemplate {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Built-in templates: `gpt-tree-search`, `llama-tree-search`, `coder`.
    pub fn builtin(name: &str) -> Result<Self, TemplateError> {
        let text = match name {
            "gpt-tree-search" => BUILTIN_GPT_TREE,
            "llama-tree-search" => BUILTIN_LLAMA_TREE,
            "coder" => BUILTIN_CODER,
            other => return Err(TemplateError::UnknownBuiltin(other.to_string())),
        };
        Self::parse(text)
    }

    pub fn builtin_tree_search(family: ModelFamily) -> Self {
        let name = match family {
            ModelFamily::Gpt => "gpt-tree-search",
            ModelFamily::Llama => "llama-tree-search",
        };
        Self::builtin(name).expect("built-in templates are valid")
    }

    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let rest = text
            .strip_prefix("---\n")
            .or_else(|| text.strip_prefix("---\r\n"))
            .ok_or_else(|| TemplateError::Header("file must start with a --- header line".into()))?;
        let end = rest
            .find("\n---\n")
            .or_else(|| rest.find("\n---\r\n"))
            .ok_or_else(|| TemplateError::Header("header is not closed by a --- line".into()))?;
        let header_text = &rest[..end];
        let after = &rest[end + 1..];
        let body = after.split_once('\n').map_or("", |(_, b)| b);
        let body = body.strip_suffix('\n').unwrap_or(body);
        let header: Header = toml::from_str(header_text).map_err(|e| TemplateError::Header(e.to_string()))?;

        let template = PromptTemplate {
            id: header.id,
            family: header.family,
            kind: header.kind,
            body: body.to_string(),
            markers: Markers {
                affirmative: header.affirmative_markers,
                negative: header.negative_markers,
            },
            candidate_line_format: header.candidate_line_format,
            system_text: header.system_text,
            notes: header.notes,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let count = |p: &'static str| self.body.matches(p).count();
        let expect = |p: &'static str, n: usize| {
            let found = count(p);
            if found == n {
                Ok(())
            } else {
                Err(TemplateError::Placeholder {
                    id: self.id.clone(),
                    placeholder: p,
                    count: found,
                })
            }
        };
        let invalid = |reason: &str| TemplateError::Invalid {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        expect(CASE_NOTE, 1)?;
        match self.kind {
            TemplateKind::Coder => expect(CODE_DESCRIPTIONS, 0)?,
            TemplateKind::TreeSearch => {
                expect(CODE_DESCRIPTIONS, 1)?;
                if !self.candidate_line_format.contains("{description}") {
                    return Err(invalid("candidate_line_format lacks {description}"));
                }
                if self.candidate_line_format.contains('\n') {
                    return Err(invalid("candidate_line_format must render a single line"));
                }
                if self.markers.affirmative.is_empty() || self.markers.negative.is_empty() {
                    return Err(invalid("marker lists must be non-empty"));
                }
                let affirmative: HashSet<String> = self.markers.affirmative.iter().map(|m| normalize_text(m)).collect();
                if self
                    .markers
                    .negative
                    .iter()
                    .any(|m| affirmative.contains(&normalize_text(m)))
                {
                    return Err(invalid("affirmative and negative markers overlap"));
                }
                if affirmative.contains("") || self.markers.negative.iter().any(|m| normalize_text(m).is_empty()) {
                    return Err(invalid("markers must not be blank"));
                }
            }
        }
        Ok(())
    }

    fn expect_kind(&self, expected: TemplateKind) -> Result<(), TemplateError> {
        if self.kind != expected {
            return Err(TemplateError::WrongKind {
                id: self.id.clone(),
                expected,
                actual: self.kind,
            });
        }
        Ok(())
    }

    fn candidate_line(&self, candidate: &Candidate) -> String {
        fill(
            &self.candidate_line_format,
            &[("{description}", &candidate.description), ("{code}", &candidate.code)],
        )
    }
}

/// Single-pass placeholder substitution.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        match vars.iter().find(|(name, _)| tail.starts_with(name)) {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len()..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Renders the tree-search prompt: the case note plus one line per candidate,
/// in the given order.
pub fn render_tree_prompt(
    template: &PromptTemplate,
    note: &CaseNote,
    candidates: &[Candidate],
) -> Result<String, TemplateError> {
    template.expect_kind(TemplateKind::TreeSearch)?;
    template.validate()?;
    if candidates.is_empty() {
        return Err(TemplateError::NoCandidates);
    }
    let lines: Vec<String> = candidates.iter().map(|c| template.candidate_line(c)).collect();
    let descriptions = lines.join("\n");
    Ok(fill(
        &template.body,
        &[(CASE_NOTE, &note.text), (CODE_DESCRIPTIONS, &descriptions)],
    ))
}

/// Renders the single-prompt clinical coder baseline.
pub fn render_coder_prompt(template: &PromptTemplate, note: &CaseNote) -> Result<String, TemplateError> {
    template.expect_kind(TemplateKind::Coder)?;
    template.validate()?;
    Ok(fill(&template.body, &[(CASE_NOTE, &note.text)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn note(text: &str) -> CaseNote {
        CaseNote {
            doc_id: "d1".into(),
            text: text.into(),
        }
    }

    #[test]
    fn builtins_parse() {
        for name in ["gpt-tree-search", "llama-tree-search", "coder"] {
            let t = PromptTemplate::builtin(name).unwrap();
            assert!(!t.id.is_empty());
            assert!(t.notes.is_some());
        }
        assert_eq!(
            PromptTemplate::builtin_tree_search(ModelFamily::Llama).family,
            ModelFamily::Llama
        );
        assert!(PromptTemplate::builtin("nope").is_err());
        assert_eq!(ModelFamily::Llama.default_temperature(), 0.001);
        assert_eq!(ModelFamily::Gpt.default_temperature(), 0.0);
    }

    #[test]
    fn tree_prompt_lists_candidates_in_order() {
        let t = PromptTemplate::builtin("gpt-tree-search").unwrap();
        let cands = vec![
            Candidate::new("J00-J99", "Diseases of the respiratory system (J00-J99)"),
            Candidate::new("A00-B99", "Certain infectious and parasitic diseases (A00-B99)"),
        ];
        let out = render_tree_prompt(&t, &note("Patient with a cold."), &cands).unwrap();
        let a = out.find("- Diseases of the respiratory system (J00-J99)").unwrap();
        let b = out
            .find("- Certain infectious and parasitic diseases (A00-B99)")
            .unwrap();
        assert!(a < b);
        assert_eq!(out.matches("Diseases of the respiratory system").count(), 1);
        assert!(out.contains("Patient with a cold."));
        assert_eq!(
            out,
            render_tree_prompt(&t, &note("Patient with a cold."), &cands).unwrap()
        );
        assert!(matches!(
            render_tree_prompt(&t, &note("x"), &[]),
            Err(TemplateError::NoCandidates)
        ));
    }

    #[test]
    fn coder_prompt_starts_with_instruction() {
        let t = PromptTemplate::builtin("coder").unwrap();
        let out = render_coder_prompt(&t, &note("A 40 year old man.")).unwrap();
        assert!(
            out.starts_with("You are a clinical coder, consider the case note and assign the appropriate ICD codes")
        );
        assert!(out.contains("A 40 year old man."));
        let tree = PromptTemplate::builtin("gpt-tree-search").unwrap();
        assert!(matches!(
            render_coder_prompt(&tree, &note("x")),
            Err(TemplateError::WrongKind { .. })
        ));
    }

    #[test]
    fn placeholder_validation() {
        let missing = "---\nid = \"t\"\nfamily = \"gpt\"\nkind = \"coder\"\n---\nno note here\n";
        assert!(matches!(
            PromptTemplate::parse(missing),
            Err(TemplateError::Placeholder {
                placeholder: "{case_note}",
                count: 0,
                ..
            })
        ));
        let twice = "---\nid = \"t\"\nfamily = \"gpt\"\nkind = \"tree_search\"\naffirmative_markers=[\"yes\"]\nnegative_markers=[\"no\"]\n---\n{case_note} {case_note} {code_descriptions}\n";
        assert!(matches!(
            PromptTemplate::parse(twice),
            Err(TemplateError::Placeholder { count: 2, .. })
        ));
        let overlap = "---\nid = \"t\"\nfamily = \"gpt\"\nkind = \"tree_search\"\naffirmative_markers=[\"yes\"]\nnegative_markers=[\"YES\"]\n---\n{case_note} {code_descriptions}\n";
        assert!(matches!(
            PromptTemplate::parse(overlap),
            Err(TemplateError::Invalid { .. })
        ));
        let no_markers =
            "---\nid = \"t\"\nfamily = \"gpt\"\nkind = \"tree_search\"\n---\n{case_note} {code_descriptions}\n";
        assert!(matches!(
            PromptTemplate::parse(no_markers),
            Err(TemplateError::Invalid { .. })
        ));
        assert!(matches!(
            PromptTemplate::parse("no header"),
            Err(TemplateError::Header(_))
        ));
    }

    #[test]
    fn placeholders_inside_note_are_not_expanded() {
        let t = PromptTemplate::builtin("gpt-tree-search").unwrap();
        let cands = vec![Candidate::new("X", "Asthma")];
        let out = render_tree_prompt(&t, &note("weird {code_descriptions} text"), &cands).unwrap();
        assert!(out.contains("weird {code_descriptions} text"));
        assert_eq!(out.matches("- Asthma").count(), 1);
    }

    #[test]
    fn custom_line_format_with_code() {
        let text = "---\nid = \"t\"\nfamily = \"llama\"\nkind = \"tree_search\"\ncandidate_line_format = \"* {code}: {description}\"\naffirmative_markers=[\"yes\"]\nnegative_markers=[\"no\"]\n---\n{code_descriptions}\n\n{case_note}\n";
        let t = PromptTemplate::parse(text).unwrap();
        let out = render_tree_prompt(&t, &note("N"), &[Candidate::new("J00", "Acute nasopharyngitis")]).unwrap();
        assert_eq!(out, "* J00: Acute nasopharyngitis\n\nN");
    }

    proptest! {
        #[test]
        fn descriptions_recoverable_and_notes_injective(
            descs in proptest::collection::vec("[A-Za-z' ,()-]{1,30}", 1..6),
            a in "\\PC{1,40}",
            b in "\\PC{1,40}",
        ) {
            let t = PromptTemplate::builtin("llama-tree-search").unwrap();
            let cands: Vec<Candidate> = descs.iter().enumerate()
                .map(|(i, d)| Candidate::new(format!("K{i}"), d.clone())).collect();
            let out = render_tree_prompt(&t, &note(&a), &cands).unwrap();
            for d in &descs {
                prop_assert!(out.contains(d.as_str()));
            }
            let coder = PromptTemplate::builtin("coder").unwrap();
            let pa = render_coder_prompt(&coder, &note(&a)).unwrap();
            let pb = render_coder_prompt(&coder, &note(&b)).unwrap();
            prop_assert_eq!(a == b, pa == pb);
        }
    }
}
