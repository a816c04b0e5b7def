//! Turning raw completion text into code predictions.
//!
//! Three matchers live here:
//! - [`match_code_descriptions`] reads a tree-search response against the
//!   candidates that were shown in the prompt, greedily trying the longest
//!   description first so that a description which is a substring of another
//!   never steals the longer one's line.
//! - [`extract_codes_by_id`] and [`extract_codes_by_description`] read the
//!   free-form answer of the single-prompt coder baseline.

use std::collections::{BTreeSet, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::normalize_code;
use crate::ontology::Ontology;

/// A code shown to the model together with its description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub code: String,
    pub description: String,
}

impl Candidate {
    pub fn new(code: impl Into<String>, description: impl Into<String>) -> Self {
        Candidate {
            code: code.into(),
            description: description.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Relevant,
    NotRelevant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDecision {
    pub code: String,
    pub polarity: Polarity,
    pub matched_line: String,
}

/// Words that flip a matched line to relevant or not relevant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Markers {
    pub affirmative: Vec<String>,
    pub negative: Vec<String>,
}

impl Default for Markers {
    fn default() -> Self {
        Markers {
            affirmative: vec!["relevant".into(), "yes".into(), "mentioned".into()],
            negative: vec![
                "not relevant".into(),
                "irrelevant".into(),
                "not mentioned".into(),
                "no".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Plain substring containment on normalized text.
    #[default]
    Substring,
    /// The description must start and end on a non-alphanumeric boundary.
    TokenBoundary,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub decisions: Vec<ParsedDecision>,
    /// Set when the response produced no decision at all.
    pub warning: Option<String>,
}

impl ParseOutcome {
    /// Codes judged relevant, in the order their decisions appear.
    pub fn relevant_codes(&self) -> impl Iterator<Item = &str> {
        self.decisions
            .iter()
            .filter(|d| d.polarity == Polarity::Relevant)
            .map(|d| d.code.as_str())
    }
}

/// Case-folds, maps typographic quotes to ASCII and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        let mapped = match ch {
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2032}' | '\u{00B4}' | '\u{0060}' => '\'',
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{2033}' | '\u{00AB}' | '\u{00BB}' => '"',
            c => c,
        };
        if mapped.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(mapped.to_lowercase());
    }
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// First occurrence of `needle` in `hay` that is not glued to word characters.
fn find_bounded(hay: &str, needle: &str) -> Option<usize> {
    let check_start = needle.chars().next().is_some_and(is_word_char);
    let check_end = needle.chars().next_back().is_some_and(is_word_char);
    hay.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before_ok = !check_start || hay[..i].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = !check_end || hay[i + needle.len()..].chars().next().is_none_or(|c| !is_word_char(c));
        before_ok && after_ok
    })
}

fn find_description(line: &str, description: &str, mode: MatchMode) -> Option<usize> {
    match mode {
        MatchMode::Substring => line.find(description),
        MatchMode::TokenBoundary => find_bounded(line, description),
    }
}

fn polarity_of(residual: &str, markers: &Markers) -> Polarity {
    let hit = |list: &[String]| {
        list.iter()
            .map(|m| normalize_text(m))
            .any(|m| !m.is_empty() && find_bounded(residual, &m).is_some())
    };
    if hit(&markers.negative) {
        Polarity::NotRelevant
    } else {
        // A bare restated description counts as a retrieved mention.
        Polarity::Relevant
    }
}

/// Resolves a tree-search response into per-candidate decisions.
///
/// Lines are read independently. Within a line, candidates are tried in
/// decreasing order of normalized description length (ties keep prompt
/// order) and the first one contained in the line claims it. Polarity is read
/// from what remains of the line once the description is cut out: a negative
/// marker wins, otherwise the line counts as relevant. Only the first
/// decision for a given code is kept.
pub fn match_code_descriptions(
    response: &str,
    candidates: &[Candidate],
    markers: &Markers,
    mode: MatchMode,
) -> ParseOutcome {
    let normalized: Vec<String> = candidates.iter().map(|c| normalize_text(&c.description)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).filter(|&i| !normalized[i].is_empty()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(normalized[i].chars().count()));

    let mut decided: HashSet<&str> = HashSet::new();
    let mut decisions = Vec::new();
    for line in response.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let norm_line = normalize_text(trimmed);
        let hit = order
            .iter()
            .find_map(|&i| find_description(&norm_line, &normalized[i], mode).map(|pos| (i, pos)));
        let Some((i, pos)) = hit else { continue };
        let code = candidates[i].code.as_str();
        if !decided.insert(code) {
            continue;
        }
        let residual = format!("{} {}", &norm_line[..pos], &norm_line[pos + normalized[i].len()..]);
        decisions.push(ParsedDecision {
            code: code.to_string(),
            polarity: polarity_of(&residual, markers),
            matched_line: trimmed.to_string(),
        });
    }

    let warning = if response.trim().is_empty() {
        Some("empty response".to_string())
    } else if decisions.is_empty() {
        Some("no candidate description found in response".to_string())
    } else {
        None
    };
    ParseOutcome { decisions, warning }
}

static CODE_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b[A-Z][0-9A-Z]{2}(?:\.?[0-9A-Z]{1,4})?\b").unwrap());

static LIST_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(?:[-*+\u{2022}]+|\d{1,3}[.)])\s*").unwrap());

// Leading code tokens must carry a digit in second position so that ordinary
// words ("Malignant") are never stripped.
static LEADING_CODE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^[A-Z][0-9][0-9A-Z](?:\.?[0-9A-Z]{1,4})?(?:\s*[-\u{2013}\u{2014}:]\s*|\s+|$)").unwrap()
});

/// Finds ICD-shaped tokens and keeps those that are assignable codes.
pub fn extract_codes_by_id(response: &str, ontology: &Ontology) -> BTreeSet<String> {
    CODE_TOKEN
        .find_iter(response)
        .map(|m| normalize_code(m.as_str()))
        .filter(|code| ontology.is_assignable(code).unwrap_or(false))
        .collect()
}

/// Matches whole response lines against the ontology's description index.
pub fn extract_codes_by_description(response: &str, ontology: &Ontology) -> BTreeSet<String> {
    response
        .lines()
        .filter_map(|line| {
            let line = line.trim();
            let line = LIST_MARKER.find(line).map_or(line, |m| &line[m.end()..]);
            let line = LEADING_CODE.find(line).map_or(line, |m| &line[m.end()..]);
            let key = normalize_text(line);
            if key.is_empty() {
                return None;
            }
            ontology.code_for_description(&key)
        })
        .filter(|code| ontology.is_assignable(code).unwrap_or(false))
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn legionella() -> Vec<Candidate> {
        vec![
            Candidate::new("A48.1", "Legionnaires' disease"),
            Candidate::new("A48.2", "Nonpneumonic Legionnaires' disease"),
        ]
    }

    fn ontology() -> Ontology {
        Ontology::parse(
            "ROOT\t\t0\t0\t\n\
             A00-B99\tROOT\t1\t0\tCertain infectious and parasitic diseases (A00-B99)\n\
             B27\tA00-B99\t2\t0\tInfectious mononucleosis\n\
             B27.8\tB27\t3\t0\tOther infectious mononucleosis\n\
             B27.80\tB27.8\t4\t1\tOther infectious mononucleosis without complication\n\
             B27.89\tB27.8\t4\t1\tOther infectious mononucleosis with other complication\n\
             C00-D49\tROOT\t1\t0\tNeoplasms (C00-D49)\n\
             C63\tC00-D49\t2\t0\tMalignant neoplasm of other and unspecified male genital organs\n\
             C63.2\tC63\t3\t1\tMalignant neoplasm of scrotum\n",
        )
        .unwrap()
    }

    #[test]
    fn longer_description_claims_its_line() {
        let out = match_code_descriptions(
            "- Nonpneumonic Legionnaires' disease: relevant",
            &legionella(),
            &Markers::default(),
            MatchMode::Substring,
        );
        assert_eq!(out.decisions.len(), 1);
        assert_eq!(out.decisions[0].code, "A48.2");
        assert_eq!(out.decisions[0].polarity, Polarity::Relevant);
        assert!(out.warning.is_none());
    }

    #[test]
    fn shorter_description_still_matches_its_own_line() {
        let out = match_code_descriptions(
            "- Legionnaires\u{2019} disease: not relevant",
            &legionella(),
            &Markers::default(),
            MatchMode::Substring,
        );
        assert_eq!(out.decisions.len(), 1);
        assert_eq!(out.decisions[0].code, "A48.1");
        assert_eq!(out.decisions[0].polarity, Polarity::NotRelevant);
    }

    #[test]
    fn empty_response_warns() {
        let out = match_code_descriptions("  \n", &legionella(), &Markers::default(), MatchMode::Substring);
        assert!(out.decisions.is_empty());
        assert_eq!(out.warning.as_deref(), Some("empty response"));
        let out = match_code_descriptions(
            "nothing useful",
            &legionella(),
            &Markers::default(),
            MatchMode::Substring,
        );
        assert!(out.warning.is_some());
    }

    #[test]
    fn polarity_rules() {
        let cands = vec![Candidate::new("X", "Acute bronchitis")];
        let check = |line: &str| {
            match_code_descriptions(line, &cands, &Markers::default(), MatchMode::Substring).decisions[0].polarity
        };
        assert_eq!(check("Acute bronchitis"), Polarity::Relevant);
        assert_eq!(check("* Acute bronchitis - Yes"), Polarity::Relevant);
        assert_eq!(check("Acute bronchitis: irrelevant"), Polarity::NotRelevant);
        assert_eq!(check("Acute bronchitis: relevant, not relevant"), Polarity::NotRelevant);
        assert_eq!(check("Acute bronchitis: No"), Polarity::NotRelevant);
        // "no" inside a word is not a marker
        assert_eq!(check("Acute bronchitis: noted in history"), Polarity::Relevant);
    }

    #[test]
    fn first_decision_per_code_wins() {
        let cands = vec![Candidate::new("X", "Asthma"), Candidate::new("Y", "Gout")];
        let out = match_code_descriptions(
            "Asthma: relevant\nAsthma: not relevant\nGout: not relevant",
            &cands,
            &Markers::default(),
            MatchMode::Substring,
        );
        assert_eq!(out.decisions.len(), 2);
        assert_eq!(out.relevant_codes().collect::<Vec<_>>(), ["X"]);
    }

    #[test]
    fn equal_length_tie_prefers_prompt_order() {
        let cands = vec![Candidate::new("P", "alpha"), Candidate::new("Q", "gamma")];
        let out = match_code_descriptions("gamma and alpha", &cands, &Markers::default(), MatchMode::Substring);
        assert_eq!(out.decisions[0].code, "P");
    }

    #[test]
    fn token_boundary_mode() {
        let cands = vec![Candidate::new("G", "gout")];
        let sub = match_code_descriptions("- goutlike pain", &cands, &Markers::default(), MatchMode::Substring);
        assert_eq!(sub.decisions.len(), 1);
        let tok = match_code_descriptions("- goutlike pain", &cands, &Markers::default(), MatchMode::TokenBoundary);
        assert!(tok.decisions.is_empty());
        let tok = match_code_descriptions("- gout: yes", &cands, &Markers::default(), MatchMode::TokenBoundary);
        assert_eq!(tok.decisions.len(), 1);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("Legionnaires\u{2019} disease"), "legionnaires' disease");
        assert_eq!(normalize_text("  Foo   Bar "), "foo bar");
        assert_eq!(normalize_text("\u{201C}Quoted\u{201D}\tTEXT\n"), "\"quoted\" text");
        assert_eq!(normalize_text("Crohn's disease, (K50)"), "crohn's disease, (k50)");
    }

    #[test]
    fn code_ids_kept_despite_wrong_description() {
        let o = ontology();
        let codes = extract_codes_by_id("C63.2 - Malignant neoplasm of left testis", &o);
        assert_eq!(codes.into_iter().collect::<Vec<_>>(), ["C63.2"]);
        assert!(extract_codes_by_id("no codes apply", &o).is_empty());
        let codes = extract_codes_by_id("b27.89 and also b2789", &o);
        assert_eq!(codes.into_iter().collect::<Vec<_>>(), ["B27.89"]);
        // non-assignable codes are dropped
        assert!(extract_codes_by_id("B27.8, B27", &o).is_empty());
    }

    #[test]
    fn description_matching() {
        let o = ontology();
        assert!(extract_codes_by_description("C63.2 - Malignant neoplasm of left testis", &o).is_empty());
        let hit = extract_codes_by_description("Malignant neoplasm of scrotum", &o);
        assert_eq!(hit.into_iter().collect::<Vec<_>>(), ["C63.2"]);
        for variant in [
            "  MALIGNANT   neoplasm of Scrotum ",
            "- Malignant neoplasm of scrotum",
            "2. C63.2: Malignant neoplasm of scrotum",
            "* C632 \u{2013} malignant neoplasm of scrotum",
        ] {
            let hit = extract_codes_by_description(variant, &o);
            assert_eq!(hit.into_iter().collect::<Vec<_>>(), ["C63.2"], "{variant}");
        }
        // internal node descriptions are not predictions
        assert!(extract_codes_by_description("Infectious mononucleosis", &o).is_empty());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
        }

        #[test]
        fn decisions_bounded_by_lines(
            lines in proptest::collection::vec("[a-z ]{0,12}", 0..8),
            descs in proptest::collection::vec("[a-z]{1,4}", 1..6),
        ) {
            let cands: Vec<Candidate> = descs.iter().enumerate()
                .map(|(i, d)| Candidate::new(format!("K{i}"), d.clone())).collect();
            let response = lines.join("\n");
            let a = match_code_descriptions(&response, &cands, &Markers::default(), MatchMode::Substring);
            let b = match_code_descriptions(&response, &cands, &Markers::default(), MatchMode::Substring);
            prop_assert!(a.decisions.len() <= response.lines().count());
            prop_assert_eq!(a, b);
        }
    }
}
