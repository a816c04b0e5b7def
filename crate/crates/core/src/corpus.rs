//! Case notes and document-level label sets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::Ontology;

/// Document id → set of codes. Used for gold labels and predictions alike.
pub type LabelSets = BTreeMap<String, BTreeSet<String>>;

#[derive(Error, Debug)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no .txt documents found in {0}")]
    EmptyDirectory(PathBuf),
    #[error("duplicate document id {0}")]
    DuplicateDocId(String),
    #[error("document {0} is empty")]
    EmptyDocument(String),
    #[error("{path}:{line}: malformed label row: {reason}")]
    MalformedRow { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseNote {
    pub doc_id: String,
    pub text: String,
}

/// Counts of distinct (document, code) pairs by outcome of the assignability
/// filter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub unknown: usize,
    pub non_assignable: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldLabels {
    pub labels: LabelSets,
    pub report: FilterReport,
}

/// Canonical code form: trimmed, upper-cased, dotted after the third
/// character.
pub fn normalize_code(raw: &str) -> String {
    let upper = raw.trim().to_uppercase();
    if upper.chars().count() > 3 && !upper.contains('.') {
        let split = upper.char_indices().nth(3).map(|(i, _)| i).unwrap_or(upper.len());
        format!("{}.{}", &upper[..split], &upper[split..])
    } else {
        upper
    }
}

/// Reads every `.txt` file in `dir`; the file stem is the document id.
pub fn load_documents(dir: impl AsRef<Path>) -> Result<Vec<CaseNote>, CorpusError> {
    let dir = dir.as_ref();
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    let mut notes = Vec::new();
    let mut seen = HashSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_txt = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("txt"));
        if !is_txt || !path.is_file() {
            continue;
        }
        let doc_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if !seen.insert(doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId(doc_id));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        if text.trim().is_empty() {
            return Err(CorpusError::EmptyDocument(doc_id));
        }
        notes.push(CaseNote { doc_id, text });
    }
    if notes.is_empty() {
        return Err(CorpusError::EmptyDirectory(dir.to_path_buf()));
    }
    notes.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    Ok(notes)
}

/// Parses `doc_id<TAB>code` rows into sets, normalizing codes. Blank lines
/// are skipped.
pub fn parse_label_rows(text: &str, path: &Path) -> Result<LabelSets, CorpusError> {
    let mut out = LabelSets::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let malformed = |reason: &str| CorpusError::MalformedRow {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: reason.to_string(),
        };
        if fields.len() != 2 {
            return Err(malformed(&format!(
                "expected 2 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let doc_id = fields[0].trim();
        let code = normalize_code(fields[1]);
        if doc_id.is_empty() || code.is_empty() {
            return Err(malformed("empty doc_id or code"));
        }
        out.entry(doc_id.to_string()).or_default().insert(code);
    }
    Ok(out)
}

/// Reads a label file without any ontology filtering.
pub fn read_label_file(path: impl AsRef<Path>) -> Result<LabelSets, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_label_rows(&text, path)
}

/// Keeps only codes that exist and are assignable in `ontology`.
///
/// Documents whose every label was dropped stay in the map with an empty set.
pub fn filter_assignable(raw: LabelSets, ontology: &Ontology) -> GoldLabels {
    let mut report = FilterReport::default();
    let mut labels = LabelSets::new();
    for (doc_id, codes) in raw {
        let mut kept = BTreeSet::new();
        for code in codes {
            match ontology.is_assignable(&code) {
                Ok(true) => {
                    report.kept += 1;
                    kept.insert(code);
                }
                Ok(false) => {
                    log::debug!("{doc_id}: dropping non-assignable gold code {code}");
                    report.non_assignable += 1;
                }
                Err(_) => {
                    log::debug!("{doc_id}: dropping unknown gold code {code}");
                    report.unknown += 1;
                }
            }
        }
        labels.insert(doc_id, kept);
    }
    GoldLabels { labels, report }
}

pub fn load_gold_labels(path: impl AsRef<Path>, ontology: &Ontology) -> Result<GoldLabels, CorpusError> {
    let gold = filter_assignable(read_label_file(path)?, ontology);
    if gold.report.unknown + gold.report.non_assignable > 0 {
        log::info!(
            "gold filter dropped {} unknown and {} non-assignable labels, kept {}",
            gold.report.unknown,
            gold.report.non_assignable,
            gold.report.kept
        );
    }
    Ok(gold)
}

/// Renders label sets as sorted `doc_id<TAB>code` rows.
pub fn format_label_rows(labels: &LabelSets) -> String {
    let mut out = String::new();
    for (doc_id, codes) in labels {
        for code in codes {
            out.push_str(doc_id);
            out.push('\t');
            out.push_str(code);
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ontology() -> Ontology {
        Ontology::parse(
            "ROOT\t\t0\t0\t\n\
             A00-B99\tROOT\t1\t0\tCertain infectious and parasitic diseases (A00-B99)\n\
             B27\tA00-B99\t2\t0\tInfectious mononucleosis\n\
             B27.8\tB27\t3\t0\tOther infectious mononucleosis\n\
             B27.80\tB27.8\t4\t1\tOther infectious mononucleosis without complication\n\
             B27.89\tB27.8\t4\t1\tOther infectious mononucleosis with other complication\n",
        )
        .unwrap()
    }

    #[test]
    fn code_normalization() {
        assert_eq!(normalize_code("b2789"), "B27.89");
        assert_eq!(normalize_code(" b27.89 "), "B27.89");
        assert_eq!(normalize_code("j00"), "J00");
        assert_eq!(normalize_code("s52521a"), "S52.521A");
    }

    #[test]
    fn documents_sorted_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_documents(dir.path()),
            Err(CorpusError::EmptyDirectory(_))
        ));

        fs::write(
            dir.path().join("S0212-71992006000100006-1.txt"),
            "Fever and sore throat.",
        )
        .unwrap();
        let notes = load_documents(dir.path()).unwrap();
        assert_eq!(notes.len(), 1);
        assert_eq!(notes[0].doc_id, "S0212-71992006000100006-1");

        fs::write(dir.path().join("A-1.txt"), "Cough.").unwrap();
        fs::write(dir.path().join("ignored.md"), "not a note").unwrap();
        let notes = load_documents(dir.path()).unwrap();
        let ids: Vec<_> = notes.iter().map(|n| n.doc_id.as_str()).collect();
        assert_eq!(ids, ["A-1", "S0212-71992006000100006-1"]);

        fs::write(dir.path().join("A-1.TXT"), "again").unwrap();
        // Case-sensitive filesystems can hold both spellings.
        if dir.path().join("A-1.TXT").exists() && dir.path().join("A-1.txt").exists() {
            assert!(matches!(
                load_documents(dir.path()),
                Err(CorpusError::DuplicateDocId(_))
            ));
        }
    }

    #[test]
    fn empty_note_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("d1.txt"), "  \n").unwrap();
        assert!(matches!(load_documents(dir.path()), Err(CorpusError::EmptyDocument(_))));
    }

    #[test]
    fn gold_dedup_and_filtering() {
        let o = ontology();
        let raw = parse_label_rows(
            "d1\tB27.89\nd1\tb2789\nd1\tB27.8\nd1\tZ99.9\nd2\tB27.80\n",
            Path::new("x"),
        )
        .unwrap();
        let gold = filter_assignable(raw, &o);
        assert_eq!(gold.labels["d1"].iter().collect::<Vec<_>>(), ["B27.89"]);
        assert_eq!(gold.labels["d2"].len(), 1);
        assert_eq!(
            gold.report,
            FilterReport {
                unknown: 1,
                non_assignable: 1,
                kept: 2
            }
        );
        let json = serde_json::to_string(&gold.report).unwrap();
        assert_eq!(json, r#"{"unknown":1,"non_assignable":1,"kept":2}"#);
    }

    #[test]
    fn malformed_row() {
        let err = parse_label_rows("d1\tB27.89\nbroken\n", Path::new("gold.tsv")).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRow { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn gold_load_is_order_insensitive(
            rows in proptest::collection::vec((0usize..3, 0usize..5), 0..20),
            seed in any::<u64>(),
        ) {
            let codes = ["B27.80", "B27.89", "B27.8", "Q00.0", "b2780"];
            let render = |rows: &[(usize, usize)]| rows.iter()
                .map(|(d, c)| format!("d{d}\t{}\n", codes[*c]))
                .collect::<String>();
            let mut shuffled = rows.clone();
            let n = shuffled.len();
            if n > 1 {
                let k = (seed as usize) % n;
                shuffled.rotate_left(k);
                shuffled.reverse();
            }
            let o = ontology();
            let a = filter_assignable(parse_label_rows(&render(&rows), Path::new("a")).unwrap(), &o);
            let b = filter_assignable(parse_label_rows(&render(&shuffled), Path::new("b")).unwrap(), &o);
            prop_assert_eq!(&a, &b);
            // idempotent: filtering the kept labels again drops nothing
            let again = filter_assignable(a.labels.clone(), &o);
            prop_assert_eq!(&again.labels, &a.labels);
            prop_assert_eq!(again.report.kept, a.report.kept);
            for codes in a.labels.values() {
                for c in codes {
                    prop_assert!(o.is_assignable(c).unwrap());
                }
            }
        }
    }
}
