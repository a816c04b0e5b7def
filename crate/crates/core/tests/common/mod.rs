#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use icd_treesearch::config::RunConfig;
use icd_treesearch::corpus::{CaseNote, LabelSets};
use icd_treesearch::ontology::{LoadOptions, NodeRecord, Ontology, ROOT_CODE};
use rand::seq::IndexedRandom;
use rand::Rng;

// Marker words ("no", "not", "yes", "relevant", ...) are deliberately absent
// so generated lines carry polarity only in their suffix. A small vocabulary
// makes substring-related descriptions common.
pub const VOCAB: [&str; 16] = [
    "acute", "chronic", "lesion", "fever", "renal", "cardiac", "valve", "nerve", "bone", "skin", "viral", "lung",
    "upper", "lower", "left", "right",
];

pub fn random_phrase<R: Rng>(rng: &mut R, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    (0..n)
        .map(|_| *VOCAB.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A random tree below ROOT with depth at most `max_depth` and at most
/// `max_nodes` non-root nodes. Leaves are assignable; descriptions are
/// unique phrases over [`VOCAB`].
pub fn random_tree<R: Rng>(rng: &mut R, max_depth: u8, max_nodes: usize) -> Ontology {
    let mut records = vec![NodeRecord::root()];
    let mut used = HashSet::new();
    let mut frontier = vec![(ROOT_CODE.to_string(), 0u8)];
    let mut next = 0usize;
    while let Some((parent, level)) = (!frontier.is_empty()).then(|| frontier.remove(0)) {
        let n_children = if level == 0 {
            rng.random_range(2..=5)
        } else {
            rng.random_range(1..=5)
        };
        for _ in 0..n_children {
            // `records` also holds ROOT.
            if records.len() > max_nodes {
                break;
            }
            let code = format!("N{next}");
            next += 1;
            let description = loop {
                let phrase = random_phrase(rng, 4);
                if used.insert(phrase.clone()) {
                    break phrase;
                }
            };
            records.push(NodeRecord {
                code: code.clone(),
                parent: Some(parent.clone()),
                level: level + 1,
                assignable: false,
                description,
            });
            let expand = level + 1 < max_depth && rng.random_bool(0.7);
            if expand {
                frontier.push((code, level + 1));
            }
        }
    }
    let parents: HashSet<String> = records.iter().filter_map(|r| r.parent.clone()).collect();
    for r in records.iter_mut().skip(1) {
        r.assignable = !parents.contains(&r.code);
    }
    Ontology::from_records(records, LoadOptions::default()).expect("generated tree is valid")
}

/// Random non-empty gold sets of assignable codes for `n_docs` documents.
pub fn random_gold<R: Rng>(rng: &mut R, ontology: &Ontology, n_docs: usize, max_labels: usize) -> LabelSets {
    let leaves: Vec<&str> = ontology.assignable_codes().collect();
    (0..n_docs)
        .map(|d| {
            let k = rng.random_range(1..=max_labels.min(leaves.len()));
            let codes: BTreeSet<String> = leaves.choose_multiple(rng, k).map(|c| c.to_string()).collect();
            (format!("doc-{d:04}"), codes)
        })
        .collect()
}

pub fn notes_for(gold: &LabelSets) -> Vec<CaseNote> {
    gold.keys()
        .map(|d| CaseNote {
            doc_id: d.clone(),
            text: format!("Synthetic note {d}."),
        })
        .collect()
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// The committed replay configuration with outputs redirected.
pub fn fixture_config(output_dir: &Path, workers: usize) -> RunConfig {
    let mut config = RunConfig::load(fixture_dir().join("run.toml")).expect("fixture config loads");
    config.output_dir = output_dir.to_path_buf();
    config.workers = workers;
    config
}

pub fn golden(path: &str) -> String {
    std::fs::read_to_string(fixture_dir().join("golden").join(path)).expect("golden file exists")
}
