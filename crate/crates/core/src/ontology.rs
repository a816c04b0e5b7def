//! In-memory model of a hierarchical code ontology.
//!
//! The ontology is read from a flat tab-separated file, one node per line:
//!
//! ```text
//! code<TAB>parent_code<TAB>level<TAB>assignable(0|1)<TAB>description
//! ```
//!
//! The root sentinel is the literal code `ROOT` with an empty parent and level
//! 0. Lines starting with `#` are comments. Line order defines child order, and
//! child order is the order candidates are shown to the model.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parsing::normalize_text;

/// Code of the root sentinel node.
pub const ROOT_CODE: &str = "ROOT";

#[derive(Error, Debug)]
pub enum OntologyError {
    #[error("cannot read ontology file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed row: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate code {code}")]
    DuplicateCode { line: usize, code: String },
    #[error("line {line}: code {code} references unknown parent {parent}")]
    OrphanParent { line: usize, code: String, parent: String },
    #[error("ontology has no ROOT row")]
    MissingRoot,
    #[error("cycle detected; codes unreachable from ROOT: {}", .codes.join(", "))]
    Cycle { codes: Vec<String> },
    #[error("code {code} declares level {declared} but sits at depth {actual}")]
    LevelMismatch { code: String, declared: u8, actual: usize },
    #[error("code {code}: assignable={assignable} but leaf={leaf}; the default loader requires assignable codes to be exactly the leaves")]
    AssignabilityMismatch { code: String, assignable: bool, leaf: bool },
    #[error("duplicate normalized descriptions: {}", format_collisions(.collisions))]
    DuplicateDescription { collisions: BTreeMap<String, Vec<String>> },
    #[error("unknown code {0}")]
    UnknownCode(String),
    #[error("the root sentinel has no description")]
    RootQueried,
    #[error("level must be at least 1, got {0}")]
    InvalidLevel(u8),
}

fn format_collisions(collisions: &BTreeMap<String, Vec<String>>) -> String {
    collisions
        .iter()
        .map(|(desc, codes)| format!("\"{desc}\" <- [{}]", codes.join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Depth of a node below the root. The root is level 0, chapters are level 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Level(pub u8);

impl Level {
    pub const ROOT: Level = Level(0);
    pub const CHAPTER: Level = Level(1);
    pub const BLOCK: Level = Level(2);
    pub const CATEGORY: Level = Level(3);
    pub const SUBCATEGORY: Level = Level(4);
    pub const EXTENSION_I: Level = Level(5);
    pub const EXTENSION_II: Level = Level(6);

    pub fn name(self) -> String {
        match self.0 {
            0 => "Root".to_string(),
            1 => "Chapter".to_string(),
            2 => "Block".to_string(),
            3 => "Category".to_string(),
            4 => "Subcategory".to_string(),
            5 => "Extension I".to_string(),
            6 => "Extension II".to_string(),
            n => format!("Level {n}"),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub code: String,
    pub description: String,
    pub level: Level,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub assignable: bool,
}

impl ConceptNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// One row of the flat ontology file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub code: String,
    pub parent: Option<String>,
    pub level: u8,
    pub assignable: bool,
    pub description: String,
}

impl NodeRecord {
    pub fn root() -> Self {
        NodeRecord {
            code: ROOT_CODE.to_string(),
            parent: None,
            level: 0,
            assignable: false,
            description: String::new(),
        }
    }

    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.code,
            self.parent.as_deref().unwrap_or(""),
            self.level,
            u8::from(self.assignable),
            self.description
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// When set, the assignable column must agree with leaf status.
    pub require_leaf_assignable: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            require_leaf_assignable: true,
        }
    }
}

/// A validated, immutable code tree.
#[derive(Debug, Clone)]
pub struct Ontology {
    nodes: HashMap<String, ConceptNode>,
    /// Codes in file order, root first.
    order: Vec<String>,
    description_index: HashMap<String, String>,
    max_level: Level,
}

impl Ontology {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OntologyError> {
        Self::load_with(path, LoadOptions::default())
    }

    pub fn load_with(path: impl AsRef<Path>, options: LoadOptions) -> Result<Self, OntologyError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| OntologyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_with(&text, options)
    }

    pub fn parse(text: &str) -> Result<Self, OntologyError> {
        Self::parse_with(text, LoadOptions::default())
    }

    pub fn parse_with(text: &str, options: LoadOptions) -> Result<Self, OntologyError> {
        let mut records = Vec::new();
        let mut line_numbers = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            records.push(parse_row(line, line_no)?);
            line_numbers.push(line_no);
        }
        Self::build(records, &line_numbers, options)
    }

    /// Builds an ontology from records in file order.
    pub fn from_records(records: Vec<NodeRecord>, options: LoadOptions) -> Result<Self, OntologyError> {
        let line_numbers: Vec<usize> = (1..=records.len()).collect();
        for (record, &line) in records.iter().zip(&line_numbers) {
            validate_record(record, line)?;
        }
        Self::build(records, &line_numbers, options)
    }

    fn build(records: Vec<NodeRecord>, line_numbers: &[usize], options: LoadOptions) -> Result<Self, OntologyError> {
        let mut nodes: HashMap<String, ConceptNode> = HashMap::with_capacity(records.len());
        let mut order = Vec::with_capacity(records.len());
        let mut declared_levels = HashMap::with_capacity(records.len());

        for (record, &line) in records.iter().zip(line_numbers) {
            if nodes.contains_key(&record.code) {
                return Err(OntologyError::DuplicateCode {
                    line,
                    code: record.code.clone(),
                });
            }
            declared_levels.insert(record.code.clone(), record.level);
            order.push(record.code.clone());
            nodes.insert(
                record.code.clone(),
                ConceptNode {
                    code: record.code.clone(),
                    description: record.description.clone(),
                    level: Level(record.level),
                    parent: record.parent.clone(),
                    children: Vec::new(),
                    assignable: record.assignable,
                },
            );
        }
        if !nodes.contains_key(ROOT_CODE) {
            return Err(OntologyError::MissingRoot);
        }

        for (record, &line) in records.iter().zip(line_numbers) {
            if let Some(parent) = &record.parent {
                match nodes.get_mut(parent) {
                    Some(p) => p.children.push(record.code.clone()),
                    None => {
                        return Err(OntologyError::OrphanParent {
                            line,
                            code: record.code.clone(),
                            parent: parent.clone(),
                        })
                    }
                }
            }
        }

        // Every non-root node has an existing parent, so anything unreachable
        // from the root must lie on or under a cycle.
        let mut depth: HashMap<&str, usize> = HashMap::with_capacity(nodes.len());
        let mut queue = VecDeque::from([(ROOT_CODE, 0usize)]);
        while let Some((code, d)) = queue.pop_front() {
            depth.insert(code, d);
            for child in &nodes[code].children {
                queue.push_back((child.as_str(), d + 1));
            }
            if depth.len() > nodes.len() {
                break;
            }
        }
        if depth.len() != nodes.len() {
            let mut codes: Vec<String> = order
                .iter()
                .filter(|c| !depth.contains_key(c.as_str()))
                .cloned()
                .collect();
            codes.sort();
            return Err(OntologyError::Cycle { codes });
        }

        for code in &order {
            let actual = depth[code.as_str()];
            let declared = declared_levels[code];
            if usize::from(declared) != actual {
                return Err(OntologyError::LevelMismatch {
                    code: code.clone(),
                    declared,
                    actual,
                });
            }
        }

        if options.require_leaf_assignable {
            for code in order.iter().filter(|c| c.as_str() != ROOT_CODE) {
                let node = &nodes[code];
                if node.assignable != node.is_leaf() {
                    return Err(OntologyError::AssignabilityMismatch {
                        code: code.clone(),
                        assignable: node.assignable,
                        leaf: node.is_leaf(),
                    });
                }
            }
        }

        let mut by_description: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for code in order.iter().filter(|c| c.as_str() != ROOT_CODE) {
            by_description
                .entry(normalize_text(&nodes[code].description))
                .or_default()
                .push(code.clone());
        }
        let collisions: BTreeMap<String, Vec<String>> = by_description
            .iter()
            .filter(|(_, codes)| codes.len() > 1)
            .map(|(d, c)| (d.clone(), c.clone()))
            .collect();
        if !collisions.is_empty() {
            return Err(OntologyError::DuplicateDescription { collisions });
        }
        let description_index = by_description
            .into_iter()
            .map(|(desc, mut codes)| (desc, codes.remove(0)))
            .collect();

        let max_level = nodes.values().map(|n| n.level).max().unwrap_or(Level::ROOT);

        Ok(Ontology {
            nodes,
            order,
            description_index,
            max_level,
        })
    }

    pub fn root(&self) -> &ConceptNode {
        &self.nodes[ROOT_CODE]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn contains(&self, code: &str) -> bool {
        self.nodes.contains_key(code)
    }

    pub fn node(&self, code: &str) -> Result<&ConceptNode, OntologyError> {
        self.nodes
            .get(code)
            .ok_or_else(|| OntologyError::UnknownCode(code.to_string()))
    }

    /// Children of `code` in file order; empty for leaves.
    pub fn children(&self, code: &str) -> Result<Vec<&ConceptNode>, OntologyError> {
        Ok(self.node(code)?.children.iter().map(|c| &self.nodes[c]).collect())
    }

    pub fn child_codes(&self, code: &str) -> Result<&[String], OntologyError> {
        Ok(&self.node(code)?.children)
    }

    pub fn is_assignable(&self, code: &str) -> Result<bool, OntologyError> {
        Ok(self.node(code)?.assignable)
    }

    pub fn description(&self, code: &str) -> Result<&str, OntologyError> {
        let node = self.node(code)?;
        if code == ROOT_CODE {
            return Err(OntologyError::RootQueried);
        }
        Ok(&node.description)
    }

    pub fn level(&self, code: &str) -> Result<Level, OntologyError> {
        Ok(self.node(code)?.level)
    }

    pub fn parent(&self, code: &str) -> Result<Option<&str>, OntologyError> {
        Ok(self.node(code)?.parent.as_deref())
    }

    /// Strict ancestors of `code` below the root, nearest first.
    pub fn ancestors(&self, code: &str) -> Result<Vec<&str>, OntologyError> {
        let mut out = Vec::new();
        let mut current = self.node(code)?;
        while let Some(parent) = current.parent.as_deref() {
            if parent == ROOT_CODE {
                break;
            }
            out.push(parent);
            current = &self.nodes[parent];
        }
        Ok(out)
    }

    /// The ancestor-or-self of `code` at `level`, or `None` when the code sits
    /// above that level.
    pub fn ancestor_at_level(&self, code: &str, level: Level) -> Result<Option<&str>, OntologyError> {
        if level.0 == 0 {
            return Err(OntologyError::InvalidLevel(level.0));
        }
        let mut current = self.node(code)?;
        if current.level < level {
            return Ok(None);
        }
        while current.level > level {
            // Parent chains are validated at load time.
            current = &self.nodes[current.parent.as_deref().expect("non-root node has a parent")];
        }
        Ok(Some(&current.code))
    }

    /// Looks up a code by its normalized description.
    pub fn code_for_description(&self, normalized: &str) -> Option<&str> {
        self.description_index.get(normalized).map(String::as_str)
    }

    /// All nodes in file order, root first.
    pub fn iter(&self) -> impl Iterator<Item = &ConceptNode> {
        self.order.iter().map(|c| &self.nodes[c])
    }

    pub fn assignable_codes(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|n| n.assignable).map(|n| n.code.as_str())
    }

    /// Deepest level present in the tree.
    pub fn max_level(&self) -> Level {
        self.max_level
    }

    /// Serializes the tree back into the flat file format.
    pub fn to_flat_file(&self) -> String {
        let mut out = String::new();
        for node in self.iter() {
            let record = NodeRecord {
                code: node.code.clone(),
                parent: node.parent.clone(),
                level: node.level.0,
                assignable: node.assignable,
                description: node.description.clone(),
            };
            out.push_str(&record.to_line());
            out.push('\n');
        }
        out
    }
}

fn parse_row(line: &str, line_no: usize) -> Result<NodeRecord, OntologyError> {
    let malformed = |reason: String| OntologyError::Malformed { line: line_no, reason };
    let fields: Vec<&str> = line.splitn(5, '\t').collect();
    if fields.len() != 5 {
        return Err(malformed(format!(
            "expected 5 tab-separated fields, found {}",
            fields.len()
        )));
    }
    let code = fields[0].trim();
    let parent = fields[1].trim();
    let level: u8 = fields[2]
        .trim()
        .parse()
        .map_err(|_| malformed(format!("level {:?} is not a small integer", fields[2])))?;
    let assignable = match fields[3].trim() {
        "0" => false,
        "1" => true,
        other => return Err(malformed(format!("assignable flag must be 0 or 1, got {other:?}"))),
    };
    let record = NodeRecord {
        code: code.to_string(),
        parent: (!parent.is_empty()).then(|| parent.to_string()),
        level,
        assignable,
        description: fields[4].to_string(),
    };
    validate_record(&record, line_no)?;
    Ok(record)
}

fn validate_record(record: &NodeRecord, line: usize) -> Result<(), OntologyError> {
    let malformed = |reason: &str| OntologyError::Malformed {
        line,
        reason: format!("{}: {reason}", record.code),
    };
    if record.code.is_empty() {
        return Err(malformed("empty code"));
    }
    if record.code == ROOT_CODE {
        if record.parent.is_some() {
            return Err(malformed("ROOT must not have a parent"));
        }
        if record.level != 0 {
            return Err(malformed("ROOT must be level 0"));
        }
        return Ok(());
    }
    if record.parent.is_none() {
        return Err(malformed("missing parent code"));
    }
    if record.parent.as_deref() == Some(record.code.as_str()) {
        return Err(malformed("node is its own parent"));
    }
    if record.description.trim().is_empty() {
        return Err(malformed("empty description"));
    }
    Ok(())
}
