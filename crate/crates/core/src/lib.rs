//! LLM-guided tree search for assigning ICD codes to clinical case notes.

pub mod baseline;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod llm;
pub mod ontology;
pub mod parsing;
pub mod prompting;
pub mod report;
pub mod search;
