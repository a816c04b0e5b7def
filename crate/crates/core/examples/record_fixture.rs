//! Regenerates the replay fixture and golden outputs under tests/fixtures.
//!
//! A scripted stand-in model answers every prompt: per document it holds a
//! fixed set of codes it "believes" relevant (with deliberate misses and false
//! alarms) and renders its answer in one of a few styles. Responses are
//! recorded through the cache wrapper into tests/fixtures/replay; the golden
//! files are then produced by replaying those entries through the CLI
//! pipeline.
//!
//! Run with `cargo run --example record_fixture`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use icd_treesearch::baseline::{run_coder, BaselineMode};
use icd_treesearch::cli::{execute, Pipeline, Status};
use icd_treesearch::config::RunConfig;
use icd_treesearch::corpus::{load_documents, load_gold_labels, read_label_file};
use icd_treesearch::eval::{evaluate, level_analysis, ClassSetPolicy};
use icd_treesearch::llm::{
    cache_clear, CachedBackend, CompletionBackend, CompletionRequest, CompletionResponse, LlmError,
};
use icd_treesearch::ontology::Ontology;
use icd_treesearch::prompting::PromptTemplate;
use icd_treesearch::report;
use icd_treesearch::search::{read_traces, run_corpus, run_parallel, SearchSettings};

#[derive(Clone, Copy)]
enum Style {
    /// `- description: relevant`
    Bullets,
    /// `1. description - Yes, ...`
    Numbered,
    /// Free-text preamble, then `description: Relevant`.
    Prose,
}

struct Persona {
    style: Style,
    believes: HashSet<&'static str>,
    /// Parent code whose children get an answer that names no candidate.
    garbled_at: Option<&'static str>,
    curly_quotes: bool,
    coder_answer: &'static str,
}

struct ScriptedModel {
    ontology: Arc<Ontology>,
    personas: HashMap<&'static str, Persona>,
}

impl ScriptedModel {
    fn answer(&self, persona: &Persona, candidates: &[String]) -> String {
        let parent = candidates
            .first()
            .and_then(|c| self.ontology.parent(c).ok().flatten())
            .unwrap_or_default();
        if persona.garbled_at == Some(parent) {
            return "The note documents a temperature of 38.2 C on admission; I cannot say more without further history."
                .to_string();
        }
        let mut lines = Vec::new();
        if let Style::Prose = persona.style {
            lines.push("Here is my assessment of each option given the case note:".to_string());
            lines.push(String::new());
        }
        for (i, code) in candidates.iter().enumerate() {
            let desc = self.ontology.description(code).expect("candidate in ontology");
            let yes = persona.believes.contains(code.as_str());
            lines.push(match (persona.style, yes) {
                (Style::Bullets, true) => format!("- {desc}: relevant"),
                (Style::Bullets, false) => format!("- {desc}: not relevant"),
                (Style::Numbered, true) => format!("{}. {desc} - Yes, supported by the case note.", i + 1),
                (Style::Numbered, false) => format!("{}. {desc} - No.", i + 1),
                (Style::Prose, true) => format!("{desc}: Relevant"),
                (Style::Prose, false) => format!("{desc}: Not relevant"),
            });
        }
        let text = lines.join("\n");
        if persona.curly_quotes {
            text.replace('\'', "\u{2019}")
        } else {
            text
        }
    }
}

impl CompletionBackend for ScriptedModel {
    fn backend_id(&self) -> String {
        "scripted-fixture-model".into()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let ctx = request.context.as_ref().ok_or(LlmError::MissingContext)?;
        let persona = self
            .personas
            .get(ctx.doc_id.as_str())
            .ok_or_else(|| LlmError::UnknownDocument(ctx.doc_id.clone()))?;
        let text = if ctx.candidate_codes.is_empty() {
            persona.coder_answer.to_string()
        } else {
            self.answer(persona, &ctx.candidate_codes)
        };
        Ok(CompletionResponse {
            text,
            backend_id: self.backend_id(),
            cached: false,
            latency_ms: 0,
        })
    }
}

fn set(codes: &[&'static str]) -> HashSet<&'static str> {
    codes.iter().copied().collect()
}

fn personas() -> HashMap<&'static str, Persona> {
    let mut p = HashMap::new();
    p.insert(
        "S0212-71992006000100006-1",
        Persona {
            style: Style::Bullets,
            believes: set(&[
                "J00-J99", "J00-J06", "J00", "J02", "J02.9", "A00-B99", "B25-B34", "B27", "B27.8", "B27.80", "B27.89",
                "R00-R99", "R50-R69", "R50", "R50.9", "R59", "R59.1",
            ]),
            garbled_at: None,
            curly_quotes: false,
            coder_answer: "Based on the case note, the following ICD-10-CM codes apply:\n\n\
                1. J00 - Acute nasopharyngitis [common cold]\n\
                2. B27.90 - Infectious mononucleosis, unspecified without complication\n\
                3. R59.0 - Localized enlarged lymph nodes\n\
                4. K75.9 - Inflammatory liver disease, unspecified",
        },
    );
    p.insert(
        "S1130-05582008000500007-1",
        Persona {
            style: Style::Numbered,
            believes: set(&[
                "C00-D49", "C60-C63", "C62", "C62.9", "C62.92", "C63", "C63.2", "N00-N99", "N40-N53", "N43", "N43.3",
            ]),
            garbled_at: None,
            curly_quotes: false,
            coder_answer:
                "1. C62.92 - Malignant neoplasm of left testis, unspecified whether descended or undescended\n\
                2. C63.2 - Malignant neoplasm of left testis\n\
                3. C77.2 - Secondary and unspecified malignant neoplasm of intra-abdominal lymph nodes",
        },
    );
    p.insert(
        "synth-0003",
        Persona {
            style: Style::Bullets,
            believes: set(&[
                "A00-B99", "A30-A49", "A48", "A48.1", "J00-J99", "J09-J18", "J15", "J15.9", "R00-R99", "R00-R09",
                "R05", "R05.1", "R50-R69", "R50", "R50.9",
            ]),
            garbled_at: None,
            curly_quotes: true,
            coder_answer: "A48.1 - Legionnaires' disease\n\
                E11.9 - Type 2 diabetes mellitus without complications\n\
                R05 - Cough",
        },
    );
    p.insert(
        "synth-0004",
        Persona {
            style: Style::Prose,
            believes: set(&[
                "E00-E89", "E08-E13", "E11", "E11.6", "E11.64", "E11.649", "E11.65", "E11.2", "E11.22", "N00-N99",
                "N17-N19", "N18", "N18.3", "N18.30", "I00-I99", "I10-I16", "I10",
            ]),
            garbled_at: None,
            curly_quotes: false,
            coder_answer: "- E11.649 Type 2 diabetes mellitus with hypoglycemia without coma\n\
                - E11.22 Type 2 diabetes mellitus with diabetic chronic kidney disease\n\
                - N18.3 Chronic kidney disease, stage 3 (moderate)\n\
                - I10 Essential (primary) hypertension\n\
                - Z79.4 Long term (current) use of insulin",
        },
    );
    p.insert(
        "synth-0005",
        Persona {
            style: Style::Numbered,
            believes: set(&[
                "K00-K95", "K35-K38", "K35", "K35.8", "K35.89", "K35.891", "R00-R99", "R50-R69", "R50", "R50.9",
            ]),
            garbled_at: Some("R50-R69"),
            curly_quotes: false,
            coder_answer: "",
        },
    );
    p.insert(
        "synth-0006",
        Persona {
            style: Style::Prose,
            believes: set(&[
                "I00-I99", "I20-I25", "I25", "I25.1", "I25.11", "I25.110", "I25.119", "I10-I16", "I10", "E00-E89",
                "E08-E13", "E11", "E11.6", "E11.65",
            ]),
            garbled_at: None,
            curly_quotes: false,
            coder_answer:
                "I25.110 - Atherosclerotic heart disease of native coronary artery with unstable angina pectoris\n\
                I10 - Hypertension\n\
                E11.65 - Type 2 diabetes mellitus with hyperglycemia",
        },
    );
    p
}

fn write(path: &Path, body: &str) -> anyhow::Result<()> {
    fs::create_dir_all(path.parent().expect("has parent"))?;
    fs::write(path, body)?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let replay_dir = fixtures.join("replay");
    if replay_dir.exists() {
        cache_clear(&replay_dir)?;
    }
    fs::create_dir_all(&replay_dir)?;
    let mut config = RunConfig::load(fixtures.join("run.toml"))?;
    let ontology = Arc::new(Ontology::load(&config.ontology_path)?);
    let notes = load_documents(&config.documents_dir)?;

    let recorder = CachedBackend::new(
        ScriptedModel {
            ontology: Arc::clone(&ontology),
            personas: personas(),
        },
        &replay_dir,
    )?;
    let mut settings = SearchSettings::new(config.backend.model_id.clone());
    settings.budget = config.budget.resolve()?;
    let tree = PromptTemplate::builtin(&config.template)?;
    settings.temperature = tree.family.default_temperature();
    for outcome in run_corpus(&notes, &ontology, &recorder, &tree, &settings, 1) {
        outcome.map_err(|f| anyhow::anyhow!("{}: {}", f.doc_id, f.error))?;
    }
    let coder = PromptTemplate::builtin("coder")?;
    for outcome in run_parallel(&notes, 1, |n| {
        run_coder(n, &ontology, &recorder, &coder, &settings, BaselineMode::MatchCodes)
    }) {
        outcome.map_err(|f| anyhow::anyhow!("{}: {}", f.doc_id, f.error))?;
    }
    println!("recorded {} responses into {}", recorder.misses(), replay_dir.display());

    let golden = fixtures.join("golden");
    let scratch = tempfile::tempdir()?;
    let gold = load_gold_labels(config.gold_labels_path.as_ref().expect("fixture has gold"), &ontology)?;
    for (name, pipeline) in [
        ("search", Pipeline::TreeSearch),
        ("baseline-match-codes", Pipeline::Baseline(BaselineMode::MatchCodes)),
        (
            "baseline-match-descriptions",
            Pipeline::Baseline(BaselineMode::MatchDescriptions),
        ),
    ] {
        config.output_dir = scratch.path().join(name);
        let status = execute(&config, pipeline)?;
        assert_eq!(status, Status::Ok, "{name} run failed");
        let out = &config.output_dir;
        let dest = golden.join(name);
        let predictions = fs::read_to_string(out.join("predictions.tsv"))?;
        write(&dest.join("predictions.tsv"), &predictions)?;
        let metrics = evaluate(
            &gold.labels,
            &read_label_file(out.join("predictions.tsv"))?,
            ClassSetPolicy::Gold,
        )?;
        write(&dest.join("metrics.json"), &report::to_json(&metrics))?;
        write(&dest.join("metrics.txt"), &report::metrics_table(name, &metrics))?;
        if let Pipeline::TreeSearch = pipeline {
            let traces = read_traces(&out.join("traces"))?;
            let levels = level_analysis(&gold.labels, &traces, &ontology, ClassSetPolicy::Gold)?;
            write(&dest.join("levels.json"), &report::to_json(&levels))?;
            write(&dest.join("levels.txt"), &report::levels_table(&levels))?;
            write(
                &dest.join("filter_report.json"),
                &fs::read_to_string(out.join("filter_report.json"))?,
            )?;
        }
        println!("{name}:\n{}", fs::read_to_string(dest.join("metrics.txt"))?);
    }
    println!("{}", fs::read_to_string(golden.join("search/levels.txt"))?);
    Ok(())
}
