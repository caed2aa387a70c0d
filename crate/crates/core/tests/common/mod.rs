//! Shared support for integration tests: the hepatology fixture, a rule-based
//! scripted model that produced its transcript, and small helpers.
#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Deserialize;

use clinrag::config::RunConfig;
use clinrag::guideline::{GuidelineIndex, GuidelineSegment, HashingEmbedder, LexicalScorer, Retriever};
use clinrag::hypothesis::AbnormalEntity;
use clinrag::kg::{Concept, Edge, KnowledgeGraph};
use clinrag::trace::{TraceEvent, TraceRecord};
use clinrag::gateway::transcript::TranscriptRecorder;
use clinrag::gateway::{ChatBackend, ChatRequest, ScriptedBackend, TaskKind};
use clinrag::hypothesis::CaseDescription;
use clinrag::runner::{load_cases, run_case, Resources};
use clinrag::text::{normalize, tokens};

pub const REGENERATE_ENV: &str = "CLINRAG_REGENERATE_FIXTURES";

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/hepatology")
}

/// Fixture config with its output redirected to `out`.
pub fn fixture_config(out: &Path) -> RunConfig {
    let mut config = RunConfig::from_file(&fixture_dir().join("config.toml")).expect("fixture config is valid");
    config.output_dir = out.to_path_buf();
    config
}

pub fn fixture_cases() -> Vec<CaseDescription> {
    load_cases(&fixture_dir().join("cases.jsonl")).expect("fixture cases load")
}

#[derive(Debug, Clone, Deserialize)]
pub struct HypothesisScript {
    pub specialists: Vec<String>,
    /// One entry per round: comma-separated `stance:sufficiency`, in specialist order.
    pub rounds: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Scenario {
    pub mentions: Vec<String>,
    pub hypotheses: Vec<String>,
    pub complexity: String,
    #[serde(rename = "final")]
    pub final_diagnosis: String,
    #[serde(default)]
    pub deliberation: BTreeMap<String, HypothesisScript>,
}

pub fn scenarios() -> BTreeMap<String, Scenario> {
    let text = std::fs::read_to_string(fixture_dir().join("scenarios.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn line_after<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(prefix)).map(str::trim)
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    Some(&rest[..rest.find(end)?])
}

/// Lines after `header` up to the next blank line.
fn block<'a>(text: &'a str, header: &str) -> Vec<&'a str> {
    text.lines()
        .skip_while(|l| l.trim() != header)
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .collect()
}

/// Strips a leading `n. ` list marker.
fn unnumber(line: &str) -> &str {
    line.split_once(". ").map(|(_, rest)| rest).unwrap_or(line)
}

fn findings_in(prompt: &str) -> Vec<String> {
    block(prompt, "Standardized abnormal findings:")
        .into_iter()
        .filter_map(|l| l.strip_prefix("- "))
        .map(|l| l.split(" [").next().unwrap().to_owned())
        .collect()
}

/// Exact name or synonym match, else the first candidate covering at least
/// half of its own name tokens, else NONE.
fn align(prompt: &str) -> String {
    let mention = line_after(prompt, "Mention: ").expect("align prompt names the mention");
    let wanted = normalize(mention);
    let mention_tokens = tokens(mention);
    let candidates: Vec<Vec<String>> = block(prompt, "Candidates:")
        .into_iter()
        .map(|l| {
            let l = unnumber(l);
            let (head, syn) = l.split_once("; also: ").unwrap_or((l, ""));
            let name = head.rsplit_once(" (").map(|(n, _)| n).unwrap_or(head);
            std::iter::once(name.to_owned())
                .chain(syn.split(", ").filter(|s| !s.is_empty()).map(str::to_owned))
                .collect()
        })
        .collect();
    if let Some(i) = candidates.iter().position(|names| names.iter().any(|n| normalize(n) == wanted)) {
        return (i + 1).to_string();
    }
    let covers = |name: &String| {
        let t = tokens(name);
        2 * t.intersection(&mention_tokens).count() >= t.len()
    };
    match candidates.iter().position(|names| names.iter().any(covers)) {
        Some(i) => (i + 1).to_string(),
        None => "NONE".into(),
    }
}

fn verbalize(prompt: &str) -> String {
    let clauses: Vec<String> = block(prompt, "Path:")
        .into_iter()
        .filter(|l| l.contains("--> "))
        .map(|l| {
            let hop = unnumber(l);
            let (source, rest) = hop.split_once(" --").unwrap();
            let (relation, target) = rest.split_once("--> ").unwrap();
            format!("{source} {} {target}", relation.replace('_', " "))
        })
        .collect();
    format!("{}.", clauses.join("; "))
}

/// Short chains are relevant: a statement with at most two clauses gets 1.
fn prune(prompt: &str) -> String {
    block(prompt, "Statements:")
        .into_iter()
        .map(|s| if unnumber(s).matches("; ").count() <= 1 { "1" } else { "0" })
        .collect::<Vec<_>>()
        .join(",")
}

fn opinion(prompt: &str, system: &str, scenario: &Scenario) -> String {
    let specialty = between(system, "consultant in ", ". Judge").unwrap();
    let hypothesis = line_after(prompt, "Candidate diagnosis: ").unwrap();
    let round: usize = line_after(prompt, "Deliberation round: ").unwrap().parse().unwrap();
    let script = &scenario.deliberation[hypothesis];
    let slot = script.specialists.iter().position(|s| s == specialty).unwrap();
    let votes = &script.rounds[round.min(script.rounds.len() - 1)];
    let (stance, sufficiency) = votes.split(',').nth(slot).unwrap().split_once(':').unwrap();
    let confidence = match stance {
        "S" => 0.8,
        "N" => 0.5,
        _ => 0.7,
    };
    serde_json::json!({
        "stance": stance,
        "confidence": confidence,
        "sufficiency": sufficiency,
        "justification": format!("{specialty} reading of {hypothesis} in round {round}: stance {stance}, evidence {sufficiency}."),
    })
    .to_string()
}

fn refine(prompt: &str) -> String {
    let hypothesis = between(prompt, "evidence for ", " insufficient").unwrap();
    let findings = findings_in(prompt);
    let mut queries = vec![format!("{hypothesis} diagnostic criteria")];
    queries.extend(findings.iter().take(2).map(|f| format!("{f} in {hypothesis}")));
    serde_json::to_string(&queries).unwrap()
}

fn interim(prompt: &str) -> String {
    let h = between(prompt, "assessment of ", ".\n").unwrap();
    let s = line_after(prompt, "Support score: ").unwrap();
    serde_json::json!({ "report": format!("Support for {h} stands at {s}.") }).to_string()
}

fn adjudicate(scenario: &Scenario) -> String {
    serde_json::json!({
        "diagnosis": scenario.final_diagnosis,
        "report": format!(
            "The presentation is best explained by {}.\nNext steps: confirm with targeted laboratory and imaging work-up.",
            scenario.final_diagnosis
        ),
    })
    .to_string()
}

/// Deterministic stand-in for the chat model, driven by `scenarios.json`.
pub fn scripted_model() -> impl Fn(&ChatRequest) -> clinrag::Result<String> + Send + Sync + 'static {
    let scenarios = scenarios();
    let cases = fixture_cases();
    move |req: &ChatRequest| {
        let prompt = req.rendered_prompt.as_str();
        match req.task.kind {
            TaskKind::Align => return Ok(align(prompt)),
            TaskKind::Verbalize => return Ok(verbalize(prompt)),
            TaskKind::InterimConsensus => return Ok(interim(prompt)),
            _ => {}
        }
        let case = cases
            .iter()
            .find(|c| prompt.contains(&c.narrative))
            .unwrap_or_else(|| panic!("no fixture case in {} prompt", req.task.kind));
        let sc = &scenarios[&case.case_id];
        Ok(match req.task.kind {
            TaskKind::Ner => serde_json::to_string(&sc.mentions).unwrap(),
            TaskKind::Hypothesize => serde_json::to_string(&sc.hypotheses).unwrap(),
            TaskKind::Prune => prune(prompt),
            TaskKind::AssessComplexity => sc.complexity.clone(),
            TaskKind::Dispatch => {
                let h = line_after(prompt, "Candidate diagnosis: ").unwrap();
                serde_json::to_string(&sc.deliberation[h].specialists).unwrap()
            }
            TaskKind::SpecialistOpinion => opinion(prompt, &req.system_prompt, sc),
            TaskKind::RefineQuery => refine(prompt),
            TaskKind::FinalAdjudicate | TaskKind::GeneralistDirect => adjudicate(sc),
            TaskKind::Align | TaskKind::Verbalize | TaskKind::InterimConsensus => unreachable!(),
        })
    }
}

/// Cloneable in-memory sink.
#[derive(Clone, Default)]
pub struct SharedBuf(pub Arc<Mutex<Vec<u8>>>);

impl SharedBuf {
    pub fn text(&self) -> String {
        String::from_utf8(self.0.lock().unwrap().clone()).unwrap()
    }
}

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Resources answering through `chat` instead of the transcript.
pub fn resources_with(out: &Path, chat: Arc<dyn ChatBackend>, recorder: Option<Arc<TranscriptRecorder>>) -> Resources {
    Resources::load_with_chat(&fixture_config(out), chat, recorder).expect("fixture resources load")
}

/// Runs every fixture case sequentially through the scripted model in record
/// mode and returns the transcript it writes.
pub fn record_transcript(out: &Path) -> String {
    let sink = SharedBuf::default();
    let recorder = Arc::new(TranscriptRecorder::new(sink.clone()));
    let res = resources_with(out, Arc::new(ScriptedBackend::new(scripted_model())), Some(recorder));
    for case in fixture_cases() {
        let run = run_case(&res, &case);
        if let Err(e) = run.result {
            panic!("scripted case {} failed: {e}", case.case_id);
        }
    }
    sink.text()
}

/// Replay-mode resources over the committed transcript.
pub fn replay_resources(out: &Path) -> Resources {
    Resources::load(&fixture_config(out)).expect("replay resources load")
}

/// The scripted model, except that specialist opinions come from `votes`,
/// called with (specialty, hypothesis, round) and returning
/// (stance, sufficiency) such as `("S", "Ins")`.
pub fn model_with_opinions(
    votes: impl Fn(&str, &str, usize) -> (&'static str, &'static str) + Send + Sync + 'static,
) -> impl Fn(&ChatRequest) -> clinrag::Result<String> + Send + Sync + 'static {
    let base = scripted_model();
    move |req: &ChatRequest| {
        if req.task.kind != TaskKind::SpecialistOpinion {
            return base(req);
        }
        let specialty = between(&req.system_prompt, "consultant in ", ". Judge").unwrap();
        let hypothesis = line_after(&req.rendered_prompt, "Candidate diagnosis: ").unwrap();
        let round: usize = line_after(&req.rendered_prompt, "Deliberation round: ").unwrap().parse().unwrap();
        let (stance, sufficiency) = votes(specialty, hypothesis, round);
        Ok(serde_json::json!({
            "stance": stance,
            "confidence": 0.6,
            "sufficiency": sufficiency,
            "justification": format!("{specialty} round {round}"),
        })
        .to_string())
    }
}

/// Model for small synthetic contexts: aligns by name, verbalizes hops,
/// accepts every pruned statement.
pub fn generic_model() -> impl Fn(&ChatRequest) -> clinrag::Result<String> + Send + Sync + 'static {
    |req: &ChatRequest| {
        let prompt = req.rendered_prompt.as_str();
        Ok(match req.task.kind {
            TaskKind::Align => align(prompt),
            TaskKind::Verbalize => verbalize(prompt),
            TaskKind::Prune => {
                let n = block(prompt, "Statements:").len();
                vec!["1"; n].join(",")
            }
            other => panic!("generic model has no answer for {other}"),
        })
    }
}

pub fn concept(id: &str, name: &str, semantic_type: &str) -> Concept {
    Concept {
        id: id.into(),
        preferred_name: name.into(),
        synonyms: Default::default(),
        semantic_types: [semantic_type.to_owned()].into_iter().collect(),
    }
}

pub fn edge(source: &str, relation: &str, target: &str) -> Edge {
    Edge {
        source: source.into(),
        relation: relation.into(),
        target: target.into(),
    }
}

/// Finding `F` and disease `D` joined by exactly `paths` simple paths: one
/// direct edge plus two-hop detours through distinct intermediates.
pub fn fan_graph(paths: usize) -> KnowledgeGraph {
    let mut concepts = vec![concept("F", "Serum marker raised", "Laboratory Result"), concept("D", "Target disease", "Disease or Syndrome")];
    let mut edges = vec![edge("F", "finding_of", "D")];
    for i in 1..paths {
        let id = format!("M{i:02}");
        concepts.push(concept(&id, &format!("Mechanism {i:02}"), "Pathologic Function"));
        edges.push(edge("F", "manifestation_of", &id));
        edges.push(edge(&id, "feature_of", "D"));
    }
    KnowledgeGraph::from_parts(concepts, edges).unwrap()
}

pub fn small_retriever() -> Retriever {
    let segments = [
        ("g1", "Target disease is diagnosed when the serum marker is raised."),
        ("g2", "Mechanism pathways explain how the marker rises."),
        ("g3", "Unrelated advice about vaccination schedules."),
    ]
    .into_iter()
    .map(|(id, text)| GuidelineSegment {
        segment_id: id.into(),
        source_doc: "synthetic".into(),
        text: text.into(),
        embedding: None,
    })
    .collect();
    let embedder = Arc::new(HashingEmbedder::new(32));
    let index = GuidelineIndex::from_segments(segments, embedder.as_ref()).unwrap();
    Retriever::new(Arc::new(index), embedder, Arc::new(LexicalScorer))
}

pub fn finding(graph: &KnowledgeGraph, id: &str) -> AbnormalEntity {
    let c = graph.concept(id).unwrap().clone();
    AbnormalEntity {
        raw_mention: c.preferred_name.clone(),
        candidate_set: vec![c.clone()],
        concept: c,
    }
}

pub fn exchange_count(records: &[TraceRecord], kind: TaskKind) -> usize {
    records
        .iter()
        .filter(|r| matches!(&r.event, TraceEvent::Exchange { task, .. } if *task == kind))
        .count()
}

pub fn decisions(records: &[TraceRecord], wanted: &str) -> Vec<serde_json::Value> {
    records
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::Decision { stage, detail } if stage == wanted => Some(detail.clone()),
            _ => None,
        })
        .collect()
}

pub fn rendered_prompts(records: &[TraceRecord]) -> Vec<String> {
    records
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::Exchange {
                system_prompt,
                rendered_prompt,
                ..
            } => Some(format!("{system_prompt}\n{rendered_prompt}")),
            _ => None,
        })
        .collect()
}
