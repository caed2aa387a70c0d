//! End-to-end case execution and batch evaluation.
//!
//! A case runs extract, hypothesize, build evidence, route, then either the
//! generalist shortcut or dispatch, deliberation and adjudication. Each case
//! owns its trace; a batch runs cases on a bounded pool of worker threads.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{BackendMode, EmbedderKind, RerankerKind, RunConfig};
use crate::deliberation::{
    assess_complexity, dispatch_specialists, final_adjudication, generalist_direct_diagnosis,
    run_deliberation_loop, FinalReport, Route,
};
use crate::error::{Error, Result, ResultExt};
use crate::evidence::{build_initial_package, CaseContext};
use crate::gateway::live::{HttpSettings, LiveChatBackend, LiveEmbeddingClient, LiveRerankClient};
use crate::gateway::transcript::{ReplayBackend, TranscriptRecorder};
use crate::gateway::{ChatBackend, Complexity, Gateway};
use crate::guideline::{
    CrossScorer, Embedder, GuidelineIndex, HashingEmbedder, LexicalScorer, RecordingEmbedder,
    RecordingScorer, Retriever, TableEmbedder, TableScorer,
};
use crate::hypothesis::{extract_abnormal_entities, generate_hypotheses, read_cases, CaseDescription};
use crate::kg::KnowledgeGraph;
use crate::metrics::ClassificationReport;
use crate::params::Params;
use crate::text::normalize;
use crate::trace::{TraceEvent, TraceLog};

/// Label recorded for a case that produced no diagnosis.
pub const FAILED_LABEL: &str = "(failed)";

/// Everything a case needs, loaded once per run and shared across workers.
pub struct Resources {
    pub graph: Arc<KnowledgeGraph>,
    pub retriever: Retriever,
    pub chat: Arc<dyn ChatBackend>,
    pub recorder: Option<Arc<TranscriptRecorder>>,
    /// Normalized diagnosis name to evaluation label.
    pub labels: BTreeMap<String, String>,
    pub params: Params,
    pub output_dir: PathBuf,
    pub workers: usize,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::from(e).context(format!("opening {}", path.display())))
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path).map_err(|e| Error::from(e).context(format!("creating {}", path.display())))
}

fn settings(config: &RunConfig) -> HttpSettings {
    HttpSettings::new(config.backend.endpoint.clone().unwrap_or_default())
}

fn load_embedder(config: &RunConfig) -> Result<Arc<dyn Embedder>> {
    let b = &config.backend;
    Ok(match b.embedder {
        EmbedderKind::Hashing => Arc::new(HashingEmbedder::new(b.embedding_dim)),
        EmbedderKind::Table => {
            let path = b.embedding_table.as_deref().expect("validated");
            Arc::new(TableEmbedder::load(open(path)?).context(|| format!("loading {}", path.display()))?)
        }
        EmbedderKind::Live => {
            let model = b.embed_model.clone().expect("validated");
            let live: Arc<dyn Embedder> = Arc::new(LiveEmbeddingClient::new(settings(config), model)?);
            match (b.mode, &b.embedding_table) {
                (BackendMode::Record, Some(path)) => Arc::new(RecordingEmbedder::new(live, create(path)?)),
                _ => live,
            }
        }
    })
}

fn load_scorer(config: &RunConfig) -> Result<Arc<dyn CrossScorer>> {
    let b = &config.backend;
    Ok(match b.reranker {
        RerankerKind::Lexical => Arc::new(LexicalScorer),
        RerankerKind::Table => {
            let path = b.rerank_table.as_deref().expect("validated");
            Arc::new(TableScorer::load(open(path)?).context(|| format!("loading {}", path.display()))?)
        }
        RerankerKind::Live => {
            let model = b.rerank_model.clone().expect("validated");
            let live: Arc<dyn CrossScorer> = Arc::new(LiveRerankClient::new(settings(config), model)?);
            match (b.mode, &b.rerank_table) {
                (BackendMode::Record, Some(path)) => Arc::new(RecordingScorer::new(live, create(path)?)),
                _ => live,
            }
        }
    })
}

impl Resources {
    /// Loads the graph, embeds the guideline corpus, and opens the chat backend.
    /// Record mode truncates the transcript file and rewrites it.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let b = &config.backend;
        let (chat, recorder): (Arc<dyn ChatBackend>, _) = match b.mode {
            BackendMode::Replay => {
                let path = b.transcript.as_deref().expect("validated");
                let replay = ReplayBackend::load(open(path)?).context(|| format!("loading {}", path.display()))?;
                (Arc::new(replay), None)
            }
            BackendMode::Live | BackendMode::Record => {
                let live = LiveChatBackend::new(settings(config), b.chat_model.clone().expect("validated"))?;
                let recorder = match b.mode {
                    BackendMode::Record => {
                        let path = b.transcript.as_deref().expect("validated");
                        Some(Arc::new(TranscriptRecorder::new(create(path)?)))
                    }
                    _ => None,
                };
                (Arc::new(live), recorder)
            }
        };
        Self::load_with_chat(config, chat, recorder)
    }

    /// Loads everything except the chat backend, which the caller supplies.
    pub fn load_with_chat(
        config: &RunConfig,
        chat: Arc<dyn ChatBackend>,
        recorder: Option<Arc<TranscriptRecorder>>,
    ) -> Result<Self> {
        let graph = KnowledgeGraph::load(open(&config.triples_path)?, open(&config.concepts_path)?)
            .context(|| "loading knowledge graph")?;
        let embedder = load_embedder(config)?;
        let scorer = load_scorer(config)?;
        let index = GuidelineIndex::ingest(open(&config.corpus_path)?, embedder.as_ref())
            .context(|| format!("ingesting {}", config.corpus_path.display()))?;
        let retriever = Retriever::new(Arc::new(index), embedder, scorer);
        let labels = match &config.labels_path {
            Some(path) => load_labels(path)?,
            None => BTreeMap::new(),
        };
        Ok(Resources {
            graph: Arc::new(graph),
            retriever,
            chat,
            recorder,
            labels,
            params: config.params.clone(),
            output_dir: config.output_dir.clone(),
            workers: config.workers,
        })
    }

    pub fn gateway(&self, trace: TraceLog) -> Gateway {
        let gateway = Gateway::new(self.chat.clone(), trace);
        match &self.recorder {
            Some(r) => gateway.recording(r.clone()),
            None => gateway,
        }
    }
}

/// Reads a `diagnosis<TAB>label` file, keyed by normalized diagnosis.
pub fn load_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut labels = BTreeMap::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('\t') {
            Some((name, label)) if !name.trim().is_empty() && !label.trim().is_empty() => {
                labels.insert(normalize(name), label.trim().to_owned());
            }
            _ => {
                return Err(Error::MalformedLine {
                    source_name: "labels".into(),
                    line: idx + 1,
                    reason: "expected diagnosis<TAB>label".into(),
                })
            }
        }
    }
    Ok(labels)
}

/// Reads the cases file; an empty file is an error.
pub fn load_cases(path: &Path) -> Result<Vec<CaseDescription>> {
    let cases = read_cases(open(path)?).context(|| format!("reading {}", path.display()))?;
    if cases.is_empty() {
        return Err(Error::NoCases);
    }
    Ok(cases)
}

/// File name for a case's trace. Characters outside `[A-Za-z0-9._-]` become `_`.
pub fn trace_file_name(case_id: &str) -> String {
    let safe: String = case_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.trace.jsonl")
}

/// Result of one case: the report or the error, plus the trace either way.
#[derive(Debug)]
pub struct CaseRun {
    pub case_id: String,
    pub result: Result<FinalReport>,
    pub trace: TraceLog,
    pub trace_path: PathBuf,
}

impl CaseRun {
    pub fn digest(&self) -> String {
        self.trace.digest()
    }
}

fn execute(res: &Resources, case: &CaseDescription, gateway: &Gateway) -> std::result::Result<FinalReport, (&'static str, Error)> {
    let p = &res.params;
    let findings = extract_abnormal_entities(case, gateway, &res.graph, p.match_limit).map_err(|e| ("extract", e))?;
    let hypotheses = generate_hypotheses(case, &findings, gateway, p.k_max).map_err(|e| ("hypothesize", e))?;
    let ctx = CaseContext {
        case,
        findings: &findings,
        graph: &res.graph,
        retriever: &res.retriever,
        gateway,
        params: p,
    };
    let packages = hypotheses
        .iter()
        .map(|h| build_initial_package(&ctx, h))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| ("evidence", e))?;
    let verdict = assess_complexity(&ctx, &hypotheses).map_err(|e| ("route", e))?;
    match verdict.flag {
        Complexity::Simple => {
            generalist_direct_diagnosis(&ctx, &hypotheses, &packages).map_err(|e| ("generalist", e))
        }
        Complexity::Complex => {
            let rosters = hypotheses
                .iter()
                .map(|h| dispatch_specialists(&ctx, h))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| ("dispatch", e))?;
            let outcomes = run_deliberation_loop(&ctx, rosters, packages).map_err(|e| ("deliberation", e))?;
            final_adjudication(&ctx, &hypotheses, &outcomes).map_err(|e| ("adjudication", e))
        }
    }
}

/// Runs one case and writes its trace, complete or partial.
pub fn run_case(res: &Resources, case: &CaseDescription) -> CaseRun {
    let trace = TraceLog::new(case.case_id.clone());
    let gateway = res.gateway(trace.clone());
    let mut result = execute(res, case, &gateway).map_err(|(stage, error)| {
        trace.append(TraceEvent::Error {
            stage: stage.to_owned(),
            message: error.to_string(),
        });
        error.context(format!("stage {stage}"))
    });
    let trace_path = res.output_dir.join(trace_file_name(&case.case_id));
    let written = std::fs::create_dir_all(&res.output_dir).and_then(|_| trace.write_file(&trace_path));
    if let Err(e) = written {
        let e = Error::from(e).context(format!("writing {}", trace_path.display()));
        // A write failure outranks a successful diagnosis but not an earlier error.
        if result.is_ok() {
            result = Err(e);
        }
    }
    CaseRun {
        case_id: case.case_id.clone(),
        result,
        trace,
        trace_path,
    }
}

/// One row of the batch table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    /// Diagnosis name as adjudicated; `prediction` is its evaluation label.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<String>,
    pub prediction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub route: Option<Route>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub trace_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CaseRow {
    fn from_run(case: &CaseDescription, run: &CaseRun, labels: &BTreeMap<String, String>) -> Self {
        let (diagnosis, prediction, route, error) = match &run.result {
            Ok(report) => {
                let name = &report.final_diagnosis;
                // Spelling differences against the label do not count as misses.
                let label = match (labels.get(&normalize(name)), &case.ground_truth) {
                    (Some(mapped), _) => mapped.clone(),
                    (None, Some(t)) if normalize(t) == normalize(name) => t.clone(),
                    _ => name.clone(),
                };
                (Some(name.clone()), label, Some(report.route), None)
            }
            Err(e) => (None, FAILED_LABEL.to_owned(), None, Some(e.to_string())),
        };
        CaseRow {
            case_id: case.case_id.clone(),
            diagnosis,
            correct: case.ground_truth.as_ref().map(|t| *t == prediction),
            ground_truth: case.ground_truth.clone(),
            prediction,
            route,
            trace_digest: run.digest(),
            error,
        }
    }
}

/// Batch table and metrics over the rows that carry a ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    #[serde(flatten)]
    pub metrics: ClassificationReport,
    pub failed: usize,
    pub rows: Vec<CaseRow>,
}

impl BatchSummary {
    pub fn from_rows(rows: Vec<CaseRow>) -> Self {
        let pairs: Vec<(&str, &str)> = rows
            .iter()
            .filter_map(|r| r.ground_truth.as_deref().map(|t| (t, r.prediction.as_str())))
            .collect();
        BatchSummary {
            metrics: ClassificationReport::compute(&pairs),
            failed: rows.iter().filter(|r| r.error.is_some()).count(),
            rows,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = create(path)?;
        serde_json::to_writer_pretty(&mut file, self)?;
        std::io::Write::write_all(&mut file, b"\n")?;
        Ok(())
    }
}

/// Runs `cases` on up to `res.workers` threads. Rows keep input order.
pub fn run_cases(res: &Resources, cases: &[CaseDescription]) -> Vec<(CaseRow, CaseRun)> {
    let slots: Vec<Mutex<Option<(CaseRow, CaseRun)>>> = cases.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = res.workers.clamp(1, cases.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(case) = cases.get(i) else { break };
                let run = run_case(res, case);
                if let Err(e) = &run.result {
                    tracing::warn!(case = %case.case_id, error = %e, "case failed");
                } else {
                    tracing::info!(case = %case.case_id, "case finished");
                }
                let row = CaseRow::from_run(case, &run, &res.labels);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some((row, run));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every case ran"))
        .collect()
}

/// Runs every case and writes `summary.json` beside the traces.
pub fn run_batch(res: &Resources, cases: &[CaseDescription]) -> Result<BatchSummary> {
    if cases.is_empty() {
        return Err(Error::NoCases);
    }
    let rows = run_cases(res, cases).into_iter().map(|(row, _)| row).collect();
    let summary = BatchSummary::from_rows(rows);
    summary.write(&res.output_dir.join("summary.json"))?;
    tracing::info!(
        cases = summary.rows.len(),
        failed = summary.failed,
        summary = %json!({"weighted_f1": summary.metrics.weighted_f1}),
        "batch finished"
    );
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_names_are_filesystem_safe() {
        assert_eq!(trace_file_name("case-01"), "case-01.trace.jsonl");
        assert_eq!(trace_file_name("a/b c"), "a_b_c.trace.jsonl");
    }

    fn row(truth: &str, pred: &str, failed: bool) -> CaseRow {
        CaseRow {
            case_id: truth.into(),
            ground_truth: Some(truth.into()),
            diagnosis: None,
            prediction: pred.into(),
            route: None,
            correct: Some(truth == pred),
            trace_digest: String::new(),
            error: failed.then(|| "boom".into()),
        }
    }

    #[test]
    fn summary_counts_failures_as_misses() {
        let s = BatchSummary::from_rows(vec![row("A", "A", false), row("B", FAILED_LABEL, true)]);
        assert_eq!(s.failed, 1);
        assert_eq!(s.metrics.correct, 1);
        assert_eq!(s.metrics.per_class[FAILED_LABEL].fp, 1);
        let v = serde_json::to_value(&s).unwrap();
        for key in ["cases", "correct", "weighted_precision", "weighted_recall", "weighted_f1", "weighted_f05", "per_class"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
