//! Append-only per-case diagnostic trace.
//!
//! Every model exchange, retrieval, path judgment and decision is appended
//! under a single lock, which assigns gapless sequence numbers. The digest
//! covers the canonical JSON of each record with the timestamp removed, so
//! two runs over the same inputs and transcript produce the same digest.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{BackendKind, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub segment_id: String,
    pub dense_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Exchange {
        task: TaskKind,
        template_version: String,
        canonical_key: String,
        system_prompt: String,
        rendered_prompt: String,
        response: String,
        backend: BackendKind,
    },
    Retrieval {
        hypothesis: String,
        query: String,
        k: usize,
        n: usize,
        dense: Vec<ScoredId>,
        reranked: Vec<ScoredId>,
    },
    Paths {
        hypothesis: String,
        iteration: usize,
        /// Path keys in enumeration order.
        enumerated: Vec<String>,
        /// Aligned with `enumerated`.
        valid: Vec<bool>,
    },
    Decision {
        stage: String,
        detail: serde_json::Value,
    },
    Error {
        stage: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub timestamp: String,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Serialize)]
struct CanonicalRecord<'a> {
    seq: u64,
    #[serde(flatten)]
    event: &'a TraceEvent,
}

#[derive(Debug, Default)]
struct TraceState {
    case_id: String,
    records: Vec<TraceRecord>,
}

/// Shared handle to one case's trace. Cloning shares the same log.
#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    inner: Arc<Mutex<TraceState>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceFooter {
    case_id: String,
    records: usize,
    trace_digest: String,
}

impl TraceLog {
    pub fn new(case_id: impl Into<String>) -> Self {
        TraceLog {
            inner: Arc::new(Mutex::new(TraceState {
                case_id: case_id.into(),
                records: Vec::new(),
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, TraceState> {
        // A panic while holding the lock cannot leave a half-appended record.
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn case_id(&self) -> String {
        self.lock().case_id.clone()
    }

    /// Appends an event and returns its sequence number.
    pub fn append(&self, event: TraceEvent) -> u64 {
        let mut state = self.lock();
        let seq = state.records.len() as u64;
        state.records.push(TraceRecord {
            seq,
            timestamp: chrono::Utc::now().to_rfc3339(),
            event,
        });
        seq
    }

    pub fn decision(&self, stage: &str, detail: serde_json::Value) -> u64 {
        self.append(TraceEvent::Decision {
            stage: stage.to_owned(),
            detail,
        })
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.lock().records.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exchanges of one task kind, in append order.
    pub fn exchanges(&self, kind: TaskKind) -> Vec<TraceRecord> {
        self.lock()
            .records
            .iter()
            .filter(|r| matches!(&r.event, TraceEvent::Exchange { task, .. } if *task == kind))
            .cloned()
            .collect()
    }

    pub fn digest(&self) -> String {
        digest_records(&self.lock().records)
    }

    /// Writes the trace as JSON lines followed by a footer carrying the digest.
    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        let state = self.lock();
        for record in &state.records {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        let footer = TraceFooter {
            case_id: state.case_id.clone(),
            records: state.records.len(),
            trace_digest: digest_records(&state.records),
        };
        serde_json::to_writer(&mut *out, &footer)?;
        out.write_all(b"\n")?;
        out.flush()
    }

    pub fn write_file(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut file)
    }
}

pub fn digest_records(records: &[TraceRecord]) -> String {
    let mut hasher = Sha256::new();
    for record in records {
        let canonical = CanonicalRecord {
            seq: record.seq,
            event: &record.event,
        };
        let mut value = serde_json::to_value(&canonical).expect("trace records serialize");
        // Which backend answered is not part of the outcome: a recorded run
        // and its replay must digest identically.
        if let Some(map) = value.as_object_mut() {
            map.remove("backend");
        }
        let line = serde_json::to_vec(&value).expect("trace records serialize");
        hasher.update(&line);
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// A trace file read back from disk.
#[derive(Debug, Clone)]
pub struct TraceFile {
    pub case_id: String,
    pub records: Vec<TraceRecord>,
    pub trace_digest: String,
}

impl TraceFile {
    pub fn read(path: &Path) -> crate::error::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let footer_line = lines.pop().unwrap_or("{}");
        let footer: TraceFooter = serde_json::from_str(footer_line)?;
        let records = lines
            .into_iter()
            .map(serde_json::from_str)
            .collect::<Result<Vec<TraceRecord>, _>>()?;
        Ok(TraceFile {
            case_id: footer.case_id,
            records,
            trace_digest: footer.trace_digest,
        })
    }

    pub fn recomputed_digest(&self) -> String {
        digest_records(&self.records)
    }
}
