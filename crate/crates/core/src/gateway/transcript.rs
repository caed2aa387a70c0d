use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendKind, ChatBackend, ChatRequest, TaskKind};
use crate::error::{Error, Result};

/// One transcript line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: String,
    pub task: TaskKind,
    pub response: String,
}

/// Exact-match lookup over a recorded transcript.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn load(source: impl BufRead) -> Result<Self> {
        let mut responses: HashMap<String, String> = HashMap::new();
        for (idx, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(&line).map_err(|e| {
                Error::MalformedLine {
                    source_name: "transcript".into(),
                    line: idx + 1,
                    reason: e.to_string(),
                }
            })?;
            match responses.get(&entry.key) {
                Some(existing) if *existing != entry.response => {
                    return Err(Error::DuplicateTranscriptKey {
                        key: entry.key,
                        line: idx + 1,
                    });
                }
                Some(_) => {}
                None => {
                    responses.insert(entry.key, entry.response);
                }
            }
        }
        Ok(ReplayBackend { responses })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        ReplayBackend {
            responses: entries.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn respond(&self, request: &ChatRequest) -> Result<String> {
        self.responses
            .get(&request.canonical_key)
            .cloned()
            .ok_or_else(|| Error::ReplayMiss {
                key: request.canonical_key.clone(),
                task: request.task.kind,
            })
    }
}

struct RecorderState {
    seen: HashMap<String, String>,
    sink: Box<dyn Write + Send>,
}

/// Appends each new (key, response) pair to a transcript sink.
pub struct TranscriptRecorder {
    state: Mutex<RecorderState>,
}

impl TranscriptRecorder {
    pub fn new(sink: impl Write + Send + 'static) -> Self {
        TranscriptRecorder {
            state: Mutex::new(RecorderState {
                seen: HashMap::new(),
                sink: Box::new(sink),
            }),
        }
    }

    pub fn lookup(&self, key: &str) -> Option<String> {
        self.state
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .seen
            .get(key)
            .cloned()
    }

    pub fn record(&self, key: &str, task: TaskKind, response: &str) -> Result<()> {
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        if state.seen.contains_key(key) {
            return Ok(());
        }
        let entry = TranscriptEntry {
            key: key.to_owned(),
            task,
            response: response.to_owned(),
        };
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        state.sink.write_all(&line)?;
        state.sink.flush()?;
        state.seen.insert(key.to_owned(), response.to_owned());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap_or_else(|p| p.into_inner()).seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
