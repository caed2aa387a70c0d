//! Single chokepoint for every model call.
//!
//! Prompts are rendered from versioned templates, keyed by a canonical
//! SHA-256 digest, answered by a pluggable backend, and appended to the case
//! trace. Record mode memoizes responses into a transcript; replay mode
//! answers only from a transcript and never touches the network.

pub mod grammar;
pub mod live;
pub mod templates;
pub mod transcript;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trace::{TraceEvent, TraceLog};

pub use grammar::{
    parse_judgment, Complexity, Expect, Judgment, OpinionPayload, ReportPayload, Stance,
    StructuredJudgment, Sufficiency,
};
pub use templates::{template, Template, TEMPLATE_VERSION};
pub use transcript::{ReplayBackend, TranscriptEntry, TranscriptRecorder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Ner,
    Align,
    Hypothesize,
    Verbalize,
    Prune,
    AssessComplexity,
    Dispatch,
    SpecialistOpinion,
    RefineQuery,
    InterimConsensus,
    FinalAdjudicate,
    GeneralistDirect,
}

impl TaskKind {
    pub const ALL: [TaskKind; 12] = [
        TaskKind::Ner,
        TaskKind::Align,
        TaskKind::Hypothesize,
        TaskKind::Verbalize,
        TaskKind::Prune,
        TaskKind::AssessComplexity,
        TaskKind::Dispatch,
        TaskKind::SpecialistOpinion,
        TaskKind::RefineQuery,
        TaskKind::InterimConsensus,
        TaskKind::FinalAdjudicate,
        TaskKind::GeneralistDirect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Ner => "Ner",
            TaskKind::Align => "Align",
            TaskKind::Hypothesize => "Hypothesize",
            TaskKind::Verbalize => "Verbalize",
            TaskKind::Prune => "Prune",
            TaskKind::AssessComplexity => "AssessComplexity",
            TaskKind::Dispatch => "Dispatch",
            TaskKind::SpecialistOpinion => "SpecialistOpinion",
            TaskKind::RefineQuery => "RefineQuery",
            TaskKind::InterimConsensus => "InterimConsensus",
            TaskKind::FinalAdjudicate => "FinalAdjudicate",
            TaskKind::GeneralistDirect => "GeneralistDirect",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTask {
    pub kind: TaskKind,
    pub template_version: String,
}

impl PromptTask {
    pub fn current(kind: TaskKind) -> Self {
        PromptTask {
            kind,
            template_version: template(kind).version.to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    Live,
    Replay,
    Scripted,
}

/// What a backend sees for one call.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub task: PromptTask,
    pub system_prompt: String,
    pub rendered_prompt: String,
    pub canonical_key: String,
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn respond(&self, request: &ChatRequest) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatExchange {
    pub seq: u64,
    pub task: PromptTask,
    pub system_prompt: String,
    pub rendered_prompt: String,
    pub response_text: String,
    pub canonical_key: String,
    pub backend: BackendKind,
}

pub type Variables = BTreeMap<String, String>;

/// Builds a [`Variables`] map from `(name, value)` pairs.
pub fn vars<I, K, V>(pairs: I) -> Variables
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<String>,
{
    pairs
        .into_iter()
        .map(|(k, v)| (k.into(), v.into()))
        .collect()
}

/// Line endings unified, trailing whitespace dropped per line and at the end.
pub fn normalize_prompt(prompt: &str) -> String {
    let unified = prompt.replace("\r\n", "\n").replace('\r', "\n");
    let lines: Vec<&str> = unified.lines().map(str::trim_end).collect();
    lines.join("\n").trim_end().to_owned()
}

pub fn canonical_key(task: &PromptTask, system_prompt: &str, rendered_prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(task.kind.name().as_bytes());
    hasher.update([0u8]);
    hasher.update(task.template_version.as_bytes());
    hasher.update([0u8]);
    hasher.update(normalize_prompt(system_prompt).as_bytes());
    hasher.update([0u8]);
    hasher.update(normalize_prompt(rendered_prompt).as_bytes());
    hex::encode(hasher.finalize())
}

/// Per-case gateway handle: a shared backend plus this case's trace.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    recorder: Option<Arc<TranscriptRecorder>>,
    trace: TraceLog,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.kind())
            .field("recording", &self.recorder.is_some())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, trace: TraceLog) -> Self {
        Gateway {
            backend,
            recorder: None,
            trace,
        }
    }

    /// Responses are memoized into `recorder`; a key already recorded is
    /// answered from the recording without calling the backend.
    pub fn recording(mut self, recorder: Arc<TranscriptRecorder>) -> Self {
        self.recorder = Some(recorder);
        self
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn render(&self, kind: TaskKind, variables: &Variables) -> Result<ChatRequest> {
        let t = template(kind);
        let system_prompt = templates::render(kind, t.system, variables)?;
        let rendered_prompt = templates::render(kind, t.user, variables)?;
        let task = PromptTask::current(kind);
        let canonical_key = canonical_key(&task, &system_prompt, &rendered_prompt);
        Ok(ChatRequest {
            task,
            system_prompt,
            rendered_prompt,
            canonical_key,
        })
    }

    pub fn complete(&self, kind: TaskKind, variables: &Variables) -> Result<ChatExchange> {
        let request = self.render(kind, variables)?;
        let recorded = self
            .recorder
            .as_ref()
            .and_then(|r| r.lookup(&request.canonical_key));
        let response_text = match recorded {
            Some(text) => text,
            None => {
                let text = self.backend.respond(&request)?;
                if let Some(recorder) = &self.recorder {
                    recorder.record(&request.canonical_key, kind, &text)?;
                }
                text
            }
        };
        let backend = self.backend.kind();
        let seq = self.trace.append(TraceEvent::Exchange {
            task: kind,
            template_version: request.task.template_version.clone(),
            canonical_key: request.canonical_key.clone(),
            system_prompt: request.system_prompt.clone(),
            rendered_prompt: request.rendered_prompt.clone(),
            response: response_text.clone(),
            backend,
        });
        Ok(ChatExchange {
            seq,
            task: request.task,
            system_prompt: request.system_prompt,
            rendered_prompt: request.rendered_prompt,
            response_text,
            canonical_key: request.canonical_key,
            backend,
        })
    }

    /// Completes and parses against the task's grammar.
    pub fn ask(
        &self,
        kind: TaskKind,
        variables: &Variables,
        expect: Expect,
    ) -> Result<(ChatExchange, Judgment)> {
        let exchange = self.complete(kind, variables)?;
        let judgment = parse_judgment(kind, &exchange.response_text, expect)?;
        Ok((exchange, judgment.parsed))
    }
}

type Responder = dyn Fn(&ChatRequest) -> Result<String> + Send + Sync;

/// Offline backend answering through a closure. Used for fixtures and tests.
pub struct ScriptedBackend {
    responder: Box<Responder>,
}

impl ScriptedBackend {
    pub fn new(responder: impl Fn(&ChatRequest) -> Result<String> + Send + Sync + 'static) -> Self {
        ScriptedBackend {
            responder: Box::new(responder),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn respond(&self, request: &ChatRequest) -> Result<String> {
        (self.responder)(request)
    }
}

/// Backend that refuses every call. Stages that must not reach a model use it.
pub struct NoModelBackend;

impl ChatBackend for NoModelBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn respond(&self, request: &ChatRequest) -> Result<String> {
        Err(Error::ReplayMiss {
            key: request.canonical_key.clone(),
            task: request.task.kind,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gateway_with(responder: impl Fn(&ChatRequest) -> Result<String> + Send + Sync + 'static) -> Gateway {
        Gateway::new(Arc::new(ScriptedBackend::new(responder)), TraceLog::new("t"))
    }

    #[test]
    fn canonical_key_is_stable_and_whitespace_insensitive() {
        let task = PromptTask::current(TaskKind::Prune);
        let a = canonical_key(&task, "sys", "line one\nline two");
        let b = canonical_key(&task, "sys  \r\n", "line one   \r\nline two\n\n");
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit()));
        assert_ne!(a, canonical_key(&task, "sys", "line one\nline 2"));
        let other = PromptTask::current(TaskKind::Ner);
        assert_ne!(a, canonical_key(&other, "sys", "line one\nline two"));
    }

    #[test]
    fn same_task_and_variables_render_the_same_key() {
        let gw = gateway_with(|_| Ok("[]".into()));
        let v = vars([("narrative", "Pruritus and fatigue.")]);
        let a = gw.render(TaskKind::Ner, &v).unwrap();
        let b = gw.render(TaskKind::Ner, &v).unwrap();
        assert_eq!(a.canonical_key, b.canonical_key);
    }

    #[test]
    fn unbound_placeholder_fails_before_backend() {
        let gw = gateway_with(|_| panic!("backend must not be called"));
        let err = gw.complete(TaskKind::Ner, &Variables::new()).unwrap_err();
        assert!(matches!(err, Error::UnboundPlaceholder { ref name, .. } if name == "narrative"));
        assert!(gw.trace().is_empty());
    }

    #[test]
    fn exchanges_are_traced_in_order() {
        let gw = gateway_with(|r| Ok(format!("{}", r.task.kind)));
        gw.complete(TaskKind::Ner, &vars([("narrative", "x")])).unwrap();
        gw.complete(TaskKind::Ner, &vars([("narrative", "y")])).unwrap();
        let ex = gw.trace().exchanges(TaskKind::Ner);
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].seq, 0);
        assert_eq!(ex[1].seq, 1);
    }
}
