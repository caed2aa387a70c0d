use thiserror::Error;

use crate::gateway::TaskKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // kg_store
    #[error("{source_name}:{line}: malformed line: {reason}")]
    MalformedLine {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("duplicate concept id {0}")]
    DuplicateConcept(String),
    #[error("edge references unknown concept id {0}")]
    DanglingReference(String),
    #[error("unknown concept id {0}")]
    UnknownConcept(String),
    #[error("path start and end are the same concept {0}")]
    StartEqualsEnd(String),
    #[error("mention {0:?} is empty after normalization")]
    EmptyMention(String),
    #[error("h_max must be at least 1")]
    ZeroHopBound,

    // guideline_index
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("guideline corpus is empty")]
    EmptyCorpus,
    #[error("guideline index is empty")]
    EmptyIndex,
    #[error("duplicate segment id {0}")]
    DuplicateSegment(String),
    #[error("segment {0} has empty text")]
    EmptySegmentText(String),
    #[error("no candidates to rerank")]
    NoCandidates,
    #[error("cutoff must be at least 1")]
    ZeroCutoff,
    #[error("scorer failed on segment {segment_id}: {message}")]
    Scorer { segment_id: String, message: String },
    #[error("embedding backend: {0}")]
    Embedding(String),

    // llm_gateway
    #[error("template {task:?} has unbound placeholder {{{name}}}")]
    UnboundPlaceholder { task: TaskKind, name: String },
    #[error("live transport error (status {status}): {body}")]
    Transport { status: u16, body: String },
    #[error("replay transcript has no response for key {key} ({task:?})")]
    ReplayMiss { key: String, task: TaskKind },
    #[error("transcript line {line}: key {key} appears with two different responses")]
    DuplicateTranscriptKey { key: String, line: usize },
    #[error("{task:?} response does not parse: {reason} (at {span:?})")]
    Parse {
        task: TaskKind,
        reason: String,
        span: String,
    },
    #[error("{task:?} response has {actual} entries, at most {max} allowed")]
    Cardinality {
        task: TaskKind,
        actual: usize,
        max: usize,
    },
    #[error("empty response from model for {0}")]
    EmptyResponse(String),

    // hypothesis / evidence / deliberation
    #[error("model produced no hypotheses")]
    NoHypotheses,
    #[error("prune judged {actual} paths but the batch holds {expected}")]
    JudgmentLength { expected: usize, actual: usize },
    #[error("cannot merge evidence for {base:?} with evidence for {supplement:?}")]
    HypothesisMismatch { base: String, supplement: String },
    #[error("diagnosis {0:?} is not one of the hypotheses under evaluation")]
    AdjudicationMismatch(String),
    #[error("unknown specialty {0:?}")]
    UnknownSpecialty(String),
    #[error("dispatch selected no specialists")]
    EmptyRoster,
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("no opinions to aggregate")]
    NoOpinions,
    #[error("refinement produced no queries")]
    NoRefinementQueries,

    // cli_runner
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<FieldError>),
    #[error("case file is empty")]
    NoCases,
    #[error("unknown case id {0}")]
    UnknownCase(String),

    /// Wraps an error with the pipeline location that produced it.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn parse(task: TaskKind, reason: impl Into<String>, span: impl AsRef<str>) -> Self {
        let span = span.as_ref();
        let excerpt: String = span.chars().take(120).collect();
        Error::Parse {
            task,
            reason: reason.into(),
            span: excerpt,
        }
    }
}

pub trait ResultExt<T> {
    fn context<C: Into<String>>(self, context: impl FnOnce() -> C) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context<C: Into<String>>(self, context: impl FnOnce() -> C) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}
