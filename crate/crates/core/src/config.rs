//! Run configuration: a TOML document with `kg`, `corpus`, `backend`,
//! `params` and `output` sections. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Deterministic local feature hashing.
    #[default]
    Hashing,
    Table,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankerKind {
    /// Deterministic local token overlap.
    #[default]
    Lexical,
    Table,
    Live,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKg {
    concepts: Option<PathBuf>,
    triples: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorpus {
    guidelines: Option<PathBuf>,
    cases: Option<PathBuf>,
    labels: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackend {
    mode: Option<BackendMode>,
    transcript: Option<PathBuf>,
    endpoint: Option<String>,
    chat_model: Option<String>,
    embed_model: Option<String>,
    rerank_model: Option<String>,
    #[serde(default)]
    embedder: EmbedderKind,
    embedding_dim: Option<usize>,
    embedding_table: Option<PathBuf>,
    #[serde(default)]
    reranker: RerankerKind,
    rerank_table: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    workers: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    kg: RawKg,
    #[serde(default)]
    corpus: RawCorpus,
    #[serde(default)]
    backend: RawBackend,
    #[serde(default)]
    params: Params,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub transcript: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub chat_model: Option<String>,
    pub embed_model: Option<String>,
    pub rerank_model: Option<String>,
    pub embedder: EmbedderKind,
    pub embedding_dim: usize,
    pub embedding_table: Option<PathBuf>,
    pub reranker: RerankerKind,
    pub rerank_table: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub concepts_path: PathBuf,
    pub triples_path: PathBuf,
    pub corpus_path: PathBuf,
    pub cases_path: PathBuf,
    /// Optional `diagnosis<TAB>label` map from diagnosis names to evaluation labels.
    pub labels_path: Option<PathBuf>,
    pub backend: BackendConfig,
    pub params: Params,
    pub output_dir: PathBuf,
    pub workers: usize,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_file_with_mode(path, None)
    }

    /// As [`RunConfig::from_file`], with `mode` replacing `backend.mode` before validation.
    pub fn from_file_with_mode(path: &Path, mode: Option<BackendMode>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(vec![FieldError {
                field: "(file)".into(),
                message: format!("{}: {e}", path.display()),
            }])
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        validate_config_as(&text, base, mode)
    }
}

struct Check {
    errors: Vec<FieldError>,
}

impl Check {
    fn fail(&mut self, field: &str, message: impl Into<String>) {
        self.errors.push(FieldError {
            field: field.to_owned(),
            message: message.into(),
        });
    }

    fn path(&mut self, field: &str, value: Option<PathBuf>, base: &Path) -> PathBuf {
        match value {
            Some(p) => base.join(p),
            None => {
                self.fail(field, "required");
                PathBuf::new()
            }
        }
    }

    fn count(&mut self, field: &str, value: usize) {
        if value < 1 {
            self.fail(field, "must be at least 1");
        }
    }

    fn unit_interval(&mut self, field: &str, value: f64) {
        if !(0.0..=1.0).contains(&value) {
            self.fail(field, format!("{value} is outside [0, 1]"));
        }
    }
}

/// Parses a config document, applies defaults, and reports every invalid field.
pub fn validate_config(source: &str, base_dir: &Path) -> Result<RunConfig> {
    validate_config_as(source, base_dir, None)
}

pub fn validate_config_as(source: &str, base_dir: &Path, mode: Option<BackendMode>) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(source).map_err(|e| {
        Error::Config(vec![FieldError {
            field: "(document)".into(),
            message: e.message().to_owned(),
        }])
    })?;
    let mut check = Check { errors: Vec::new() };

    let concepts_path = check.path("kg.concepts", raw.kg.concepts, base_dir);
    let triples_path = check.path("kg.triples", raw.kg.triples, base_dir);
    let corpus_path = check.path("corpus.guidelines", raw.corpus.guidelines, base_dir);
    let cases_path = check.path("corpus.cases", raw.corpus.cases, base_dir);

    let b = raw.backend;
    let mode = mode.or(b.mode).unwrap_or_else(|| {
        check.fail("backend.mode", "required (live, record or replay)");
        BackendMode::Replay
    });
    match mode {
        BackendMode::Replay => {
            if b.transcript.is_none() {
                check.fail("backend.transcript", "required in replay mode");
            }
            if b.embedder == EmbedderKind::Live {
                check.fail("backend.embedder", "replay mode cannot use a live embedder");
            }
            if b.reranker == RerankerKind::Live {
                check.fail("backend.reranker", "replay mode cannot use a live reranker");
            }
        }
        BackendMode::Live | BackendMode::Record => {
            if b.endpoint.as_deref().map_or(true, |e| e.trim().is_empty()) {
                check.fail("backend.endpoint", "required in live and record modes");
            }
            if b.chat_model.is_none() {
                check.fail("backend.chat_model", "required in live and record modes");
            }
            if mode == BackendMode::Record && b.transcript.is_none() {
                check.fail("backend.transcript", "required in record mode");
            }
        }
    }
    if b.embedder == EmbedderKind::Live && b.embed_model.is_none() {
        check.fail("backend.embed_model", "required when embedder = \"live\"");
    }
    if b.reranker == RerankerKind::Live && b.rerank_model.is_none() {
        check.fail("backend.rerank_model", "required when reranker = \"live\"");
    }
    if b.embedder == EmbedderKind::Table && b.embedding_table.is_none() {
        check.fail("backend.embedding_table", "required when embedder = \"table\"");
    }
    if b.reranker == RerankerKind::Table && b.rerank_table.is_none() {
        check.fail("backend.rerank_table", "required when reranker = \"table\"");
    }
    let embedding_dim = b.embedding_dim.unwrap_or(DEFAULT_EMBEDDING_DIM);
    check.count("backend.embedding_dim", embedding_dim);

    let p = &raw.params;
    for (field, value) in [
        ("params.k", p.k),
        ("params.n", p.n),
        ("params.h_max", p.h_max),
        ("params.k_max", p.k_max),
        ("params.prune_batch", p.prune_batch),
        ("params.guideline_top", p.guideline_top),
        ("params.match_limit", p.match_limit),
        ("params.t_max", p.t_max),
        ("params.max_specialists", p.max_specialists),
        ("params.max_queries", p.max_queries),
    ] {
        check.count(field, value);
    }
    check.unit_interval("params.tau_suff", p.tau_suff);
    check.unit_interval("params.tau_high", p.tau_high);
    if p.roster.is_empty() {
        check.fail("params.roster", "must name at least one specialty");
    }
    let mut seen = std::collections::HashSet::new();
    for name in &p.roster {
        if name.trim().is_empty() {
            check.fail("params.roster", "contains an empty name");
        } else if !seen.insert(name.to_lowercase()) {
            check.fail("params.roster", format!("{name:?} listed twice"));
        }
    }

    let workers = raw.output.workers.unwrap_or(1);
    check.count("output.workers", workers);
    let output_dir = base_dir.join(raw.output.dir.unwrap_or_else(|| PathBuf::from("out")));

    if !check.errors.is_empty() {
        return Err(Error::Config(check.errors));
    }
    let rel = |p: Option<PathBuf>| p.map(|p| base_dir.join(p));
    Ok(RunConfig {
        concepts_path,
        triples_path,
        corpus_path,
        cases_path,
        labels_path: raw.corpus.labels.map(|p| base_dir.join(p)),
        backend: BackendConfig {
            mode,
            transcript: rel(b.transcript),
            endpoint: b.endpoint,
            chat_model: b.chat_model,
            embed_model: b.embed_model,
            rerank_model: b.rerank_model,
            embedder: b.embedder,
            embedding_dim,
            embedding_table: rel(b.embedding_table),
            reranker: b.reranker,
            rerank_table: rel(b.rerank_table),
        },
        params: raw.params,
        output_dir,
        workers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[kg]
concepts = "kg/concepts.tsv"
triples = "kg/triples.tsv"

[corpus]
guidelines = "guidelines.jsonl"
cases = "cases.jsonl"

[backend]
mode = "replay"
transcript = "transcript.jsonl"
"#;

    fn field_errors(err: Error) -> Vec<FieldError> {
        match err {
            Error::Config(e) => e,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn minimal_replay_config_gets_defaults() {
        let cfg = validate_config(MINIMAL, Path::new("/data")).unwrap();
        assert_eq!(cfg.params.k, 8);
        assert_eq!(cfg.params.n, 4);
        assert_eq!(cfg.params.h_max, 3);
        assert_eq!(cfg.params.k_max, 4);
        assert_eq!(cfg.params.prune_batch, 8);
        assert_eq!(cfg.params.t_max, 3);
        assert_eq!(cfg.params.tau_suff, 0.5);
        assert_eq!(cfg.params.tau_high, 0.9);
        assert_eq!(cfg.params.max_specialists, 4);
        assert_eq!(cfg.params.roster.len(), 8);
        assert_eq!(cfg.concepts_path, PathBuf::from("/data/kg/concepts.tsv"));
        assert_eq!(cfg.backend.transcript, Some(PathBuf::from("/data/transcript.jsonl")));
        assert_eq!(cfg.workers, 1);
    }

    #[test]
    fn out_of_range_threshold_names_the_field() {
        let doc = format!("{MINIMAL}\n[params]\ntau_high = 1.5\n");
        let errs = field_errors(validate_config(&doc, Path::new(".")).unwrap_err());
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "params.tau_high");
    }

    #[test]
    fn live_mode_requires_endpoint() {
        let doc = MINIMAL.replace("mode = \"replay\"", "mode = \"live\"\nchat_model = \"m\"");
        let errs = field_errors(validate_config(&doc, Path::new(".")).unwrap_err());
        assert!(errs.iter().any(|e| e.field == "backend.endpoint"));
    }

    #[test]
    fn replay_requires_transcript_and_counts_must_be_positive() {
        let doc = MINIMAL.replace("transcript = \"transcript.jsonl\"", "") + "\n[params]\nk = 0\nt_max = 0\n";
        let errs = field_errors(validate_config(&doc, Path::new(".")).unwrap_err());
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"backend.transcript"));
        assert!(fields.contains(&"params.k"));
        assert!(fields.contains(&"params.t_max"));
    }

    #[test]
    fn mode_override_applies_before_validation() {
        let errs = field_errors(validate_config_as(MINIMAL, Path::new("."), Some(BackendMode::Record)).unwrap_err());
        assert!(errs.iter().any(|e| e.field == "backend.endpoint"));
    }

    #[test]
    fn missing_sections_and_unknown_keys() {
        let errs = field_errors(validate_config("", Path::new(".")).unwrap_err());
        assert!(errs.iter().any(|e| e.field == "kg.concepts"));
        assert!(errs.iter().any(|e| e.field == "backend.mode"));
        let errs = field_errors(validate_config("[params]\nbogus = 1\n", Path::new(".")).unwrap_err());
        assert_eq!(errs[0].field, "(document)");
    }
}
