//! Strict response grammars. Anything outside a task's grammar is a parse
//! error; nothing is silently defaulted or truncated.

use serde::{Deserialize, Serialize};

use super::TaskKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Complexity {
    Simple,
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stance {
    S,
    N,
    O,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sufficiency {
    Suf,
    Ins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpinionPayload {
    pub stance: Stance,
    pub confidence: f64,
    pub sufficiency: Sufficiency,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPayload {
    pub diagnosis: Option<String>,
    pub report: String,
}

/// Typed payload of a parsed response.
#[derive(Debug, Clone, PartialEq)]
pub enum Judgment {
    Entities(Vec<String>),
    /// Zero-based candidate index, or `None` for `NONE`.
    Alignment(Option<usize>),
    Diagnoses(Vec<String>),
    Sentence(String),
    Bits(Vec<bool>),
    Complexity(Complexity),
    Specialties(Vec<String>),
    Opinion(OpinionPayload),
    Queries(Vec<String>),
    Report(ReportPayload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredJudgment {
    pub raw: String,
    pub parsed: Judgment,
}

/// Bounds some grammars need from the caller.
#[derive(Debug, Clone, Copy)]
pub struct Expect {
    /// Number of candidates offered to an Align call.
    pub candidates: usize,
    /// Upper bound on Hypothesize list length.
    pub k_max: usize,
    /// Exact bit count for a Prune batch.
    pub batch: usize,
}

impl Default for Expect {
    fn default() -> Self {
        Expect {
            candidates: usize::MAX,
            k_max: 4,
            batch: 8,
        }
    }
}

pub fn parse_judgment(kind: TaskKind, text: &str, expect: Expect) -> Result<StructuredJudgment> {
    let parsed = match kind {
        TaskKind::Ner => Judgment::Entities(string_list(kind, text)?),
        TaskKind::Align => Judgment::Alignment(alignment(text, expect.candidates)?),
        TaskKind::Hypothesize => Judgment::Diagnoses(hypotheses(text, expect.k_max)?),
        TaskKind::Verbalize => Judgment::Sentence(sentence(text)?),
        TaskKind::Prune => Judgment::Bits(bits(text, expect.batch)?),
        TaskKind::AssessComplexity => Judgment::Complexity(complexity(text)?),
        TaskKind::Dispatch => Judgment::Specialties(string_list(kind, text)?),
        TaskKind::SpecialistOpinion => Judgment::Opinion(opinion(text)?),
        TaskKind::RefineQuery => Judgment::Queries(string_list(kind, text)?),
        TaskKind::InterimConsensus => Judgment::Report(report(kind, text)?),
        TaskKind::FinalAdjudicate | TaskKind::GeneralistDirect => {
            Judgment::Report(report(kind, text)?)
        }
    };
    Ok(StructuredJudgment {
        raw: text.to_owned(),
        parsed,
    })
}

/// JSON array of strings; entries are trimmed and must be non-empty.
pub fn string_list(kind: TaskKind, text: &str) -> Result<Vec<String>> {
    let trimmed = text.trim();
    let values: Vec<String> = serde_json::from_str(trimmed)
        .map_err(|e| Error::parse(kind, format!("expected a JSON array of strings: {e}"), trimmed))?;
    values
        .into_iter()
        .map(|v| {
            let v = v.trim().to_owned();
            if v.is_empty() {
                Err(Error::parse(kind, "empty list entry", trimmed))
            } else {
                Ok(v)
            }
        })
        .collect()
}

/// One-based candidate number or `NONE`, returned zero-based.
pub fn alignment(text: &str, candidates: usize) -> Result<Option<usize>> {
    let token = text.trim();
    if token == "NONE" {
        return Ok(None);
    }
    let number: usize = token
        .parse()
        .map_err(|_| Error::parse(TaskKind::Align, "expected a candidate number or NONE", token))?;
    if number == 0 || number > candidates {
        return Err(Error::parse(
            TaskKind::Align,
            format!("candidate number outside 1..={candidates}"),
            token,
        ));
    }
    Ok(Some(number - 1))
}

pub fn hypotheses(text: &str, k_max: usize) -> Result<Vec<String>> {
    let list = string_list(TaskKind::Hypothesize, text)?;
    if list.len() > k_max {
        return Err(Error::Cardinality {
            task: TaskKind::Hypothesize,
            actual: list.len(),
            max: k_max,
        });
    }
    Ok(list)
}

pub fn sentence(text: &str) -> Result<String> {
    let s = text.trim();
    if s.is_empty() {
        return Err(Error::EmptyResponse("verbalization".into()));
    }
    if s.contains('\n') {
        return Err(Error::parse(TaskKind::Verbalize, "expected a single line", s));
    }
    Ok(s.to_owned())
}

pub fn bits(text: &str, expected: usize) -> Result<Vec<bool>> {
    let trimmed = text.trim();
    let bits = trimmed
        .split(',')
        .map(|t| match t.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(Error::parse(TaskKind::Prune, "expected 0 or 1", other)),
        })
        .collect::<Result<Vec<_>>>()?;
    if bits.len() != expected {
        return Err(Error::JudgmentLength {
            expected,
            actual: bits.len(),
        });
    }
    Ok(bits)
}

pub fn complexity(text: &str) -> Result<Complexity> {
    match text.trim() {
        "SIMPLE" => Ok(Complexity::Simple),
        "COMPLEX" => Ok(Complexity::Complex),
        other => Err(Error::parse(
            TaskKind::AssessComplexity,
            "expected SIMPLE or COMPLEX",
            other,
        )),
    }
}

pub fn opinion(text: &str) -> Result<OpinionPayload> {
    let trimmed = text.trim();
    let payload: OpinionPayload = serde_json::from_str(trimmed).map_err(|e| {
        Error::parse(TaskKind::SpecialistOpinion, format!("bad opinion object: {e}"), trimmed)
    })?;
    if !(0.0..=1.0).contains(&payload.confidence) {
        return Err(Error::ConfidenceOutOfRange(payload.confidence));
    }
    if payload.justification.trim().is_empty() {
        return Err(Error::parse(
            TaskKind::SpecialistOpinion,
            "justification is empty",
            trimmed,
        ));
    }
    Ok(payload)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InterimWire {
    report: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FinalWire {
    diagnosis: String,
    report: String,
}

pub fn report(kind: TaskKind, text: &str) -> Result<ReportPayload> {
    let trimmed = text.trim();
    let bad = |e: serde_json::Error| Error::parse(kind, format!("bad report object: {e}"), trimmed);
    let payload = if kind == TaskKind::InterimConsensus {
        let w: InterimWire = serde_json::from_str(trimmed).map_err(bad)?;
        ReportPayload {
            diagnosis: None,
            report: w.report,
        }
    } else {
        let w: FinalWire = serde_json::from_str(trimmed).map_err(bad)?;
        if w.diagnosis.trim().is_empty() {
            return Err(Error::parse(kind, "diagnosis is empty", trimmed));
        }
        ReportPayload {
            diagnosis: Some(w.diagnosis.trim().to_owned()),
            report: w.report,
        }
    };
    Ok(payload)
}
