//! Versioned prompt templates, one per task kind.
//!
//! Placeholders are `{name}` where `name` is `[a-z_]+`. Any other brace is
//! literal text, so JSON examples inside a template need no escaping.

use std::collections::BTreeMap;

use super::TaskKind;
use crate::error::{Error, Result};

pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub kind: TaskKind,
    pub version: &'static str,
    pub system: &'static str,
    pub user: &'static str,
}

const GENERAL_SYSTEM: &str = "You are a careful clinical reasoning assistant. \
Follow the output format exactly and output nothing else.";

const NER: Template = Template {
    kind: TaskKind::Ner,
    version: TEMPLATE_VERSION,
    system: GENERAL_SYSTEM,
    user: "Identify every diagnostically relevant abnormal finding in the case below \
(abnormal symptoms, signs, laboratory values, imaging results).
Return a JSON array of short finding phrases in the order they appear.

Case:
{narrative}",
};

const ALIGN: Template = Template {
    kind: TaskKind::Align,
    version: TEMPLATE_VERSION,
    system: GENERAL_SYSTEM,
    user: "Map the clinical mention to the best-matching standardized concept.
Mention: {mention}
Candidates:
{candidates}
Answer with the candidate number only, or NONE if no candidate matches.",
};

const HYPOTHESIZE: Template = Template {
    kind: TaskKind::Hypothesize,
    version: TEMPLATE_VERSION,
    system: GENERAL_SYSTEM,
    user: "Propose the most plausible differential diagnoses for this case, most likely first.
Return a JSON array of at most {k_max} standardized disease names.

Case:
{narrative}

Standardized abnormal findings:
{findings}",
};

const VERBALIZE: Template = Template {
    kind: TaskKind::Verbalize,
    version: TEMPLATE_VERSION,
    system: GENERAL_SYSTEM,
    user: "Rewrite the knowledge graph path below as one plain-English sentence linking \
{start} to {end} through every intermediate concept, in order.
Path:
{hops}
Sentence:",
};

const PRUNE: Template = Template {
    kind: TaskKind::Prune,
    version: TEMPLATE_VERSION,
    system: GENERAL_SYSTEM,
    user: "For each numbered statement decide whether it gives a clinically coherent, \
guideline-supported explanation of this patient's presentation.
Answer with exactly {batch_size} comma-separated values, 1 for relevant and 0 for irrelevant, \
in statement order.

Case:
{narrative}

Guideline excerpts:
{guidelines}

Statements:
{statements}",
};

const ASSESS_COMPLEXITY: Template = Template {
    kind: TaskKind::AssessComplexity,
    version: TEMPLATE_VERSION,
    system: "You are the router of a diagnostic team. Follow the output format exactly.",
    user: "Decide whether this case needs multi-specialist deliberation. Signs of complexity \
include contradictory findings, multi-organ involvement, atypical presentation, and \
diagnostic uncertainty.

Case:
{narrative}

Standardized abnormal findings:
{findings}

Candidate diagnoses:
{hypotheses}

Answer SIMPLE or COMPLEX.",
};

const DISPATCH: Template = Template {
    kind: TaskKind::Dispatch,
    version: TEMPLATE_VERSION,
    system: "You are the dispatcher of a diagnostic team. Follow the output format exactly.",
    user: "Select the specialists needed to evaluate the candidate diagnosis for this case, \
considering the semantic types of the findings and the full narrative.
Available specialties: {roster}
Select at most {max_specialists}.

Case:
{narrative}

Standardized abnormal findings:
{findings}

Candidate diagnosis: {hypothesis}

Return a JSON array of specialty names.",
};

const SPECIALIST_OPINION: Template = Template {
    kind: TaskKind::SpecialistOpinion,
    version: TEMPLATE_VERSION,
    system: "You are a consultant in {specialty}. Judge the candidate diagnosis strictly \
from the perspective of your specialty and anchor your justification to the evidence items.",
    user: "Deliberation round: {iteration}
Candidate diagnosis: {hypothesis}

Case:
{narrative}

Standardized abnormal findings:
{findings}

{evidence}

Return a JSON object {\"stance\": \"S\"|\"N\"|\"O\", \"confidence\": <number in [0,1]>, \
\"sufficiency\": \"Suf\"|\"Ins\", \"justification\": <string>} where S supports, N is neutral, \
O opposes, and Ins means the evidence is insufficient to decide.",
};

const REFINE_QUERY: Template = Template {
    kind: TaskKind::RefineQuery,
    version: TEMPLATE_VERSION,
    system: "You coordinate evidence gathering for a diagnostic team. Follow the output format exactly.",
    user: "The specialists found the evidence for {hypothesis} insufficient. Formulate targeted \
retrieval queries that close the knowledge gaps below.

Case:
{narrative}

Standardized abnormal findings:
{findings}

Knowledge gaps:
{gaps}

Return a JSON array of 1 to 3 query strings.",
};

const INTERIM_CONSENSUS: Template = Template {
    kind: TaskKind::InterimConsensus,
    version: TEMPLATE_VERSION,
    system: "You are the generalist chairing a diagnostic team. Follow the output format exactly.",
    user: "Summarize the specialists' round {iteration} assessment of {hypothesis}.
Support score: {support_score}
Insufficiency ratio: {insufficiency_ratio}

Opinions:
{opinions}

Return a JSON object {\"report\": <string>}.",
};

const FINAL_ADJUDICATE: Template = Template {
    kind: TaskKind::FinalAdjudicate,
    version: TEMPLATE_VERSION,
    system: "You are the generalist making the final diagnostic decision. Follow the output format exactly.",
    user: "Adjudicate the final diagnosis from the deliberation record. Weigh supporting and \
contradicting evidence, unresolved uncertainties, and the patient context; do not simply pick \
the highest score.

Case:
{narrative}

Standardized abnormal findings:
{findings}

Deliberation record:
{deliberation}

Return a JSON object {\"diagnosis\": <one candidate name exactly>, \"report\": <string>}. \
End the report with a line starting \"Next steps:\" listing recommended investigations.",
};

const GENERALIST_DIRECT: Template = Template {
    kind: TaskKind::GeneralistDirect,
    version: TEMPLATE_VERSION,
    system: "You are a generalist physician. Follow the output format exactly.",
    user: "Choose the final diagnosis for this case from the candidates, using the evidence packages.

Case:
{narrative}

Standardized abnormal findings:
{findings}

Evidence by candidate:
{packages}

Return a JSON object {\"diagnosis\": <one candidate name exactly>, \"report\": <string>}. \
End the report with a line starting \"Next steps:\" listing recommended investigations.",
};

pub fn template(kind: TaskKind) -> &'static Template {
    match kind {
        TaskKind::Ner => &NER,
        TaskKind::Align => &ALIGN,
        TaskKind::Hypothesize => &HYPOTHESIZE,
        TaskKind::Verbalize => &VERBALIZE,
        TaskKind::Prune => &PRUNE,
        TaskKind::AssessComplexity => &ASSESS_COMPLEXITY,
        TaskKind::Dispatch => &DISPATCH,
        TaskKind::SpecialistOpinion => &SPECIALIST_OPINION,
        TaskKind::RefineQuery => &REFINE_QUERY,
        TaskKind::InterimConsensus => &INTERIM_CONSENSUS,
        TaskKind::FinalAdjudicate => &FINAL_ADJUDICATE,
        TaskKind::GeneralistDirect => &GENERALIST_DIRECT,
    }
}

/// Substitutes `{name}` placeholders. Errors on the first placeholder with no binding.
pub fn render(kind: TaskKind, text: &str, vars: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(text.len() + 256);
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            let name = &after[..ident_len];
            let value = vars.get(name).ok_or_else(|| Error::UnboundPlaceholder {
                task: kind,
                name: name.to_owned(),
            })?;
            out.push_str(value);
            rest = &after[ident_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}
