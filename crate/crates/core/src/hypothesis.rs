//! Abnormal-finding extraction, KG standardization, and initial differential.

use std::collections::HashSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gateway::{vars, Expect, Gateway, Judgment, TaskKind};
use crate::kg::{Concept, KnowledgeGraph};
use crate::text::normalize;

pub const DEFAULT_K_MAX: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseDescription {
    pub case_id: String,
    pub narrative: String,
    /// Evaluation label. Never rendered into any prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

pub fn read_cases(source: impl BufRead) -> Result<Vec<CaseDescription>> {
    let mut cases = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedLine {
            source_name: "cases".into(),
            line: idx + 1,
            reason,
        };
        let case: CaseDescription = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if case.narrative.trim().is_empty() {
            return Err(malformed("narrative is empty".into()));
        }
        if !ids.insert(case.case_id.clone()) {
            return Err(malformed(format!("duplicate case id {}", case.case_id)));
        }
        cases.push(case);
    }
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbnormalEntity {
    pub raw_mention: String,
    pub concept: Concept,
    pub candidate_set: Vec<Concept>,
}

impl AbnormalEntity {
    pub fn name(&self) -> &str {
        &self.concept.preferred_name
    }
}

/// Preferred names of the findings, in extraction order.
pub fn finding_names(findings: &[AbnormalEntity]) -> Vec<String> {
    findings.iter().map(|f| f.name().to_owned()).collect()
}

/// Bulleted finding list for prompts; `(none)` when empty.
pub fn render_findings(findings: &[AbnormalEntity]) -> String {
    if findings.is_empty() {
        return "(none)".into();
    }
    findings
        .iter()
        .map(|f| {
            let types: Vec<&str> = f.concept.semantic_types.iter().map(String::as_str).collect();
            if types.is_empty() {
                format!("- {}", f.name())
            } else {
                format!("- {} [{}]", f.name(), types.join(", "))
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_candidates(candidates: &[&Concept]) -> String {
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut line = format!("{}. {} ({})", i + 1, c.preferred_name, c.id);
            if !c.synonyms.is_empty() {
                let syn: Vec<&str> = c.synonyms.iter().map(String::as_str).collect();
                line.push_str(&format!("; also: {}", syn.join(", ")));
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the aligner to pick one of `candidates` for `mention`. No candidates
/// means no call and no match.
pub fn align_mention<'g>(
    mention: &str,
    candidates: &[&'g Concept],
    gateway: &Gateway,
) -> Result<Option<&'g Concept>> {
    if candidates.is_empty() {
        return Ok(None);
    }
    let variables = vars([
        ("mention", mention.to_owned()),
        ("candidates", render_candidates(candidates)),
    ]);
    let expect = Expect {
        candidates: candidates.len(),
        ..Expect::default()
    };
    match gateway.ask(TaskKind::Align, &variables, expect)?.1 {
        Judgment::Alignment(choice) => Ok(choice.map(|i| candidates[i])),
        other => unreachable!("Align parsed as {other:?}"),
    }
}

/// Named-entity extraction, candidate matching, and alignment. Mentions the
/// aligner rejects are dropped; repeated concepts keep their first mention.
pub fn extract_abnormal_entities(
    case: &CaseDescription,
    gateway: &Gateway,
    graph: &KnowledgeGraph,
    match_limit: usize,
) -> Result<Vec<AbnormalEntity>> {
    let ctx = |e: Error| e.context(format!("case {}: extracting findings", case.case_id));
    let (_, judgment) = gateway
        .ask(TaskKind::Ner, &vars([("narrative", case.narrative.as_str())]), Expect::default())
        .map_err(ctx)?;
    let Judgment::Entities(mentions) = judgment else {
        unreachable!("Ner parses to entities")
    };

    let mut seen = HashSet::new();
    let mut findings = Vec::new();
    let mut dropped = Vec::new();
    for mention in &mentions {
        if normalize(mention).is_empty() {
            dropped.push(mention.clone());
            continue;
        }
        let candidates: Vec<&Concept> = graph
            .match_entity(mention, match_limit)
            .map_err(ctx)?
            .into_iter()
            .map(|m| m.concept)
            .collect();
        match align_mention(mention, &candidates, gateway).map_err(ctx)? {
            Some(concept) => {
                if seen.insert(concept.id.clone()) {
                    findings.push(AbnormalEntity {
                        raw_mention: mention.clone(),
                        concept: concept.clone(),
                        candidate_set: candidates.iter().map(|c| (*c).clone()).collect(),
                    });
                }
            }
            None => dropped.push(mention.clone()),
        }
    }
    gateway.trace().decision(
        "findings",
        json!({
            "raw": mentions,
            "standardized": findings.iter().map(|f| json!({"mention": f.raw_mention, "concept": f.concept.id, "name": f.name()})).collect::<Vec<_>>(),
            "unaligned": dropped,
        }),
    );
    Ok(findings)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub hypotheses: Vec<String>,
    pub k_max: usize,
}

impl HypothesisSet {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.hypotheses.iter()
    }

    /// The member equal to `name` ignoring case and punctuation.
    pub fn resolve(&self, name: &str) -> Option<&str> {
        let wanted = normalize(name);
        self.hypotheses
            .iter()
            .find(|h| normalize(h) == wanted)
            .map(String::as_str)
    }
}

pub fn generate_hypotheses(
    case: &CaseDescription,
    findings: &[AbnormalEntity],
    gateway: &Gateway,
    k_max: usize,
) -> Result<HypothesisSet> {
    let ctx = |e: Error| e.context(format!("case {}: generating hypotheses", case.case_id));
    let variables = vars([
        ("narrative", case.narrative.clone()),
        ("findings", render_findings(findings)),
        ("k_max", k_max.to_string()),
    ]);
    let expect = Expect {
        k_max,
        ..Expect::default()
    };
    let (_, judgment) = gateway.ask(TaskKind::Hypothesize, &variables, expect).map_err(ctx)?;
    let Judgment::Diagnoses(raw) = judgment else {
        unreachable!("Hypothesize parses to diagnoses")
    };
    let mut seen = HashSet::new();
    let hypotheses: Vec<String> = raw.into_iter().filter(|h| seen.insert(normalize(h))).collect();
    if hypotheses.is_empty() {
        return Err(ctx(Error::NoHypotheses));
    }
    gateway
        .trace()
        .decision("hypotheses", json!({ "hypotheses": hypotheses, "k_max": k_max }));
    Ok(HypothesisSet { hypotheses, k_max })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::ScriptedBackend;
    use crate::trace::TraceLog;

    const CONCEPTS: &str = "\
F1\tJaundice\ticterus\tSign or Symptom
F2\tElevated alkaline phosphatase\televated ALP\tLaboratory Finding
F3\tPruritus\titching\tSign or Symptom
";

    fn graph() -> KnowledgeGraph {
        KnowledgeGraph::load("".as_bytes(), CONCEPTS.as_bytes()).unwrap()
    }

    fn case() -> CaseDescription {
        CaseDescription {
            case_id: "c1".into(),
            narrative: "Yellow skin, itching, ALP 420 U/L.".into(),
            ground_truth: Some("PBC".into()),
        }
    }

    /// NER returns `ner`; Align picks candidate 1 unless the mention is in `reject`.
    fn gateway(ner: &'static str, reject: &'static [&'static str]) -> Gateway {
        Gateway::new(
            Arc::new(ScriptedBackend::new(move |r| match r.task.kind {
                TaskKind::Ner => Ok(ner.into()),
                TaskKind::Align => {
                    let mention = r
                        .rendered_prompt
                        .lines()
                        .find_map(|l| l.strip_prefix("Mention: "))
                        .unwrap();
                    Ok(if reject.contains(&mention) { "NONE".into() } else { "1".into() })
                }
                other => panic!("unexpected {other}"),
            })),
            TraceLog::new("c1"),
        )
    }

    #[test]
    fn findings_follow_narrative_order() {
        let gw = gateway(r#"["jaundice","elevated ALP"]"#, &[]);
        let f = extract_abnormal_entities(&case(), &gw, &graph(), 5).unwrap();
        let ids: Vec<&str> = f.iter().map(|e| e.concept.id.as_str()).collect();
        assert_eq!(ids, vec!["F1", "F2"]);
        for e in &f {
            assert!(e.candidate_set.contains(&e.concept));
        }
    }

    #[test]
    fn same_concept_collapses_to_first_mention() {
        let gw = gateway(r#"["jaundice","icterus"]"#, &[]);
        let f = extract_abnormal_entities(&case(), &gw, &graph(), 5).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].raw_mention, "jaundice");
    }

    #[test]
    fn none_verdict_drops_mention() {
        let gw = gateway(r#"["pruritus","vague malaise jaundice"]"#, &["vague malaise jaundice"]);
        let f = extract_abnormal_entities(&case(), &gw, &graph(), 5).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].concept.id, "F3");
    }

    #[test]
    fn unmatched_mention_makes_no_align_call() {
        let gw = gateway(r#"["splenomegaly"]"#, &[]);
        let f = extract_abnormal_entities(&case(), &gw, &graph(), 5).unwrap();
        assert!(f.is_empty());
        assert!(gw.trace().exchanges(TaskKind::Align).is_empty());
    }

    fn hypo_gateway(resp: &'static str) -> Gateway {
        Gateway::new(
            Arc::new(ScriptedBackend::new(move |_| Ok(resp.into()))),
            TraceLog::new("c1"),
        )
    }

    #[test]
    fn hypotheses_scripted() {
        let h = generate_hypotheses(&case(), &[], &hypo_gateway(r#"["PBC","AIH"]"#), 4).unwrap();
        assert_eq!(h.hypotheses, vec!["PBC", "AIH"]);
    }

    #[test]
    fn hypotheses_dedup_case_insensitive() {
        let h = generate_hypotheses(&case(), &[], &hypo_gateway(r#"["PBC","pbc","AIH"]"#), 4).unwrap();
        assert_eq!(h.hypotheses, vec!["PBC", "AIH"]);
    }

    #[test]
    fn hypotheses_over_k_max_and_empty() {
        let err = generate_hypotheses(&case(), &[], &hypo_gateway(r#"["A","B","C","D","E"]"#), 4).unwrap_err();
        assert!(matches!(err.root(), Error::Cardinality { actual: 5, max: 4, .. }));
        let err = generate_hypotheses(&case(), &[], &hypo_gateway("[]"), 4).unwrap_err();
        assert!(matches!(err.root(), Error::NoHypotheses));
        assert!(err.to_string().contains("case c1"));
    }

    #[test]
    fn ground_truth_stays_out_of_prompts() {
        let gw = gateway(r#"["jaundice"]"#, &[]);
        let f = extract_abnormal_entities(&case(), &gw, &graph(), 5).unwrap();
        let gw2 = hypo_gateway(r#"["AIH"]"#);
        generate_hypotheses(&case(), &f, &gw2, 4).unwrap();
        for trace in [gw.trace(), gw2.trace()] {
            for r in trace.records() {
                if let crate::trace::TraceEvent::Exchange { rendered_prompt, system_prompt, .. } = r.event {
                    assert!(!rendered_prompt.contains("PBC"));
                    assert!(!system_prompt.contains("PBC"));
                }
            }
        }
    }

    #[test]
    fn reads_case_lines() {
        let text = r#"{"case_id":"a","narrative":"x","ground_truth":"PBC"}
{"case_id":"b","narrative":"y"}
"#;
        let cases = read_cases(text.as_bytes()).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[1].ground_truth, None);
        assert!(read_cases(r#"{"case_id":"a","narrative":" "}"#.as_bytes()).is_err());
    }
}
