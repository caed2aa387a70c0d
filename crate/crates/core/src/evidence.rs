//! Per-hypothesis evidence packages: guideline excerpts, verbalized KG
//! paths, and batched guideline-informed pruning.

use std::collections::HashSet;

use serde_json::json;

use crate::error::{Error, Result};
use crate::gateway::{vars, Expect, Gateway, Judgment, TaskKind};
use crate::guideline::{CompositeQuery, RankedSegment, Retriever};
use crate::hypothesis::{align_mention, finding_names, AbnormalEntity, CaseDescription};
use crate::kg::{Concept, KnowledgeGraph, KnowledgePath};
use crate::params::Params;
use crate::text::normalize;
use crate::trace::TraceEvent;

/// Everything a case's pipeline stages share.
#[derive(Clone, Copy)]
pub struct CaseContext<'a> {
    pub case: &'a CaseDescription,
    pub findings: &'a [AbnormalEntity],
    pub graph: &'a KnowledgeGraph,
    pub retriever: &'a Retriever,
    pub gateway: &'a Gateway,
    pub params: &'a Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgedPath {
    pub path: KnowledgePath,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneBatchRecord {
    pub iteration: usize,
    pub batch_index: usize,
    pub paths: Vec<KnowledgePath>,
    pub judgments: Vec<bool>,
    pub guideline_context_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidencePackage {
    pub hypothesis: String,
    pub iteration: usize,
    /// KG concept the hypothesis aligned to; `None` means guideline-only evidence.
    pub disease_concept: Option<Concept>,
    pub guideline_excerpts: Vec<RankedSegment>,
    pub valid_paths: Vec<KnowledgePath>,
    /// Every enumerated path with its judgment, for audit.
    pub judged_paths: Vec<JudgedPath>,
    pub batches: Vec<PruneBatchRecord>,
}

impl EvidencePackage {
    pub fn degraded(&self) -> bool {
        self.disease_concept.is_none()
    }

    pub fn rejected_paths(&self) -> impl Iterator<Item = &KnowledgePath> {
        self.judged_paths.iter().filter(|j| !j.valid).map(|j| &j.path)
    }

    /// Top reranked excerpts used as pruning context.
    pub fn guideline_top(&self, count: usize) -> &[RankedSegment] {
        &self.guideline_excerpts[..count.min(self.guideline_excerpts.len())]
    }

    fn judged_keys(&self) -> HashSet<String> {
        self.judged_paths.iter().map(|j| j.path.key()).collect()
    }
}

/// Evidence block shown to specialists; identical for every specialist of an iteration.
pub fn render_evidence(package: &EvidencePackage) -> String {
    let mut out = String::from("Guideline excerpts:\n");
    if package.guideline_excerpts.is_empty() {
        out.push_str("(none)\n");
    }
    for (i, g) in package.guideline_excerpts.iter().enumerate() {
        out.push_str(&format!(
            "G{}. [{}] {}\n",
            i + 1,
            g.segment.source_doc,
            g.segment.text
        ));
    }
    out.push_str("Knowledge graph evidence:\n");
    if package.valid_paths.is_empty() {
        out.push_str("(none)");
    }
    let lines: Vec<String> = package
        .valid_paths
        .iter()
        .enumerate()
        .map(|(i, p)| format!("P{}. {}", i + 1, p.verbalization))
        .collect();
    out.push_str(&lines.join("\n"));
    out
}

/// Aligns a diagnosis name to a KG concept through match + Align.
pub fn align_hypothesis(ctx: &CaseContext<'_>, hypothesis: &str) -> Result<Option<Concept>> {
    if normalize(hypothesis).is_empty() {
        return Ok(None);
    }
    let candidates: Vec<&Concept> = ctx
        .graph
        .match_entity(hypothesis, ctx.params.match_limit)?
        .into_iter()
        .map(|m| m.concept)
        .collect();
    Ok(align_mention(hypothesis, &candidates, ctx.gateway)?.cloned())
}

/// Enumerates finding-to-disease paths, verbalizes and prunes them.
fn gather_paths(
    ctx: &CaseContext<'_>,
    disease: &Concept,
    findings: &[&AbnormalEntity],
    skip: &HashSet<String>,
    guideline_top: &[RankedSegment],
    iteration: usize,
) -> Result<(Vec<KnowledgePath>, Vec<JudgedPath>, Vec<PruneBatchRecord>)> {
    let mut enumerated = Vec::new();
    for finding in findings {
        if finding.concept.id == disease.id {
            continue;
        }
        for path in ctx
            .graph
            .enumerate_paths(&finding.concept.id, &disease.id, ctx.params.h_max)?
        {
            if !skip.contains(&path.key()) {
                enumerated.push(path);
            }
        }
    }
    let verbalized = enumerated
        .into_iter()
        .map(|p| ctx.graph.verbalize_path(p, ctx.gateway))
        .collect::<Result<Vec<_>>>()?;
    let (valid, judged, mut batches) = prune_paths(
        &verbalized,
        ctx.case,
        guideline_top,
        ctx.gateway,
        ctx.params.prune_batch,
    )?;
    for b in &mut batches {
        b.iteration = iteration;
    }
    Ok((valid, judged, batches))
}

fn trace_paths(gateway: &Gateway, hypothesis: &str, iteration: usize, judged: &[JudgedPath]) {
    gateway.trace().append(TraceEvent::Paths {
        hypothesis: hypothesis.to_owned(),
        iteration,
        enumerated: judged.iter().map(|j| j.path.key()).collect(),
        valid: judged.iter().map(|j| j.valid).collect(),
    });
}

pub fn build_initial_package(ctx: &CaseContext<'_>, hypothesis: &str) -> Result<EvidencePackage> {
    let stage = |e: Error| e.context(format!("case {}: evidence for {hypothesis:?}", ctx.case.case_id));
    let disease = align_hypothesis(ctx, hypothesis).map_err(stage)?;
    let excerpts = ctx
        .retriever
        .g_ret(
            hypothesis,
            &finding_names(ctx.findings),
            ctx.params.k,
            ctx.params.n,
            ctx.gateway.trace(),
        )
        .map_err(stage)?;
    let mut package = EvidencePackage {
        hypothesis: hypothesis.to_owned(),
        iteration: 0,
        disease_concept: disease,
        guideline_excerpts: excerpts,
        valid_paths: Vec::new(),
        judged_paths: Vec::new(),
        batches: Vec::new(),
    };
    if let Some(disease) = package.disease_concept.clone() {
        let findings: Vec<&AbnormalEntity> = ctx.findings.iter().collect();
        let top = package.guideline_top(ctx.params.guideline_top).to_vec();
        let (valid, judged, batches) =
            gather_paths(ctx, &disease, &findings, &HashSet::new(), &top, 0).map_err(stage)?;
        package.valid_paths = valid;
        package.judged_paths = judged;
        package.batches = batches;
    }
    trace_paths(ctx.gateway, hypothesis, 0, &package.judged_paths);
    ctx.gateway.trace().decision(
        "evidence",
        json!({
            "hypothesis": hypothesis,
            "iteration": 0,
            "disease_concept": package.disease_concept.as_ref().map(|c| c.id.clone()),
            "degraded": package.degraded(),
            "excerpts": package.guideline_excerpts.iter().map(|g| g.id().to_owned()).collect::<Vec<_>>(),
            "valid_paths": package.valid_paths.len(),
            "rejected_paths": package.rejected_paths().count(),
        }),
    );
    Ok(package)
}

fn render_guidelines(top: &[RankedSegment]) -> String {
    if top.is_empty() {
        return "(none)".into();
    }
    top.iter()
        .map(|g| format!("[{}] {}", g.id(), g.segment.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Judges paths in contiguous batches, one Prune exchange per batch.
pub fn prune_paths(
    paths: &[KnowledgePath],
    case: &CaseDescription,
    guideline_top: &[RankedSegment],
    gateway: &Gateway,
    batch_size: usize,
) -> Result<(Vec<KnowledgePath>, Vec<JudgedPath>, Vec<PruneBatchRecord>)> {
    assert!(batch_size > 0, "prune batch size must be positive");
    let guidelines = render_guidelines(guideline_top);
    let context_ids: Vec<String> = guideline_top.iter().map(|g| g.id().to_owned()).collect();
    let mut valid = Vec::new();
    let mut judged = Vec::with_capacity(paths.len());
    let mut batches = Vec::new();
    for (batch_index, batch) in paths.chunks(batch_size).enumerate() {
        let statements = batch
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}. {}", i + 1, p.verbalization))
            .collect::<Vec<_>>()
            .join("\n");
        let variables = vars([
            ("narrative", case.narrative.clone()),
            ("guidelines", guidelines.clone()),
            ("statements", statements),
            ("batch_size", batch.len().to_string()),
        ]);
        let expect = Expect {
            batch: batch.len(),
            ..Expect::default()
        };
        let (_, judgment) = gateway.ask(TaskKind::Prune, &variables, expect)?;
        let Judgment::Bits(bits) = judgment else {
            unreachable!("Prune parses to bits")
        };
        for (path, &keep) in batch.iter().zip(&bits) {
            if keep {
                valid.push(path.clone());
            }
            judged.push(JudgedPath {
                path: path.clone(),
                valid: keep,
            });
        }
        batches.push(PruneBatchRecord {
            iteration: 0,
            batch_index,
            paths: batch.to_vec(),
            judgments: bits,
            guideline_context_ids: context_ids.clone(),
        });
    }
    Ok((valid, judged, batches))
}

/// Unions `supplement` into `base`: excerpts by segment id, paths by triple
/// sequence, base order first.
pub fn merge_packages(base: &EvidencePackage, supplement: &EvidencePackage) -> Result<EvidencePackage> {
    if base.hypothesis != supplement.hypothesis {
        return Err(Error::HypothesisMismatch {
            base: base.hypothesis.clone(),
            supplement: supplement.hypothesis.clone(),
        });
    }
    let mut merged = base.clone();
    merged.iteration = base.iteration + 1;

    let mut excerpt_ids: HashSet<String> = base.guideline_excerpts.iter().map(|g| g.id().to_owned()).collect();
    for g in &supplement.guideline_excerpts {
        if excerpt_ids.insert(g.id().to_owned()) {
            merged.guideline_excerpts.push(g.clone());
        }
    }
    let mut path_keys: HashSet<String> = base.valid_paths.iter().map(KnowledgePath::key).collect();
    for p in &supplement.valid_paths {
        if path_keys.insert(p.key()) {
            merged.valid_paths.push(p.clone());
        }
    }
    let mut judged_keys = base.judged_keys();
    for j in &supplement.judged_paths {
        if judged_keys.insert(j.path.key()) {
            merged.judged_paths.push(j.clone());
        }
    }
    for b in &supplement.batches {
        if !merged.batches.contains(b) {
            merged.batches.push(b.clone());
        }
    }
    Ok(merged)
}

fn names_of(concept: &Concept) -> impl Iterator<Item = String> + '_ {
    std::iter::once(normalize(&concept.preferred_name)).chain(concept.synonyms.iter().map(|s| normalize(s)))
}

/// Whole-token containment of `name` in `text`, both normalized.
fn mentions(text: &str, name: &str) -> bool {
    !name.is_empty() && format!(" {text} ").contains(&format!(" {name} "))
}

/// Runs refinement queries through retrieval and re-enumerates paths for
/// findings the queries name. The result carries `base.iteration` so that
/// merging it advances the iteration by one.
pub fn build_supplement(
    ctx: &CaseContext<'_>,
    base: &EvidencePackage,
    queries: &[String],
) -> Result<EvidencePackage> {
    let stage = |e: Error| {
        e.context(format!(
            "case {}: supplementary evidence for {:?}",
            ctx.case.case_id, base.hypothesis
        ))
    };
    let mut excerpts: Vec<RankedSegment> = Vec::new();
    let mut ids = HashSet::new();
    for q in queries {
        let query = CompositeQuery::free_text(base.hypothesis.clone(), q.clone());
        for g in ctx
            .retriever
            .retrieve(&query, ctx.params.k, ctx.params.n, ctx.gateway.trace())
            .map_err(stage)?
        {
            if ids.insert(g.id().to_owned()) {
                excerpts.push(g);
            }
        }
    }
    let mut supplement = EvidencePackage {
        hypothesis: base.hypothesis.clone(),
        iteration: base.iteration,
        disease_concept: base.disease_concept.clone(),
        guideline_excerpts: excerpts,
        valid_paths: Vec::new(),
        judged_paths: Vec::new(),
        batches: Vec::new(),
    };
    if let Some(disease) = &base.disease_concept {
        let normalized: Vec<String> = queries.iter().map(|q| normalize(q)).collect();
        let named: Vec<&AbnormalEntity> = ctx
            .findings
            .iter()
            .filter(|f| names_of(&f.concept).any(|name| normalized.iter().any(|q| mentions(q, &name))))
            .collect();
        if !named.is_empty() {
            let top = base.guideline_top(ctx.params.guideline_top).to_vec();
            let (valid, judged, batches) =
                gather_paths(ctx, disease, &named, &base.judged_keys(), &top, base.iteration + 1)
                    .map_err(stage)?;
            supplement.valid_paths = valid;
            supplement.judged_paths = judged;
            supplement.batches = batches;
        }
    }
    trace_paths(
        ctx.gateway,
        &base.hypothesis,
        base.iteration + 1,
        &supplement.judged_paths,
    );
    Ok(supplement)
}
