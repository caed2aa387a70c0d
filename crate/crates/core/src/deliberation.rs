//! Multi-agent reasoning: complexity routing, specialist dispatch, opinion
//! rounds with insufficiency-driven re-retrieval, consensus scoring with
//! early stop, and final adjudication.
//!
//! The coordinator is plain controller logic. Per iteration the stop rules
//! are checked in this order: strong support (`s > tau_high`), sufficient
//! evidence (`rho <= tau_suff`), iteration budget (`t + 1 == t_max`).

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::evidence::{build_supplement, merge_packages, render_evidence, CaseContext, EvidencePackage};
use crate::gateway::{vars, Complexity, Expect, Judgment, Stance, Sufficiency, TaskKind};
use crate::hypothesis::{render_findings, HypothesisSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityVerdict {
    pub flag: Complexity,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialistRoster {
    pub hypothesis: String,
    pub specialties: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistOpinion {
    pub specialty: String,
    pub hypothesis: String,
    pub iteration: usize,
    pub stance: Stance,
    pub confidence: f64,
    pub sufficiency: Sufficiency,
    pub justification: String,
}

/// Exact count ratio, kept alongside its floating-point value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub numerator: usize,
    pub denominator: usize,
}

impl Fraction {
    pub fn value(self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

fn count_fraction(opinions: &[SpecialistOpinion], hit: impl Fn(&SpecialistOpinion) -> bool) -> Result<Fraction> {
    if opinions.is_empty() {
        return Err(Error::NoOpinions);
    }
    Ok(Fraction {
        numerator: opinions.iter().filter(|o| hit(o)).count(),
        denominator: opinions.len(),
    })
}

/// Share of opinions that support the hypothesis. Confidence does not enter.
pub fn support_fraction(opinions: &[SpecialistOpinion]) -> Result<Fraction> {
    count_fraction(opinions, |o| o.stance == Stance::S)
}

/// Share of opinions that judge the evidence insufficient.
pub fn insufficiency_fraction(opinions: &[SpecialistOpinion]) -> Result<Fraction> {
    count_fraction(opinions, |o| o.sufficiency == Sufficiency::Ins)
}

pub fn consensus_score(opinions: &[SpecialistOpinion]) -> Result<f64> {
    support_fraction(opinions).map(Fraction::value)
}

pub fn insufficiency_ratio(opinions: &[SpecialistOpinion]) -> Result<f64> {
    insufficiency_fraction(opinions).map(Fraction::value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSnapshot {
    pub hypothesis: String,
    pub iteration: usize,
    pub opinions: Vec<SpecialistOpinion>,
    pub support: Fraction,
    pub insufficiency: Fraction,
    pub support_score: f64,
    pub insufficiency_ratio: f64,
    pub interim_report: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStop,
    Sufficient,
    Budget,
}

/// Loop result for one hypothesis.
#[derive(Debug, Clone)]
pub struct DeliberationOutcome {
    pub roster: SpecialistRoster,
    pub snapshots: Vec<ConsensusSnapshot>,
    pub stop_reason: StopReason,
    pub merges: usize,
    pub package: EvidencePackage,
}

impl DeliberationOutcome {
    pub fn final_snapshot(&self) -> &ConsensusSnapshot {
        self.snapshots.last().expect("at least one iteration runs")
    }

    pub fn iterations(&self) -> usize {
        self.snapshots.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Generalist,
    Deliberation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub final_diagnosis: String,
    pub route: Route,
    pub per_hypothesis_snapshots: Vec<ConsensusSnapshot>,
    pub consensus_narrative: String,
    pub recommended_next_steps: String,
}

/// Splits a report at its `Next steps:` line.
fn split_report(report: &str) -> (String, String) {
    match report.find("Next steps:") {
        Some(at) => (
            report[..at].trim().to_owned(),
            report[at + "Next steps:".len()..].trim().to_owned(),
        ),
        None => (report.trim().to_owned(), String::new()),
    }
}

fn hypothesis_list(hypotheses: &HypothesisSet) -> String {
    hypotheses
        .iter()
        .enumerate()
        .map(|(i, h)| format!("{}. {h}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn assess_complexity(ctx: &CaseContext<'_>, hypotheses: &HypothesisSet) -> Result<ComplexityVerdict> {
    let variables = vars([
        ("narrative", ctx.case.narrative.clone()),
        ("findings", render_findings(ctx.findings)),
        ("hypotheses", hypothesis_list(hypotheses)),
    ]);
    let (exchange, judgment) = ctx
        .gateway
        .ask(TaskKind::AssessComplexity, &variables, Expect::default())
        .map_err(|e| e.context(format!("case {}: routing", ctx.case.case_id)))?;
    let Judgment::Complexity(flag) = judgment else {
        unreachable!("AssessComplexity parses to a flag")
    };
    let verdict = ComplexityVerdict {
        flag,
        rationale: exchange.response_text.trim().to_owned(),
    };
    ctx.gateway.trace().decision("route", json!({ "verdict": verdict.flag }));
    Ok(verdict)
}

fn render_packages(packages: &[EvidencePackage]) -> String {
    packages
        .iter()
        .map(|p| format!("## Candidate: {}\n{}", p.hypothesis, render_evidence(p)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn adjudicated(
    ctx: &CaseContext<'_>,
    kind: TaskKind,
    variables: &crate::gateway::Variables,
    hypotheses: &HypothesisSet,
) -> Result<(String, String, String)> {
    let stage = |e: Error| e.context(format!("case {}: final diagnosis", ctx.case.case_id));
    let (_, judgment) = ctx.gateway.ask(kind, variables, Expect::default()).map_err(stage)?;
    let Judgment::Report(payload) = judgment else {
        unreachable!("{kind} parses to a report")
    };
    let chosen = payload.diagnosis.unwrap_or_default();
    let diagnosis = hypotheses
        .resolve(&chosen)
        .ok_or_else(|| stage(Error::AdjudicationMismatch(chosen.clone())))?
        .to_owned();
    let (narrative, next_steps) = split_report(&payload.report);
    Ok((diagnosis, narrative, next_steps))
}

/// Simple route: one generalist call over the iteration-0 packages.
pub fn generalist_direct_diagnosis(
    ctx: &CaseContext<'_>,
    hypotheses: &HypothesisSet,
    packages: &[EvidencePackage],
) -> Result<FinalReport> {
    let variables = vars([
        ("narrative", ctx.case.narrative.clone()),
        ("findings", render_findings(ctx.findings)),
        ("packages", render_packages(packages)),
    ]);
    let (final_diagnosis, consensus_narrative, recommended_next_steps) =
        adjudicated(ctx, TaskKind::GeneralistDirect, &variables, hypotheses)?;
    let report = FinalReport {
        final_diagnosis,
        route: Route::Generalist,
        per_hypothesis_snapshots: Vec::new(),
        consensus_narrative,
        recommended_next_steps,
    };
    ctx.gateway
        .trace()
        .decision("final", json!({ "route": report.route, "diagnosis": report.final_diagnosis }));
    Ok(report)
}

pub fn dispatch_specialists(ctx: &CaseContext<'_>, hypothesis: &str) -> Result<SpecialistRoster> {
    let stage = |e: Error| e.context(format!("case {}: dispatch for {hypothesis:?}", ctx.case.case_id));
    let roster = &ctx.params.roster;
    let variables = vars([
        ("narrative", ctx.case.narrative.clone()),
        ("findings", render_findings(ctx.findings)),
        ("hypothesis", hypothesis.to_owned()),
        ("roster", roster.join(", ")),
        ("max_specialists", ctx.params.max_specialists.to_string()),
    ]);
    let (_, judgment) = ctx
        .gateway
        .ask(TaskKind::Dispatch, &variables, Expect::default())
        .map_err(stage)?;
    let Judgment::Specialties(names) = judgment else {
        unreachable!("Dispatch parses to specialties")
    };
    let mut specialties: Vec<String> = Vec::new();
    for name in &names {
        let canonical = roster
            .iter()
            .find(|r| r.eq_ignore_ascii_case(name.trim()))
            .ok_or_else(|| stage(Error::UnknownSpecialty(name.clone())))?;
        if !specialties.contains(canonical) {
            specialties.push(canonical.clone());
        }
    }
    specialties.truncate(ctx.params.max_specialists);
    if specialties.is_empty() {
        return Err(stage(Error::EmptyRoster));
    }
    ctx.gateway
        .trace()
        .decision("dispatch", json!({ "hypothesis": hypothesis, "specialties": specialties }));
    Ok(SpecialistRoster {
        hypothesis: hypothesis.to_owned(),
        specialties,
    })
}

pub fn elicit_opinion(
    ctx: &CaseContext<'_>,
    specialty: &str,
    package: &EvidencePackage,
) -> Result<SpecialistOpinion> {
    let variables = vars([
        ("specialty", specialty.to_owned()),
        ("iteration", package.iteration.to_string()),
        ("hypothesis", package.hypothesis.clone()),
        ("narrative", ctx.case.narrative.clone()),
        ("findings", render_findings(ctx.findings)),
        ("evidence", render_evidence(package)),
    ]);
    let (_, judgment) = ctx
        .gateway
        .ask(TaskKind::SpecialistOpinion, &variables, Expect::default())
        .map_err(|e| {
            e.context(format!(
                "case {}: {specialty} opinion on {:?}, round {}",
                ctx.case.case_id, package.hypothesis, package.iteration
            ))
        })?;
    let Judgment::Opinion(o) = judgment else {
        unreachable!("SpecialistOpinion parses to an opinion")
    };
    Ok(SpecialistOpinion {
        specialty: specialty.to_owned(),
        hypothesis: package.hypothesis.clone(),
        iteration: package.iteration,
        stance: o.stance,
        confidence: o.confidence,
        sufficiency: o.sufficiency,
        justification: o.justification,
    })
}

fn stance_word(s: Stance) -> &'static str {
    match s {
        Stance::S => "support",
        Stance::N => "neutral",
        Stance::O => "oppose",
    }
}

fn render_opinions(opinions: &[SpecialistOpinion]) -> String {
    opinions
        .iter()
        .map(|o| {
            format!(
                "- {}: {} (confidence {:.2}), evidence {}: {}",
                o.specialty,
                stance_word(o.stance),
                o.confidence,
                match o.sufficiency {
                    Sufficiency::Suf => "sufficient",
                    Sufficiency::Ins => "insufficient",
                },
                o.justification
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn insufficient_justifications(opinions: &[SpecialistOpinion]) -> Vec<String> {
    opinions
        .iter()
        .filter(|o| o.sufficiency == Sufficiency::Ins)
        .map(|o| format!("{}: {}", o.specialty, o.justification))
        .collect()
}

/// One RefineQuery call over the insufficiency justifications.
pub fn formulate_refinement_queries(
    ctx: &CaseContext<'_>,
    hypothesis: &str,
    opinions: &[SpecialistOpinion],
) -> Result<Vec<String>> {
    let gaps = insufficient_justifications(opinions);
    if gaps.is_empty() {
        return Err(Error::NoOpinions.context("refinement needs at least one insufficiency judgment"));
    }
    let stage = |e: Error| e.context(format!("case {}: refinement for {hypothesis:?}", ctx.case.case_id));
    let variables = vars([
        ("hypothesis", hypothesis.to_owned()),
        ("narrative", ctx.case.narrative.clone()),
        ("findings", render_findings(ctx.findings)),
        (
            "gaps",
            gaps.iter().map(|g| format!("- {g}")).collect::<Vec<_>>().join("\n"),
        ),
    ]);
    let (_, judgment) = ctx
        .gateway
        .ask(TaskKind::RefineQuery, &variables, Expect::default())
        .map_err(stage)?;
    let Judgment::Queries(queries) = judgment else {
        unreachable!("RefineQuery parses to queries")
    };
    if queries.is_empty() {
        return Err(stage(Error::NoRefinementQueries));
    }
    if queries.len() > ctx.params.max_queries {
        return Err(stage(Error::Cardinality {
            task: TaskKind::RefineQuery,
            actual: queries.len(),
            max: ctx.params.max_queries,
        }));
    }
    Ok(queries)
}

fn interim_report(ctx: &CaseContext<'_>, snapshot_parts: (&str, usize, &[SpecialistOpinion], f64, f64)) -> Result<String> {
    let (hypothesis, iteration, opinions, support, insufficiency) = snapshot_parts;
    let variables = vars([
        ("hypothesis", hypothesis.to_owned()),
        ("iteration", iteration.to_string()),
        ("support_score", format!("{support:.2}")),
        ("insufficiency_ratio", format!("{insufficiency:.2}")),
        ("opinions", render_opinions(opinions)),
    ]);
    let (_, judgment) = ctx
        .gateway
        .ask(TaskKind::InterimConsensus, &variables, Expect::default())
        .map_err(|e| e.context(format!("case {}: interim report for {hypothesis:?}", ctx.case.case_id)))?;
    let Judgment::Report(payload) = judgment else {
        unreachable!("InterimConsensus parses to a report")
    };
    Ok(payload.report)
}

/// Runs the opinion/refinement loop for one hypothesis.
pub fn deliberate_hypothesis(
    ctx: &CaseContext<'_>,
    roster: SpecialistRoster,
    initial: EvidencePackage,
) -> Result<DeliberationOutcome> {
    let params = ctx.params;
    let mut package = initial;
    let mut snapshots = Vec::new();
    let mut merges = 0;
    let stop_reason = loop {
        let t = package.iteration;
        let opinions = roster
            .specialties
            .iter()
            .map(|s| elicit_opinion(ctx, s, &package))
            .collect::<Result<Vec<_>>>()?;
        let support = support_fraction(&opinions)?;
        let insufficiency = insufficiency_fraction(&opinions)?;
        let report = interim_report(
            ctx,
            (&package.hypothesis, t, &opinions, support.value(), insufficiency.value()),
        )?;
        let snapshot = ConsensusSnapshot {
            hypothesis: package.hypothesis.clone(),
            iteration: t,
            opinions,
            support,
            insufficiency,
            support_score: support.value(),
            insufficiency_ratio: insufficiency.value(),
            interim_report: report,
        };

        let stop = if snapshot.support_score > params.tau_high {
            Some(StopReason::EarlyStop)
        } else if snapshot.insufficiency_ratio <= params.tau_suff {
            Some(StopReason::Sufficient)
        } else if t + 1 >= params.t_max {
            Some(StopReason::Budget)
        } else {
            None
        };
        ctx.gateway.trace().decision(
            "consensus",
            json!({
                "hypothesis": snapshot.hypothesis,
                "iteration": t,
                "support": snapshot.support.to_string(),
                "insufficiency": snapshot.insufficiency.to_string(),
                "stop": stop,
            }),
        );
        let opinions = snapshot.opinions.clone();
        snapshots.push(snapshot);
        if let Some(reason) = stop {
            break reason;
        }

        let queries = formulate_refinement_queries(ctx, &package.hypothesis, &opinions)?;
        let supplement = build_supplement(ctx, &package, &queries)?;
        package = merge_packages(&package, &supplement)?;
        merges += 1;
        ctx.gateway.trace().decision(
            "merge",
            json!({
                "hypothesis": package.hypothesis,
                "iteration": package.iteration,
                "queries": queries,
                "excerpts": package.guideline_excerpts.len(),
                "valid_paths": package.valid_paths.len(),
            }),
        );
    };
    Ok(DeliberationOutcome {
        roster,
        snapshots,
        stop_reason,
        merges,
        package,
    })
}

/// Runs every hypothesis's loop independently, in hypothesis order.
pub fn run_deliberation_loop(
    ctx: &CaseContext<'_>,
    rosters: Vec<SpecialistRoster>,
    packages: Vec<EvidencePackage>,
) -> Result<Vec<DeliberationOutcome>> {
    rosters
        .into_iter()
        .zip(packages)
        .map(|(roster, package)| {
            debug_assert_eq!(roster.hypothesis, package.hypothesis);
            deliberate_hypothesis(ctx, roster, package)
        })
        .collect()
}

fn render_deliberation(outcomes: &[DeliberationOutcome]) -> String {
    outcomes
        .iter()
        .map(|o| {
            let last = o.final_snapshot();
            let gaps = insufficient_justifications(&last.opinions);
            format!(
                "## Candidate: {}\nSupport score: {:.2}\nRounds: {}\nOpinions:\n{}\nInterim report: {}\nUnresolved gaps:\n{}",
                last.hypothesis,
                last.support_score,
                o.iterations(),
                render_opinions(&last.opinions),
                last.interim_report,
                if gaps.is_empty() {
                    "(none)".to_owned()
                } else {
                    gaps.iter().map(|g| format!("- {g}")).collect::<Vec<_>>().join("\n")
                }
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn final_adjudication(
    ctx: &CaseContext<'_>,
    hypotheses: &HypothesisSet,
    outcomes: &[DeliberationOutcome],
) -> Result<FinalReport> {
    let variables = vars([
        ("narrative", ctx.case.narrative.clone()),
        ("findings", render_findings(ctx.findings)),
        ("deliberation", render_deliberation(outcomes)),
    ]);
    let (final_diagnosis, consensus_narrative, recommended_next_steps) =
        adjudicated(ctx, TaskKind::FinalAdjudicate, &variables, hypotheses)?;
    let report = FinalReport {
        final_diagnosis,
        route: Route::Deliberation,
        per_hypothesis_snapshots: outcomes.iter().map(|o| o.final_snapshot().clone()).collect(),
        consensus_narrative,
        recommended_next_steps,
    };
    ctx.gateway
        .trace()
        .decision("final", json!({ "route": report.route, "diagnosis": report.final_diagnosis }));
    Ok(report)
}
