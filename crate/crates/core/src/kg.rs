//! In-memory medical knowledge graph: concept matching, bounded simple-path
//! enumeration, and path verbalization.
//!
//! Traversal follows stored edge direction only. Loaders that want
//! bidirectional reasoning must materialize the inverse triples themselves.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{vars, Expect, Gateway, Judgment, TaskKind};
use crate::text::{jaccard, normalize, tokens};

pub const DEFAULT_MATCH_LIMIT: usize = 5;
pub const DEFAULT_MAX_HOPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub preferred_name: String,
    pub synonyms: BTreeSet<String>,
    pub semantic_types: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub source: String,
    pub relation: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgePath {
    pub hops: Vec<Edge>,
    pub verbalization: String,
}

impl KnowledgePath {
    pub fn start(&self) -> &str {
        &self.hops[0].source
    }

    pub fn end(&self) -> &str {
        &self.hops[self.hops.len() - 1].target
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    /// Structural identity: the ordered triple sequence.
    pub fn key(&self) -> String {
        let mut out = self.hops[0].source.clone();
        for hop in &self.hops {
            out.push_str(" -");
            out.push_str(&hop.relation);
            out.push_str("-> ");
            out.push_str(&hop.target);
        }
        out
    }

    pub fn is_verbalized(&self) -> bool {
        !self.verbalization.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchKind {
    ExactName,
    ExactSynonym,
    TokenOverlap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptMatch<'g> {
    pub concept: &'g Concept,
    pub kind: MatchKind,
    pub score: f64,
}

#[derive(Debug)]
struct MatchEntry {
    name: String,
    synonyms: HashSet<String>,
    token_sets: Vec<BTreeSet<String>>,
}

/// Immutable after load; safe to share across threads.
#[derive(Debug)]
pub struct KnowledgeGraph {
    concepts: Vec<Concept>,
    index: HashMap<String, usize>,
    /// Outgoing edges per concept, sorted by (relation, target).
    outgoing: Vec<Vec<Edge>>,
    edge_count: usize,
    match_entries: Vec<MatchEntry>,
}

fn split_set(field: Option<&str>) -> BTreeSet<String> {
    field
        .unwrap_or("")
        .split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn content_lines(source: impl BufRead) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    source
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| match l {
            Ok(text) => !text.trim().is_empty() && !text.starts_with('#'),
            Err(_) => true,
        })
}

impl KnowledgeGraph {
    /// Loads concepts then triples. Duplicate triples collapse; edges naming
    /// an unknown concept are rejected.
    pub fn load(triples: impl BufRead, concepts: impl BufRead) -> Result<Self> {
        let mut loaded = Vec::new();
        for (line_no, line) in content_lines(concepts) {
            let line = line?;
            let fields: Vec<&str> = line.split('\t').collect();
            let malformed = |reason: &str| Error::MalformedLine {
                source_name: "concepts".into(),
                line: line_no,
                reason: reason.into(),
            };
            if !(2..=4).contains(&fields.len()) {
                return Err(malformed("expected 2 to 4 tab-separated fields"));
            }
            let id = fields[0].trim();
            let name = fields[1].trim();
            if id.is_empty() {
                return Err(malformed("empty concept id"));
            }
            if name.is_empty() {
                return Err(malformed("empty preferred name"));
            }
            loaded.push(Concept {
                id: id.to_owned(),
                preferred_name: name.to_owned(),
                synonyms: split_set(fields.get(2).copied()),
                semantic_types: split_set(fields.get(3).copied()),
            });
        }

        let mut edges = BTreeSet::new();
        for (line_no, line) in content_lines(triples) {
            let line = line?;
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::MalformedLine {
                    source_name: "triples".into(),
                    line: line_no,
                    reason: "expected source_id, relation, target_id".into(),
                });
            }
            edges.insert(Edge {
                source: fields[0].to_owned(),
                relation: fields[1].to_owned(),
                target: fields[2].to_owned(),
            });
        }
        Self::from_parts(loaded, edges)
    }

    pub fn from_parts(concepts: Vec<Concept>, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut index = HashMap::with_capacity(concepts.len());
        for (i, c) in concepts.iter().enumerate() {
            if index.insert(c.id.clone(), i).is_some() {
                return Err(Error::DuplicateConcept(c.id.clone()));
            }
        }
        let unique: BTreeSet<Edge> = edges.into_iter().collect();
        let mut outgoing = vec![Vec::new(); concepts.len()];
        for edge in &unique {
            let src = *index
                .get(&edge.source)
                .ok_or_else(|| Error::DanglingReference(edge.source.clone()))?;
            if !index.contains_key(&edge.target) {
                return Err(Error::DanglingReference(edge.target.clone()));
            }
            outgoing[src].push(edge.clone());
        }
        for list in &mut outgoing {
            list.sort_by(|a, b| (&a.relation, &a.target).cmp(&(&b.relation, &b.target)));
        }
        let match_entries = concepts
            .iter()
            .map(|c| {
                let mut token_sets = vec![tokens(&c.preferred_name)];
                token_sets.extend(c.synonyms.iter().map(|s| tokens(s)));
                MatchEntry {
                    name: normalize(&c.preferred_name),
                    synonyms: c.synonyms.iter().map(|s| normalize(s)).collect(),
                    token_sets,
                }
            })
            .collect();
        Ok(KnowledgeGraph {
            concepts,
            index,
            outgoing,
            edge_count: unique.len(),
            match_entries,
        })
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn concept(&self, id: &str) -> Option<&Concept> {
        self.index.get(id).map(|&i| &self.concepts[i])
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.outgoing.iter().flatten()
    }

    fn require(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownConcept(id.to_owned()))
    }

    /// Ranks concepts for a raw mention: exact preferred-name match, then
    /// exact synonym match (both score 1.0), then best token Jaccard over
    /// all names. Ties go to the smaller concept id.
    pub fn match_entity(&self, raw_mention: &str, limit: usize) -> Result<Vec<ConceptMatch<'_>>> {
        let mention = normalize(raw_mention);
        if mention.is_empty() {
            return Err(Error::EmptyMention(raw_mention.to_owned()));
        }
        let mention_tokens = tokens(&mention);
        let mut hits: Vec<ConceptMatch<'_>> = self
            .concepts
            .iter()
            .zip(&self.match_entries)
            .filter_map(|(concept, entry)| {
                let (kind, score) = if entry.name == mention {
                    (MatchKind::ExactName, 1.0)
                } else if entry.synonyms.contains(&mention) {
                    (MatchKind::ExactSynonym, 1.0)
                } else {
                    let best = entry
                        .token_sets
                        .iter()
                        .map(|t| jaccard(&mention_tokens, t))
                        .fold(0.0, f64::max);
                    if best <= 0.0 {
                        return None;
                    }
                    (MatchKind::TokenOverlap, best)
                };
                Some(ConceptMatch {
                    concept,
                    kind,
                    score,
                })
            })
            .collect();
        hits.sort_by(|a, b| {
            a.kind
                .cmp(&b.kind)
                .then(b.score.total_cmp(&a.score))
                .then_with(|| a.concept.id.cmp(&b.concept.id))
        });
        hits.truncate(limit);
        Ok(hits)
    }

    /// All simple directed paths from `start` to `end` with at most `max_hops`
    /// edges, ordered by length and then lexicographically by the sequence of
    /// (relation, target) pairs.
    pub fn enumerate_paths(&self, start: &str, end: &str, max_hops: usize) -> Result<Vec<KnowledgePath>> {
        let start_idx = self.require(start)?;
        let end_idx = self.require(end)?;
        if start_idx == end_idx {
            return Err(Error::StartEqualsEnd(start.to_owned()));
        }
        if max_hops == 0 {
            return Err(Error::ZeroHopBound);
        }
        let mut found = Vec::new();
        let mut visited = vec![false; self.concepts.len()];
        let mut stack = Vec::with_capacity(max_hops);
        visited[start_idx] = true;
        self.walk(start_idx, end_idx, max_hops, &mut visited, &mut stack, &mut found);
        // DFS over sorted adjacency is already lexicographic; a stable sort by
        // length yields the required order.
        found.sort_by_key(|p: &KnowledgePath| p.hops.len());
        Ok(found)
    }

    fn walk(
        &self,
        at: usize,
        end: usize,
        budget: usize,
        visited: &mut [bool],
        stack: &mut Vec<Edge>,
        found: &mut Vec<KnowledgePath>,
    ) {
        for edge in &self.outgoing[at] {
            let next = self.index[&edge.target];
            if visited[next] {
                continue;
            }
            stack.push(edge.clone());
            if next == end {
                found.push(KnowledgePath {
                    hops: stack.clone(),
                    verbalization: String::new(),
                });
            } else if budget > 1 {
                visited[next] = true;
                self.walk(next, end, budget - 1, visited, stack, found);
                visited[next] = false;
            }
            stack.pop();
        }
    }

    fn display_name<'a>(&'a self, id: &'a str) -> &'a str {
        self.concept(id).map(|c| c.preferred_name.as_str()).unwrap_or(id)
    }

    /// Renders every hop as `n. <source> --relation--> <target>`.
    pub fn render_hops(&self, path: &KnowledgePath) -> String {
        path.hops
            .iter()
            .enumerate()
            .map(|(i, h)| {
                format!(
                    "{}. {} --{}--> {}",
                    i + 1,
                    self.display_name(&h.source),
                    h.relation,
                    self.display_name(&h.target)
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Asks the model for a one-sentence rendering of the path.
    pub fn verbalize_path(&self, mut path: KnowledgePath, gateway: &Gateway) -> Result<KnowledgePath> {
        let variables = vars([
            ("start", self.display_name(path.start()).to_owned()),
            ("end", self.display_name(path.end()).to_owned()),
            ("hops", self.render_hops(&path)),
        ]);
        let context = |e: Error| e.context(format!("verbalizing path {}", path.key()));
        let (_, judgment) = gateway
            .ask(TaskKind::Verbalize, &variables, Expect::default())
            .map_err(context)?;
        match judgment {
            Judgment::Sentence(s) => {
                path.verbalization = s;
                Ok(path)
            }
            other => unreachable!("Verbalize parsed as {other:?}"),
        }
    }
}
