//! Guideline corpus index and two-stage retrieval: dense cosine Top-K over
//! unit-normalized embeddings, then pairwise cross-scoring to Top-N.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::live::{LiveEmbeddingClient, LiveRerankClient};
use crate::text::{jaccard, normalize, tokens};
use crate::trace::{ScoredId, TraceEvent, TraceLog};

pub const DEFAULT_DENSE_K: usize = 8;
pub const DEFAULT_RERANK_N: usize = 4;
const EMBED_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineSegment {
    pub segment_id: String,
    pub source_doc: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    DenseOnly,
    Reranked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedSegment {
    pub segment: Arc<GuidelineSegment>,
    pub dense_score: f64,
    pub rerank_score: Option<f64>,
    pub stage: Stage,
}

impl RankedSegment {
    pub fn id(&self) -> &str {
        &self.segment.segment_id
    }

    fn scored_id(&self) -> ScoredId {
        ScoredId {
            segment_id: self.segment.segment_id.clone(),
            dense_score: self.dense_score,
            rerank_score: self.rerank_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeQuery {
    pub hypothesis: String,
    pub findings: Vec<String>,
    pub rendered: String,
}

impl CompositeQuery {
    /// Renders `"<hypothesis> | findings: <f1>; <f2>; ..."` in finding order.
    pub fn new(hypothesis: impl Into<String>, findings: Vec<String>) -> Self {
        let hypothesis = hypothesis.into();
        let rendered = format!("{hypothesis} | findings: {}", findings.join("; "));
        CompositeQuery {
            hypothesis,
            findings,
            rendered,
        }
    }

    /// A free-text query, used for refinement rounds.
    pub fn free_text(hypothesis: impl Into<String>, text: impl Into<String>) -> Self {
        CompositeQuery {
            hypothesis: hypothesis.into(),
            findings: Vec::new(),
            rendered: text.into(),
        }
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Pairwise relevance of a segment text to a query text.
pub trait CrossScorer: Send + Sync {
    fn score(&self, query: &str, text: &str) -> Result<f64>;
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Deserialize)]
struct SegmentLine {
    segment_id: String,
    source_doc: String,
    text: String,
}

pub fn read_segments(source: impl BufRead) -> Result<Vec<GuidelineSegment>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SegmentLine = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            source_name: "corpus".into(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(GuidelineSegment {
            segment_id: s.segment_id,
            source_doc: s.source_doc,
            text: s.text,
            embedding: None,
        });
    }
    Ok(out)
}

/// Immutable after ingest. Stored embeddings are unit-normalized, so cosine
/// similarity is a dot product.
#[derive(Debug)]
pub struct GuidelineIndex {
    segments: Vec<Arc<GuidelineSegment>>,
    dimension: usize,
}

impl GuidelineIndex {
    pub const NORMALIZED: bool = true;

    pub fn ingest(segments_source: impl BufRead, embedder: &dyn Embedder) -> Result<Self> {
        Self::from_segments(read_segments(segments_source)?, embedder)
    }

    pub fn from_segments(segments: Vec<GuidelineSegment>, embedder: &dyn Embedder) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for s in &segments {
            if !seen.insert(s.segment_id.as_str()) {
                return Err(Error::DuplicateSegment(s.segment_id.clone()));
            }
            if s.text.trim().is_empty() {
                return Err(Error::EmptySegmentText(s.segment_id.clone()));
            }
        }
        let mut dimension = None;
        let mut stored = Vec::with_capacity(segments.len());
        for chunk in segments.chunks(EMBED_BATCH) {
            let texts: Vec<String> = chunk.iter().map(|s| s.text.clone()).collect();
            let vectors = embedder.embed(&texts)?;
            if vectors.len() != texts.len() {
                return Err(Error::Embedding(format!(
                    "asked for {} embeddings, got {}",
                    texts.len(),
                    vectors.len()
                )));
            }
            for (segment, vector) in chunk.iter().zip(vectors) {
                let expected = *dimension.get_or_insert(vector.len());
                if vector.len() != expected {
                    return Err(Error::DimensionMismatch {
                        expected,
                        actual: vector.len(),
                    });
                }
                let mut segment = segment.clone();
                segment.embedding = Some(unit(vector));
                stored.push(Arc::new(segment));
            }
        }
        Ok(GuidelineIndex {
            segments: stored,
            dimension: dimension.unwrap_or(0),
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn segments(&self) -> &[Arc<GuidelineSegment>] {
        &self.segments
    }

    /// Cosine Top-k against an already-embedded query; ties by ascending id.
    pub fn dense_retrieve_vector(&self, query: &[f64], k: usize) -> Result<Vec<RankedSegment>> {
        if self.segments.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::ZeroCutoff);
        }
        if query.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: query.len(),
            });
        }
        let q = unit(query.to_vec());
        let mut ranked: Vec<RankedSegment> = self
            .segments
            .iter()
            .map(|s| {
                let emb = s.embedding.as_deref().expect("indexed segments carry embeddings");
                RankedSegment {
                    segment: Arc::clone(s),
                    dense_score: dot(&q, emb).clamp(-1.0, 1.0),
                    rerank_score: None,
                    stage: Stage::DenseOnly,
                }
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.dense_score
                .total_cmp(&a.dense_score)
                .then_with(|| a.id().cmp(b.id()))
        });
        ranked.truncate(k);
        Ok(ranked)
    }

    pub fn dense_retrieve(
        &self,
        query: &CompositeQuery,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<RankedSegment>> {
        if self.segments.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let vector = embedder
            .embed(std::slice::from_ref(&query.rendered))?
            .pop()
            .ok_or_else(|| Error::Embedding("no embedding returned for query".into()))?;
        self.dense_retrieve_vector(&vector, k)
    }
}

/// Scores every candidate against the query text and keeps the Top-n by
/// rerank score, ties by ascending segment id.
pub fn rerank(
    candidates: Vec<RankedSegment>,
    query: &CompositeQuery,
    scorer: &dyn CrossScorer,
    n: usize,
) -> Result<Vec<RankedSegment>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    if n == 0 {
        return Err(Error::ZeroCutoff);
    }
    let mut scored = candidates
        .into_iter()
        .map(|mut c| {
            let s = scorer.score(&query.rendered, &c.segment.text).map_err(|e| Error::Scorer {
                segment_id: c.segment.segment_id.clone(),
                message: e.to_string(),
            })?;
            c.rerank_score = Some(s);
            c.stage = Stage::Reranked;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        let (sa, sb) = (a.rerank_score.unwrap_or(f64::NEG_INFINITY), b.rerank_score.unwrap_or(f64::NEG_INFINITY));
        sb.total_cmp(&sa).then_with(|| a.id().cmp(b.id()))
    });
    scored.truncate(n);
    Ok(scored)
}

/// Index plus the backends needed to query it.
#[derive(Clone)]
pub struct Retriever {
    pub index: Arc<GuidelineIndex>,
    pub embedder: Arc<dyn Embedder>,
    pub scorer: Arc<dyn CrossScorer>,
}

impl Retriever {
    pub fn new(index: Arc<GuidelineIndex>, embedder: Arc<dyn Embedder>, scorer: Arc<dyn CrossScorer>) -> Self {
        Retriever {
            index,
            embedder,
            scorer,
        }
    }

    /// Dense Top-k then rerank Top-n, recorded in the trace.
    pub fn retrieve(
        &self,
        query: &CompositeQuery,
        k: usize,
        n: usize,
        trace: &TraceLog,
    ) -> Result<Vec<RankedSegment>> {
        let dense = self.index.dense_retrieve(query, k, self.embedder.as_ref())?;
        let dense_ids: Vec<ScoredId> = dense.iter().map(RankedSegment::scored_id).collect();
        let reranked = rerank(dense, query, self.scorer.as_ref(), n)?;
        trace.append(TraceEvent::Retrieval {
            hypothesis: query.hypothesis.clone(),
            query: query.rendered.clone(),
            k,
            n,
            dense: dense_ids,
            reranked: reranked.iter().map(RankedSegment::scored_id).collect(),
        });
        Ok(reranked)
    }

    /// Guideline retrieval for a hypothesis and its standardized findings.
    pub fn g_ret(
        &self,
        hypothesis: &str,
        findings: &[String],
        k: usize,
        n: usize,
        trace: &TraceLog,
    ) -> Result<Vec<RankedSegment>> {
        let query = CompositeQuery::new(hypothesis, findings.to_vec());
        self.retrieve(&query, k, n, trace)
    }
}

/// Deterministic offline embedder: signed feature hashing of normalized
/// tokens and token bigrams.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashingEmbedder { dimension }
    }

    fn features(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let norm = normalize(text);
        let words: Vec<&str> = norm.split(' ').filter(|w| !w.is_empty()).collect();
        let bigrams = words.windows(2).map(|w| format!("{} {}", w[0], w[1]));
        for feature in words.iter().map(|w| w.to_string()).chain(bigrams) {
            let digest = Sha256::digest(feature.as_bytes());
            let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize % self.dimension;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        v
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.features(t)).collect())
    }
}

/// Deterministic offline scorer: token Jaccard between query and segment.
#[derive(Debug, Clone, Default)]
pub struct LexicalScorer;

impl CrossScorer for LexicalScorer {
    fn score(&self, query: &str, text: &str) -> Result<f64> {
        Ok(jaccard(&tokens(query), &tokens(text)))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRow {
    text: String,
    embedding: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    query: String,
    text: String,
    score: f64,
}

fn read_table<T: for<'de> Deserialize<'de>>(source: impl BufRead, name: &str) -> Result<Vec<T>> {
    let mut rows = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            source_name: name.into(),
            line: idx + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Replay embedder: vectors looked up by exact text.
#[derive(Debug, Default)]
pub struct TableEmbedder {
    table: HashMap<String, Vec<f64>>,
}

impl TableEmbedder {
    pub fn load(source: impl BufRead) -> Result<Self> {
        let table = read_table::<EmbeddingRow>(source, "embedding table")?
            .into_iter()
            .map(|r| (r.text, r.embedding))
            .collect();
        Ok(TableEmbedder { table })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        TableEmbedder {
            table: pairs.into_iter().collect(),
        }
    }
}

impl Embedder for TableEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::Embedding(format!("no recorded embedding for {:?}", excerpt(t))))
            })
            .collect()
    }
}

/// Replay scorer: scores looked up by exact (query, text) pair.
#[derive(Debug, Default)]
pub struct TableScorer {
    table: HashMap<(String, String), f64>,
}

impl TableScorer {
    pub fn load(source: impl BufRead) -> Result<Self> {
        let table = read_table::<ScoreRow>(source, "rerank table")?
            .into_iter()
            .map(|r| ((r.query, r.text), r.score))
            .collect();
        Ok(TableScorer { table })
    }

    pub fn from_triples(rows: impl IntoIterator<Item = (String, String, f64)>) -> Self {
        TableScorer {
            table: rows.into_iter().map(|(q, t, s)| ((q, t), s)).collect(),
        }
    }
}

impl CrossScorer for TableScorer {
    fn score(&self, query: &str, text: &str) -> Result<f64> {
        self.table
            .get(&(query.to_owned(), text.to_owned()))
            .copied()
            .ok_or_else(|| Error::Embedding(format!("no recorded score for query {:?}", excerpt(query))))
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(60).collect()
}

impl Embedder for LiveEmbeddingClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        LiveEmbeddingClient::embed(self, texts)
    }
}

impl CrossScorer for LiveRerankClient {
    fn score(&self, query: &str, text: &str) -> Result<f64> {
        LiveRerankClient::score(self, query, text)
    }
}

type Sink = Mutex<Box<dyn Write + Send>>;

/// Writes every embedding it passes through to a table for later replay.
pub struct RecordingEmbedder {
    inner: Arc<dyn Embedder>,
    sink: Sink,
}

impl RecordingEmbedder {
    pub fn new(inner: Arc<dyn Embedder>, sink: impl Write + Send + 'static) -> Self {
        RecordingEmbedder {
            inner,
            sink: Mutex::new(Box::new(sink)),
        }
    }
}

impl Embedder for RecordingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let vectors = self.inner.embed(texts)?;
        let mut sink = self.sink.lock().unwrap_or_else(|p| p.into_inner());
        for (text, embedding) in texts.iter().zip(&vectors) {
            let row = EmbeddingRow {
                text: text.clone(),
                embedding: embedding.clone(),
            };
            serde_json::to_writer(&mut *sink, &row)?;
            sink.write_all(b"\n")?;
        }
        sink.flush()?;
        Ok(vectors)
    }
}

/// Writes every score it passes through to a table for later replay.
pub struct RecordingScorer {
    inner: Arc<dyn CrossScorer>,
    sink: Sink,
}

impl RecordingScorer {
    pub fn new(inner: Arc<dyn CrossScorer>, sink: impl Write + Send + 'static) -> Self {
        RecordingScorer {
            inner,
            sink: Mutex::new(Box::new(sink)),
        }
    }
}

impl CrossScorer for RecordingScorer {
    fn score(&self, query: &str, text: &str) -> Result<f64> {
        let score = self.inner.score(query, text)?;
        let row = ScoreRow {
            query: query.to_owned(),
            text: text.to_owned(),
            score,
        };
        let mut sink = self.sink.lock().unwrap_or_else(|p| p.into_inner());
        serde_json::to_writer(&mut *sink, &row)?;
        sink.write_all(b"\n")?;
        sink.flush()?;
        Ok(score)
    }
}
