//! OpenAI-compatible HTTP clients for chat, embeddings and reranking.
//!
//! These are the only code paths in the crate that open network
//! connections; [`http_request_count`] exposes a process-wide counter so
//! tests can assert that a replay run stayed offline.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::warn;

use super::{BackendKind, ChatBackend, ChatRequest};
use crate::error::{Error, Result};

static HTTP_REQUESTS: AtomicUsize = AtomicUsize::new(0);

pub fn http_request_count() -> usize {
    HTTP_REQUESTS.load(Ordering::SeqCst)
}

const BODY_EXCERPT: usize = 400;

#[derive(Debug, Clone)]
pub struct HttpSettings {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpSettings {
            endpoint: endpoint.into(),
            api_key: std::env::var("CLINRAG_API_KEY").ok(),
            timeout: Duration::from_secs(120),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.endpoint.trim_end_matches('/'), path)
    }
}

struct HttpClient {
    settings: HttpSettings,
    client: reqwest::blocking::Client,
}

impl HttpClient {
    fn new(settings: HttpSettings) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| Error::Transport {
                status: 0,
                body: e.to_string(),
            })?;
        Ok(HttpClient { settings, client })
    }

    /// POSTs JSON, retrying once on a transport failure or a retryable status.
    fn post<T: for<'de> Deserialize<'de>>(&self, path: &str, body: &serde_json::Value) -> Result<T> {
        let url = self.settings.url(path);
        let mut last = None;
        for attempt in 0..2 {
            match self.post_once(&url, body) {
                Ok(text) => {
                    return serde_json::from_str(&text).map_err(|e| Error::Transport {
                        status: 200,
                        body: format!("unexpected response shape ({e}): {}", excerpt(&text)),
                    })
                }
                Err((retryable, err)) => {
                    if !retryable {
                        return Err(err);
                    }
                    if attempt == 0 {
                        warn!(%url, error = %err, "retrying model call");
                    }
                    last = Some(err);
                }
            }
        }
        Err(last.expect("two attempts were made"))
    }

    fn post_once(&self, url: &str, body: &serde_json::Value) -> Result<String, (bool, Error)> {
        HTTP_REQUESTS.fetch_add(1, Ordering::SeqCst);
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.settings.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            (
                true,
                Error::Transport {
                    status: 0,
                    body: e.to_string(),
                },
            )
        })?;
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        if status.is_success() {
            Ok(text)
        } else {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            Err((
                retryable,
                Error::Transport {
                    status: status.as_u16(),
                    body: excerpt(&text),
                },
            ))
        }
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(BODY_EXCERPT).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ChatMessage {
    role: String,
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

pub struct LiveChatBackend {
    http: HttpClient,
    model: String,
}

impl LiveChatBackend {
    pub fn new(settings: HttpSettings, model: impl Into<String>) -> Result<Self> {
        Ok(LiveChatBackend {
            http: HttpClient::new(settings)?,
            model: model.into(),
        })
    }
}

pub fn chat_request_body(model: &str, system: &str, user: &str) -> serde_json::Value {
    json!({
        "model": model,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        "temperature": 0,
    })
}

impl ChatBackend for LiveChatBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn respond(&self, request: &ChatRequest) -> Result<String> {
        let body = chat_request_body(&self.model, &request.system_prompt, &request.rendered_prompt);
        let resp: ChatResponse = self.http.post("chat/completions", &body)?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Transport {
                status: 200,
                body: "response has no choices".into(),
            })
    }
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

pub struct LiveEmbeddingClient {
    http: HttpClient,
    model: String,
}

impl LiveEmbeddingClient {
    pub fn new(settings: HttpSettings, model: impl Into<String>) -> Result<Self> {
        Ok(LiveEmbeddingClient {
            http: HttpClient::new(settings)?,
            model: model.into(),
        })
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({"input": texts, "model": self.model});
        let resp: EmbeddingResponse = self.http.post("embeddings", &body)?;
        reorder_embeddings(texts.len(), resp.data)
    }
}

fn reorder_embeddings(expected: usize, data: Vec<EmbeddingDatum>) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; expected];
    for datum in data {
        let slot = out
            .get_mut(datum.index)
            .ok_or_else(|| Error::Embedding(format!("response index {} out of range", datum.index)))?;
        *slot = Some(datum.embedding);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::Embedding(format!("no embedding returned for input {i}"))))
        .collect()
}

#[derive(Debug, Deserialize)]
struct RerankResult {
    index: usize,
    relevance_score: f64,
}

#[derive(Debug, Deserialize)]
struct RerankResponse {
    results: Vec<RerankResult>,
}

/// Client for a `/rerank` service (`{"model","query","documents"}` in,
/// `{"results":[{"index","relevance_score"}]}` out).
pub struct LiveRerankClient {
    http: HttpClient,
    model: String,
}

impl LiveRerankClient {
    pub fn new(settings: HttpSettings, model: impl Into<String>) -> Result<Self> {
        Ok(LiveRerankClient {
            http: HttpClient::new(settings)?,
            model: model.into(),
        })
    }

    pub fn score(&self, query: &str, document: &str) -> Result<f64> {
        let body = json!({"model": self.model, "query": query, "documents": [document]});
        let resp: RerankResponse = self.http.post("rerank", &body)?;
        resp.results
            .into_iter()
            .find(|r| r.index == 0)
            .map(|r| r.relevance_score)
            .ok_or_else(|| Error::Transport {
                status: 200,
                body: "rerank response has no result for the document".into(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_body_matches_wire_contract() {
        let body = chat_request_body("m", "sys", "hello");
        assert_eq!(
            body,
            json!({
                "model": "m",
                "messages": [
                    {"role": "system", "content": "sys"},
                    {"role": "user", "content": "hello"}
                ],
                "temperature": 0
            })
        );
    }

    #[test]
    fn chat_response_shape_parses() {
        let r: ChatResponse =
            serde_json::from_str(r#"{"choices":[{"message":{"role":"assistant","content":"SIMPLE"}}]}"#)
                .unwrap();
        assert_eq!(r.choices[0].message.content, "SIMPLE");
    }

    #[test]
    fn embeddings_are_reordered_by_index() {
        let r: EmbeddingResponse = serde_json::from_str(
            r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#,
        )
        .unwrap();
        let v = reorder_embeddings(2, r.data).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(reorder_embeddings(3, vec![]).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error_after_retry() {
        let before = http_request_count();
        let mut settings = HttpSettings::new("http://127.0.0.1:9");
        settings.timeout = Duration::from_millis(500);
        let backend = LiveChatBackend::new(settings, "m").unwrap();
        let req = ChatRequest {
            task: super::super::PromptTask::current(super::super::TaskKind::Ner),
            system_prompt: "s".into(),
            rendered_prompt: "u".into(),
            canonical_key: "k".into(),
        };
        let err = backend.respond(&req).unwrap_err();
        assert!(matches!(err, Error::Transport { status: 0, .. }));
        assert!(http_request_count() >= before + 2);
    }
}
