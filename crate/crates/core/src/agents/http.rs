//! JSON-over-HTTP clients for chat, image search, image edit and
//! embeddings. Credentials come from the environment only.

use std::path::Path;
use std::thread;
use std::time::Duration;

use base64::Engine;
use reqwest::blocking::{Client, RequestBuilder};
use serde_json::{json, Value};

use super::{
    AgentError, ChatClient, ChatRequest, ChatResponse, EditRequest, Embedder, ImageEditClient, ImageSearchClient,
    Modality, SearchHit, SearchQuery, SearchResult, Usage,
};
use crate::capability::{source_for, ImageAsset, ImageSource};
use crate::util::Semaphore;

pub const ENV_CHAT_API_KEY: &str = "DPE_CHAT_API_KEY";
pub const ENV_CHAT_BASE_URL: &str = "DPE_CHAT_BASE_URL";
pub const ENV_SEARCH_API_KEY: &str = "DPE_SEARCH_API_KEY";
pub const ENV_EDIT_API_KEY: &str = "DPE_EDIT_API_KEY";

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
const DEFAULT_IN_FLIGHT: usize = 8;

/// Exponential backoff applied to retriable transport errors only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { base_delay: Duration::from_millis(500), factor: 2.0, max_attempts: 4 }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_attempts: 1, ..Self::default() }
    }

    pub fn delay_before(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, AgentError>) -> Result<T, AgentError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Err(e) if e.is_retriable() && attempt < self.max_attempts => {
                    tracing::debug!(attempt, error = %e, "retrying");
                    thread::sleep(self.delay_before(attempt));
                }
                other => return other,
            }
        }
    }
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

fn build_client(timeout: Duration) -> Result<Client, AgentError> {
    Client::builder().timeout(timeout).build().map_err(|e| AgentError::Config(e.to_string()))
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

/// Send, classify transport failures and non-2xx statuses, parse JSON.
fn send_json(req: RequestBuilder, timeout: Duration) -> Result<Value, AgentError> {
    let resp = req.send().map_err(|e| {
        if e.is_timeout() {
            AgentError::Timeout(timeout)
        } else {
            AgentError::Transport { message: e.to_string(), retriable: e.is_connect() || e.is_request() }
        }
    })?;
    let status = resp.status();
    let body = resp.text().map_err(|e| {
        if e.is_timeout() {
            AgentError::Timeout(timeout)
        } else {
            AgentError::Transport { message: e.to_string(), retriable: true }
        }
    })?;
    if !status.is_success() {
        return Err(AgentError::Status { status: status.as_u16(), body: body.chars().take(512).collect() });
    }
    serde_json::from_str(&body).map_err(|e| AgentError::Malformed(format!("{e}: {}", body.chars().take(200).collect::<String>())))
}

fn image_part(locator: &str) -> Value {
    let url = match source_for(locator) {
        ImageSource::RemoteUrl => locator.to_string(),
        ImageSource::LocalPath => {
            let path = locator.strip_prefix("file://").unwrap_or(locator);
            match std::fs::read(Path::new(path)) {
                Ok(bytes) => {
                    let mime = if path.ends_with(".png") { "image/png" } else { "image/jpeg" };
                    format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
                }
                Err(_) => locator.to_string(),
            }
        }
    };
    json!({"type": "image_url", "image_url": {"url": url}})
}

/// Body for `POST {base}/chat/completions`.
pub(crate) fn chat_body(request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let mut content = vec![json!({"type": "text", "text": m.text})];
            content.extend(m.images.iter().map(|l| image_part(l)));
            json!({"role": m.role, "content": content})
        })
        .collect();
    json!({
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    })
}

fn parse_chat_response(v: &Value) -> Result<ChatResponse, AgentError> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| AgentError::Malformed("missing choices[0]".into()))?;
    let content = choice
        .pointer("/message/content")
        .ok_or_else(|| AgentError::Malformed("missing choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(AgentError::Malformed("message.content is neither string nor parts".into())),
    };
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    };
    let finish_reason = choice.get("finish_reason").and_then(Value::as_str).unwrap_or("stop").to_string();
    Ok(ChatResponse { text, finish_reason, usage })
}

/// Chat-completions style endpoint client.
pub struct HttpChatClient {
    http: Client,
    base_url: String,
    api_key: Option<String>,
    model: String,
    timeout: Duration,
    retry: RetryPolicy,
    gate: Semaphore,
}

impl HttpChatClient {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Result<Self, AgentError> {
        let base_url = base_url.into();
        if base_url.trim().is_empty() {
            return Err(AgentError::Config("chat base URL is empty".into()));
        }
        Ok(Self {
            http: build_client(DEFAULT_TIMEOUT)?,
            base_url,
            api_key,
            model: model.into(),
            timeout: DEFAULT_TIMEOUT,
            retry: RetryPolicy::default(),
            gate: Semaphore::new(DEFAULT_IN_FLIGHT),
        })
    }

    /// Reads `DPE_CHAT_BASE_URL` and `DPE_CHAT_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, AgentError> {
        let base = env_var(ENV_CHAT_BASE_URL).ok_or_else(|| AgentError::Config(format!("{ENV_CHAT_BASE_URL} is not set")))?;
        Self::new(base, env_var(ENV_CHAT_API_KEY), model)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Result<Self, AgentError> {
        self.http = build_client(timeout)?;
        self.timeout = timeout;
        Ok(self)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.gate = Semaphore::new(n);
        self
    }
}

impl ChatClient for HttpChatClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, AgentError> {
        let _permit = self.gate.acquire();
        let body = chat_body(request);
        let url = endpoint(&self.base_url, "chat/completions");
        self.retry.run(|| {
            let mut req = self.http.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            parse_chat_response(&send_json(req, self.timeout)?)
        })
    }

    fn model(&self) -> &str {
        &self.model
    }
}

/// Image search provider speaking `POST {base}/images` with `{"q", "num"}`.
pub struct HttpSearchClient {
    http: Client,
    base_url: String,
    api_key: Option<String>,
    timeout: Duration,
    retry: RetryPolicy,
    gate: Semaphore,
}

impl HttpSearchClient {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, AgentError> {
        Ok(Self {
            http: build_client(DEFAULT_TIMEOUT)?,
            base_url: base_url.into(),
            api_key,
            timeout: DEFAULT_TIMEOUT,
            retry: RetryPolicy::default(),
            gate: Semaphore::new(DEFAULT_IN_FLIGHT),
        })
    }

    /// Key from `DPE_SEARCH_API_KEY`.
    pub fn from_env(base_url: impl Into<String>) -> Result<Self, AgentError> {
        Self::new(base_url, env_var(ENV_SEARCH_API_KEY))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

fn parse_search_hits(v: &Value) -> Vec<SearchHit> {
    let dim = |img: &Value, k: &str| img.get(k).and_then(Value::as_u64).map(|x| x as u32);
    v.get("images")
        .and_then(Value::as_array)
        .map(|imgs| {
            imgs.iter()
                .filter_map(|img| {
                    let url = img
                        .get("imageUrl")
                        .or_else(|| img.get("link"))
                        .and_then(Value::as_str)?
                        .to_string();
                    Some(SearchHit {
                        url,
                        title: img.get("title").and_then(Value::as_str).unwrap_or_default().to_string(),
                        width: dim(img, "imageWidth"),
                        height: dim(img, "imageHeight"),
                        bytes: img.get("bytes").and_then(Value::as_u64),
                    })
                })
                .collect()
        })
        .unwrap_or_default()
}

impl ImageSearchClient for HttpSearchClient {
    fn search(&self, query: &SearchQuery) -> Result<SearchResult, AgentError> {
        let q = query.query_string();
        if q.is_empty() {
            return Err(AgentError::Config("empty search query".into()));
        }
        let _permit = self.gate.acquire();
        let url = endpoint(&self.base_url, "images");
        let body = json!({"q": q, "num": query.top_k});
        let v = self.retry.run(|| {
            let mut req = self.http.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.header("X-API-KEY", key);
            }
            match send_json(req, self.timeout) {
                Err(AgentError::Status { status: 402, body }) => Err(AgentError::Quota(body)),
                other => other,
            }
        })?;
        Ok(SearchResult::truncated(parse_search_hits(&v), query.top_k))
    }
}

/// Image edit service: `POST {base}/edits` with operation, instruction and
/// input image URLs; replies with the output `url` and dimensions.
pub struct HttpEditClient {
    http: Client,
    base_url: String,
    api_key: Option<String>,
    timeout: Duration,
    retry: RetryPolicy,
}

impl HttpEditClient {
    pub fn from_env(base_url: impl Into<String>) -> Result<Self, AgentError> {
        Ok(Self {
            http: build_client(DEFAULT_TIMEOUT)?,
            base_url: base_url.into(),
            api_key: env_var(ENV_EDIT_API_KEY),
            timeout: DEFAULT_TIMEOUT,
            retry: RetryPolicy::default(),
        })
    }
}

impl ImageEditClient for HttpEditClient {
    fn edit(&self, request: &EditRequest, inputs: &[ImageAsset]) -> Result<ImageAsset, AgentError> {
        request.check(inputs)?;
        let url = endpoint(&self.base_url, "edits");
        let body = json!({
            "operation": request.operation.as_str(),
            "instruction": request.instruction,
            "images": inputs.iter().map(|a| a.locator()).collect::<Vec<_>>(),
        });
        let v = self.retry.run(|| {
            let mut req = self.http.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            send_json(req, self.timeout)
        })?;
        let locator = v
            .get("url")
            .and_then(Value::as_str)
            .ok_or_else(|| AgentError::Malformed("edit response lacks `url`".into()))?;
        let parents = inputs.iter().map(|a| a.locator().to_string()).collect();
        let mut asset = ImageAsset::derived(locator, request.operation.provenance(), parents)
            .map_err(|e| AgentError::Malformed(e.to_string()))?;
        if let (Some(w), Some(h)) = (v.get("width").and_then(Value::as_u64), v.get("height").and_then(Value::as_u64)) {
            asset = asset.with_dimensions(w as u32, h as u32);
        }
        Ok(asset)
    }
}

/// Embeddings endpoint on the chat provider: `POST {base}/embeddings`.
pub struct HttpEmbedder {
    http: Client,
    base_url: String,
    api_key: Option<String>,
    model: String,
    timeout: Duration,
    retry: RetryPolicy,
}

impl HttpEmbedder {
    pub fn from_env(model: impl Into<String>) -> Result<Self, AgentError> {
        let base = env_var(ENV_CHAT_BASE_URL).ok_or_else(|| AgentError::Config(format!("{ENV_CHAT_BASE_URL} is not set")))?;
        Ok(Self {
            http: build_client(DEFAULT_TIMEOUT)?,
            base_url: base,
            api_key: env_var(ENV_CHAT_API_KEY),
            model: model.into(),
            timeout: DEFAULT_TIMEOUT,
            retry: RetryPolicy::default(),
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, modality: Modality, content: &str) -> Result<Vec<f64>, AgentError> {
        let input = match modality {
            Modality::Text => json!(content),
            Modality::Image => json!([image_part(content)]),
        };
        let body = json!({"model": self.model, "input": input});
        let url = endpoint(&self.base_url, "embeddings");
        let v = self.retry.run(|| {
            let mut req = self.http.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            send_json(req, self.timeout)
        })?;
        v.pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .map(|xs| xs.iter().filter_map(Value::as_f64).collect::<Vec<_>>())
            .filter(|xs| !xs.is_empty())
            .ok_or_else(|| AgentError::Malformed("missing data[0].embedding".into()))
    }
}
