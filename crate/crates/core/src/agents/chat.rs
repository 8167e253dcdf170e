use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::util::digest_hex;

static NEXT_REQUEST_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub text: String,
    /// Image attachments by locator.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: "system".into(), text: text.into(), images: Vec::new() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self { role: "user".into(), text: text.into(), images: Vec::new() }
    }

    pub fn with_image(mut self, locator: impl Into<String>) -> Self {
        self.images.push(locator.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    request_id: u64,
}

impl ChatRequest {
    /// Panics on an empty message list; every caller builds at least one.
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        assert!(!messages.is_empty(), "chat request needs at least one message");
        Self {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: 1024,
            request_id: NEXT_REQUEST_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn request_id(&self) -> u64 {
        self.request_id
    }

    /// Content digest. The request id is excluded so identical requests
    /// made at different times share a digest.
    pub fn digest(&self) -> String {
        let mut buf = String::new();
        buf.push_str(&self.model);
        buf.push('\u{1f}');
        for m in &self.messages {
            buf.push_str(&m.role);
            buf.push('\u{1f}');
            buf.push_str(&m.text);
            for img in &m.images {
                buf.push('\u{1e}');
                buf.push_str(img);
            }
            buf.push('\u{1d}');
        }
        buf.push_str(&format!("{:.6}|{}", self.temperature, self.max_tokens));
        digest_hex(buf.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: String,
    pub usage: Usage,
}

pub trait ChatClient: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, AgentError>;

    /// Model identifier sent with requests built for this client.
    fn model(&self) -> &str {
        "default"
    }
}

impl<T: ChatClient + ?Sized> ChatClient for std::sync::Arc<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, AgentError> {
        (**self).chat(request)
    }

    fn model(&self) -> &str {
        (**self).model()
    }
}
