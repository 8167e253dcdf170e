use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{AgentError, ChatClient, ChatRequest, ChatResponse, Usage};

/// Everything a scripted responder may key on. Arrival order is
/// deliberately absent so responses stay deterministic under concurrency.
pub struct MockCall<'a> {
    pub role: &'a str,
    pub digest: &'a str,
    pub seed: u64,
    pub request: &'a ChatRequest,
}

impl MockCall<'_> {
    /// Text of the last user message.
    pub fn prompt(&self) -> &str {
        self.request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.text.as_str())
            .unwrap_or("")
    }
}

pub type Responder = Arc<dyn Fn(&MockCall<'_>) -> Result<String, AgentError> + Send + Sync>;

/// Deterministic chat backend: exact-digest scripts first, then an
/// optional responder function.
pub struct MockChatClient {
    role: String,
    seed: u64,
    script: HashMap<String, String>,
    fallback: Option<Responder>,
    calls: AtomicU64,
}

impl MockChatClient {
    pub fn new(role: impl Into<String>, seed: u64) -> Self {
        Self { role: role.into(), seed, script: HashMap::new(), fallback: None, calls: AtomicU64::new(0) }
    }

    /// Always answer with `text`.
    pub fn constant(role: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(role, 0).with_responder(move |_| Ok(text.clone()))
    }

    pub fn with_script(mut self, digest: impl Into<String>, text: impl Into<String>) -> Self {
        self.script.insert(digest.into(), text.into());
        self
    }

    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&MockCall<'_>) -> Result<String, AgentError> + Send + Sync + 'static,
    {
        self.fallback = Some(Arc::new(f));
        self
    }

    pub fn with_shared_responder(mut self, f: Responder) -> Self {
        self.fallback = Some(f);
        self
    }

    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ChatClient for MockChatClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, AgentError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let digest = request.digest();
        let text = match self.script.get(&digest) {
            Some(t) => t.clone(),
            None => match &self.fallback {
                Some(f) => f(&MockCall { role: &self.role, digest: &digest, seed: self.seed, request })?,
                None => return Err(AgentError::Malformed(format!("no scripted response for {digest}"))),
            },
        };
        let prompt_tokens = request.messages.iter().map(|m| m.text.split_whitespace().count() as u64).sum();
        let completion_tokens = text.split_whitespace().count() as u64;
        Ok(ChatResponse { text, finish_reason: "stop".into(), usage: Usage { prompt_tokens, completion_tokens } })
    }

    fn model(&self) -> &str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::ChatMessage;

    #[test]
    fn scripted_digest_wins() {
        let req = ChatRequest::new("mock", vec![ChatMessage::user("which option?")]);
        let client = MockChatClient::new("responder", 1)
            .with_script(req.digest(), "B")
            .with_responder(|_| Ok("fallback".into()));
        assert_eq!(client.chat(&req).unwrap().text, "B");
        let other = ChatRequest::new("mock", vec![ChatMessage::user("else")]);
        assert_eq!(client.chat(&other).unwrap().text, "fallback");
        assert_eq!(client.calls(), 2);
    }

    #[test]
    fn deterministic_for_same_request_and_seed() {
        let client = MockChatClient::new("r", 9).with_responder(|c| Ok(format!("{}-{}", c.seed, &c.digest[..8])));
        let a = client.chat(&ChatRequest::new("mock", vec![ChatMessage::user("q")])).unwrap();
        let b = client.chat(&ChatRequest::new("mock", vec![ChatMessage::user("q")])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unscripted_without_fallback_errors() {
        let client = MockChatClient::new("r", 0);
        let err = client.chat(&ChatRequest::new("mock", vec![ChatMessage::user("q")])).unwrap_err();
        assert!(matches!(err, AgentError::Malformed(_)));
        assert!(!err.is_retriable());
    }
}
