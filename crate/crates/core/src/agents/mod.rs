//! Client abstractions for every external service.
//!
//! Three client shapes exist: chat completion (text plus image
//! attachments), image search and image edit. An embedding client rides on
//! the chat endpoint's base URL. Every network request in the crate is
//! constructed in this module; other modules only see the traits.

mod chat;
mod edit;
mod embed;
mod http;
mod mock;
mod protocol;
mod search;
pub mod sim;
mod world;

pub use chat::{ChatClient, ChatMessage, ChatRequest, ChatResponse, Usage};
pub use edit::{EditOperation, EditRequest, ImageEditClient, MockEditClient};
pub use embed::{Embedder, MockEmbedder, MockEmbeddingStyle, Modality};
pub use http::{
    HttpChatClient, HttpEditClient, HttpEmbedder, HttpSearchClient, RetryPolicy, ENV_CHAT_API_KEY, ENV_CHAT_BASE_URL,
    ENV_EDIT_API_KEY, ENV_SEARCH_API_KEY,
};
pub use mock::{MockCall, MockChatClient, Responder};
pub use protocol::{extract_json_object, payload_prompt, read_payload};
pub use search::{ImageSearchClient, MockSearchClient, SearchHit, SearchQuery, SearchResult};
pub use world::{world_step, SyntheticWorld, WorldConfig};

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("transport error: {message}")]
    Transport { message: String, retriable: bool },
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("provider quota exhausted: {0}")]
    Quota(String),
    #[error("client misconfigured: {0}")]
    Config(String),
}

impl AgentError {
    /// Transport-level faults worth retrying with backoff. Content failures
    /// (unparseable agent output) are never retriable here.
    pub fn is_retriable(&self) -> bool {
        match self {
            Self::Transport { retriable, .. } => *retriable,
            Self::Timeout(_) => true,
            Self::Status { status, .. } => *status == 429 || *status >= 500,
            Self::Malformed(_) | Self::Quota(_) | Self::Config(_) => false,
        }
    }
}
