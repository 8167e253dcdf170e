use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::AgentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub text: String,
    /// Structural hints appended to the keyword query, e.g. "legend".
    #[serde(default)]
    pub tags: Vec<String>,
    pub top_k: usize,
}

impl SearchQuery {
    pub fn new(text: impl Into<String>, top_k: usize) -> Self {
        Self { text: text.into(), tags: Vec::new(), top_k }
    }

    /// Query string sent to the provider.
    pub fn query_string(&self) -> String {
        let mut q = self.text.trim().to_string();
        for t in &self.tags {
            if !q.to_lowercase().contains(&t.to_lowercase()) {
                q.push(' ');
                q.push_str(t);
            }
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub url: String,
    pub title: String,
    pub width: Option<u32>,
    pub height: Option<u32>,
    #[serde(default)]
    pub bytes: Option<u64>,
}

/// Ranked hits, best first, never longer than the query's `top_k`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
}

impl SearchResult {
    pub fn truncated(mut hits: Vec<SearchHit>, top_k: usize) -> Self {
        hits.truncate(top_k);
        Self { hits }
    }
}

pub trait ImageSearchClient: Send + Sync {
    /// Empty results are a value, not an error.
    fn search(&self, query: &SearchQuery) -> Result<SearchResult, AgentError>;
}

type SearchFn = Arc<dyn Fn(&SearchQuery) -> Result<Vec<SearchHit>, AgentError> + Send + Sync>;

pub struct MockSearchClient {
    respond: SearchFn,
}

impl MockSearchClient {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&SearchQuery) -> Result<Vec<SearchHit>, AgentError> + Send + Sync + 'static,
    {
        Self { respond: Arc::new(f) }
    }

    /// Return the same hits for every query.
    pub fn fixed(hits: Vec<SearchHit>) -> Self {
        Self::new(move |_| Ok(hits.clone()))
    }
}

impl ImageSearchClient for MockSearchClient {
    fn search(&self, query: &SearchQuery) -> Result<SearchResult, AgentError> {
        if query.query_string().is_empty() {
            return Err(AgentError::Config("empty search query".into()));
        }
        Ok(SearchResult::truncated((self.respond)(query)?, query.top_k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hit(n: usize) -> SearchHit {
        SearchHit { url: format!("https://img/{n}.png"), title: format!("t{n}"), width: Some(640), height: Some(480), bytes: None }
    }

    #[test]
    fn truncates_to_top_k_in_rank_order() {
        let client = MockSearchClient::fixed((0..7).map(hit).collect());
        let res = client.search(&SearchQuery::new("bar chart", 3)).unwrap();
        assert_eq!(res.hits.len(), 3);
        assert_eq!(res.hits[0].url, "https://img/0.png");
        assert_eq!(res.hits[2].url, "https://img/2.png");
    }

    #[test]
    fn empty_provider_response_is_not_an_error() {
        let client = MockSearchClient::fixed(vec![]);
        assert!(client.search(&SearchQuery::new("x", 3)).unwrap().hits.is_empty());
    }

    #[test]
    fn tags_extend_query() {
        let mut q = SearchQuery::new("bar chart", 3);
        q.tags = vec!["legend".into(), "chart".into()];
        assert_eq!(q.query_string(), "bar chart legend");
    }
}
