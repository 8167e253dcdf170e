use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::util::stable_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Text => "text",
            Self::Image => "image",
        }
    }
}

pub trait Embedder: Send + Sync {
    /// Embed question text or an image locator.
    fn embed(&self, modality: Modality, content: &str) -> Result<Vec<f64>, AgentError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockEmbeddingStyle {
    /// Pseudo-random dense unit vectors.
    Dense,
    /// Unit basis vectors; distinct contents are orthogonal unless their
    /// digests collide modulo the dimension.
    OneHot,
}

/// Deterministic pseudo-embeddings derived from content digests.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub dim: usize,
    pub style: MockEmbeddingStyle,
}

impl MockEmbedder {
    pub fn dense(dim: usize) -> Self {
        Self { dim: dim.max(1), style: MockEmbeddingStyle::Dense }
    }

    pub fn one_hot(dim: usize) -> Self {
        Self { dim: dim.max(1), style: MockEmbeddingStyle::OneHot }
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, modality: Modality, content: &str) -> Result<Vec<f64>, AgentError> {
        let key = stable_hash(&[modality.as_str(), content]);
        let mut v = vec![0.0; self.dim];
        match self.style {
            MockEmbeddingStyle::OneHot => v[(key % self.dim as u64) as usize] = 1.0,
            MockEmbeddingStyle::Dense => {
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                for x in v.iter_mut() {
                    *x = rng.random_range(-1.0..1.0);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                } else {
                    v[0] = 1.0;
                }
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_content_identical_vectors() {
        let e = MockEmbedder::dense(32);
        let a = e.embed(Modality::Text, "what is the slope?").unwrap();
        let b = e.embed(Modality::Text, "what is the slope?").unwrap();
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_ne!(a, e.embed(Modality::Image, "what is the slope?").unwrap());
    }
}
