//! Corpus instruments: embedding diversity and judge-based question quality.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::{extract_json_object, payload_prompt, ChatClient, ChatMessage, ChatRequest, Embedder, Modality};
use crate::capability::DatasetRecord;
use crate::store::{write_csv_records, write_json, StoreError, SCHEMA_VERSION};
use crate::util::bounded_map;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("diversity needs at least 2 vectors, got {0}")]
    TooFew(usize),
    #[error("vector {0} has zero norm")]
    ZeroNorm(String),
    #[error("vector {id} has dimension {got}, expected {expected}")]
    Dimension { id: String, got: usize, expected: usize },
    #[error("vector {0} has a non-finite component")]
    NonFinite(String),
    #[error("ids and vectors differ in length ({ids} vs {vectors})")]
    Length { ids: usize, vectors: usize },
    #[error("score {0} outside [1, 5]")]
    ScoreRange(u8),
    #[error("no ratings")]
    NoRatings,
    #[error("no records to analyse")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub modality: Modality,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>, modality: Modality) -> Result<Self, AnalysisError> {
        let set = Self { ids, vectors, modality };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.ids.len() != self.vectors.len() {
            return Err(AnalysisError::Length { ids: self.ids.len(), vectors: self.vectors.len() });
        }
        let expected = self.dimension();
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            if v.len() != expected || expected == 0 {
                return Err(AnalysisError::Dimension { id: id.clone(), got: v.len(), expected });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(AnalysisError::NonFinite(id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// One row per vector: id, then d components.
    pub fn write_csv(&self, path: &Path) -> Result<(), StoreError> {
        let header: Vec<String> =
            std::iter::once("id".to_string()).chain((0..self.dimension()).map(|i| format!("d{i}"))).collect();
        let rows: Vec<Vec<String>> = self
            .ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| std::iter::once(id.clone()).chain(v.iter().map(|x| format!("{x:e}"))).collect())
            .collect();
        write_csv_records(path, &header, &rows)
    }
}

fn unit_vectors(set: &EmbeddingSet) -> Result<Vec<Vec<f64>>, AnalysisError> {
    set.validate()?;
    if set.len() < 2 {
        return Err(AnalysisError::TooFew(set.len()));
    }
    set.ids
        .iter()
        .zip(&set.vectors)
        .map(|(id, v)| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                Err(AnalysisError::ZeroNorm(id.clone()))
            } else {
                Ok(v.iter().map(|x| x / norm).collect())
            }
        })
        .collect()
}

/// Mean pairwise cosine distance over ordered pairs `i != j`, in O(N·d).
///
/// With unit vectors u_i and s = Σ u_i, the off-diagonal cosine sum is
/// `|s|² − Σ|u_i|²`.
pub fn diversity(set: &EmbeddingSet) -> Result<f64, AnalysisError> {
    let units = unit_vectors(set)?;
    let n = units.len() as f64;
    let mut sum = vec![0.0; set.dimension()];
    let mut diag = 0.0;
    for u in &units {
        for (s, x) in sum.iter_mut().zip(u) {
            *s += x;
        }
        diag += u.iter().map(|x| x * x).sum::<f64>();
    }
    let total: f64 = sum.iter().map(|x| x * x).sum();
    let mean_cos = (total - diag) / (n * (n - 1.0));
    Ok((1.0 - mean_cos).clamp(0.0, 2.0))
}

/// Reference double loop for [`diversity`].
pub fn diversity_naive(set: &EmbeddingSet) -> Result<f64, AnalysisError> {
    let units = unit_vectors(set)?;
    let n = units.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let cos: f64 = units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum();
                acc += 1.0 - cos;
            }
        }
    }
    Ok(acc / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub schema_version: String,
    pub modality: Modality,
    pub n: usize,
    pub dimension: usize,
    pub diversity: f64,
    /// Records that could not be embedded.
    #[serde(default)]
    pub skipped: Vec<String>,
}

impl DiversityReport {
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_json(path, self)
    }
}

/// One vector per record: the question text or the image locator. Records
/// whose embedding fails are skipped and returned by id.
pub fn embed_corpus(
    dataset: &[DatasetRecord],
    embedder: &dyn Embedder,
    modality: Modality,
    concurrency: usize,
) -> Result<(EmbeddingSet, Vec<String>), AnalysisError> {
    if dataset.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let results = bounded_map(dataset, concurrency, |_, r| {
        let content = match modality {
            Modality::Text => r.question.as_str(),
            Modality::Image => r.image.locator(),
        };
        embedder.embed(modality, content)
    });
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    let mut skipped = Vec::new();
    for (r, v) in dataset.iter().zip(results) {
        match v {
            Ok(v) => {
                ids.push(r.id.clone());
                vectors.push(v);
            }
            Err(e) => {
                tracing::warn!(id = %r.id, error = %e, "embedding failed; record skipped");
                skipped.push(r.id.clone());
            }
        }
    }
    Ok((EmbeddingSet::new(ids, vectors, modality)?, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectScores {
    #[serde(rename = "CL")]
    pub clarity: u8,
    #[serde(rename = "S")]
    pub solvability: u8,
    #[serde(rename = "CO")]
    pub correctness: u8,
}

impl AspectScores {
    pub fn new(clarity: u8, solvability: u8, correctness: u8) -> Result<Self, AnalysisError> {
        for s in [clarity, solvability, correctness] {
            if !(1..=5).contains(&s) {
                return Err(AnalysisError::ScoreRange(s));
            }
        }
        Ok(Self { clarity, solvability, correctness })
    }

    pub fn mean(&self) -> f64 {
        f64::from(u16::from(self.clarity) + u16::from(self.solvability) + u16::from(self.correctness)) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub judge: String,
    #[serde(flatten)]
    pub scores: AspectScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRating {
    pub sample_id: String,
    pub judges: Vec<JudgeScore>,
}

impl QualityRating {
    /// Mean over judges of the per-judge aspect mean.
    pub fn qs(&self) -> Option<f64> {
        if self.judges.is_empty() {
            return None;
        }
        Some(self.judges.iter().map(|j| j.scores.mean()).sum::<f64>() / self.judges.len() as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeCoverage {
    pub n_sample: usize,
    pub judges: usize,
    pub requested: usize,
    pub obtained: usize,
    /// (sample id, judge) pairs whose rating was omitted.
    pub omitted: Vec<(String, String)>,
    /// Samples with no usable rating at all.
    pub unrated: Vec<String>,
    pub rubric_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub schema_version: String,
    pub n: usize,
    pub per_aspect_means: BTreeMap<String, f64>,
    pub qs: f64,
    pub per_sample: Vec<(String, f64)>,
    pub coverage: JudgeCoverage,
}

impl QualityReport {
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_json(path, self)
    }
}

/// Per-sample QS, corpus QS (mean over samples) and per-aspect means over
/// every judge score.
pub fn quality_score(ratings: &[QualityRating], coverage: JudgeCoverage) -> Result<QualityReport, AnalysisError> {
    let rated: Vec<&QualityRating> = ratings.iter().filter(|r| !r.judges.is_empty()).collect();
    if rated.is_empty() {
        return Err(AnalysisError::NoRatings);
    }
    let mut per_sample = Vec::with_capacity(rated.len());
    for r in &rated {
        for j in &r.judges {
            AspectScores::new(j.scores.clarity, j.scores.solvability, j.scores.correctness)?;
        }
        per_sample.push((r.sample_id.clone(), r.qs().expect("rated samples have judges")));
    }
    let qs = per_sample.iter().map(|(_, q)| q).sum::<f64>() / per_sample.len() as f64;
    let all: Vec<AspectScores> = rated.iter().flat_map(|r| r.judges.iter().map(|j| j.scores)).collect();
    let mean = |f: fn(&AspectScores) -> u8| all.iter().map(|s| f64::from(f(s))).sum::<f64>() / all.len() as f64;
    let per_aspect_means = BTreeMap::from([
        ("CL".to_string(), mean(|s| s.clarity)),
        ("S".to_string(), mean(|s| s.solvability)),
        ("CO".to_string(), mean(|s| s.correctness)),
    ]);
    Ok(QualityReport { schema_version: SCHEMA_VERSION.into(), n: per_sample.len(), per_aspect_means, qs, per_sample, coverage })
}

pub const RUBRIC_VERSION: &str = "qs-rubric-v1";

const RUBRIC: &str = "You are a quality judge for visual training questions. Rate the question and its reference \
answer on three aspects, each an integer from 1 (poor) to 5 (excellent). CL, clarity: the question is unambiguous \
and well written. S, solvability: the question can be answered from the image alone. CO, correctness: the \
reference answer is correct. Reply with a JSON object {\"CL\": int, \"S\": int, \"CO\": int}.";

fn parse_scores(text: &str) -> Option<AspectScores> {
    let v = extract_json_object(text)?;
    let get = |k: &str| -> Option<u8> {
        let x = match v.get(k)? {
            Value::Number(n) => n.as_f64()?,
            Value::String(s) => s.trim().parse().ok()?,
            _ => return None,
        };
        (x.fract() == 0.0 && (1.0..=5.0).contains(&x)).then_some(x as u8)
    };
    AspectScores::new(get("CL")?, get("S")?, get("CO")?).ok()
}

/// Rate `n_sample` records (seeded draw without replacement) with every
/// judge. Unparseable or failed judgments are omitted and listed in the
/// coverage report.
pub fn judge_questions(
    dataset: &[DatasetRecord],
    judges: &[&dyn ChatClient],
    n_sample: usize,
    seed: u64,
    concurrency: usize,
) -> Result<(Vec<QualityRating>, JudgeCoverage), AnalysisError> {
    if dataset.is_empty() || n_sample == 0 {
        return Err(AnalysisError::EmptyDataset);
    }
    let n = n_sample.min(dataset.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, dataset.len(), n).into_vec();
    picked.sort_unstable();
    let chosen: Vec<&DatasetRecord> = picked.iter().map(|&i| &dataset[i]).collect();
    let names: Vec<String> = judges.iter().enumerate().map(|(i, j)| format!("judge-{i}:{}", j.model())).collect();

    let rated = bounded_map(&chosen, concurrency, |_, r| {
        let payload = json!({
            "sample_id": r.id,
            "category": r.category.id(),
            "image": r.image.locator(),
            "question": r.question,
            "answer": r.answer,
            "answer_kind": r.answer_kind.as_str(),
        });
        let msg = ChatMessage::user(payload_prompt(RUBRIC, &payload)).with_image(r.image.locator());
        judges
            .iter()
            .map(|j| match j.chat(&ChatRequest::new(j.model(), vec![msg.clone()]).with_temperature(0.0)) {
                Ok(resp) => parse_scores(&resp.text),
                Err(e) => {
                    tracing::warn!(id = %r.id, error = %e, "judge unavailable");
                    None
                }
            })
            .collect::<Vec<_>>()
    });

    let mut coverage = JudgeCoverage {
        n_sample: n,
        judges: judges.len(),
        requested: n * judges.len(),
        rubric_version: RUBRIC_VERSION.into(),
        ..JudgeCoverage::default()
    };
    let mut ratings = Vec::with_capacity(n);
    for (r, scores) in chosen.iter().zip(rated) {
        let mut rating = QualityRating { sample_id: r.id.clone(), judges: Vec::new() };
        for (name, s) in names.iter().zip(scores) {
            match s {
                Some(scores) => rating.judges.push(JudgeScore { judge: name.clone(), scores }),
                None => coverage.omitted.push((r.id.clone(), name.clone())),
            }
        }
        coverage.obtained += rating.judges.len();
        if rating.judges.is_empty() {
            coverage.unrated.push(r.id.clone());
        }
        ratings.push(rating);
    }
    Ok((ratings, coverage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{MockChatClient, MockEmbedder};
    use crate::capability::{AnswerKind, CapabilityCategory, ImageAsset, ImageSource, Provenance};
    use proptest::prelude::*;

    fn set(vectors: Vec<Vec<f64>>) -> EmbeddingSet {
        let ids = (0..vectors.len()).map(|i| i.to_string()).collect();
        EmbeddingSet::new(ids, vectors, Modality::Text).unwrap()
    }

    fn record(i: usize, q: &str) -> DatasetRecord {
        DatasetRecord {
            id: format!("r{i}"),
            image: ImageAsset::new(ImageSource::LocalPath, format!("{i}.png"), Provenance::Seed).unwrap(),
            question: q.into(),
            answer: "A".into(),
            answer_kind: AnswerKind::Choice,
            category: CapabilityCategory::Others,
            meta: Default::default(),
        }
    }

    fn rating(id: &str, scores: &[(u8, u8, u8)]) -> QualityRating {
        QualityRating {
            sample_id: id.into(),
            judges: scores
                .iter()
                .enumerate()
                .map(|(i, &(a, b, c))| JudgeScore { judge: i.to_string(), scores: AspectScores::new(a, b, c).unwrap() })
                .collect(),
        }
    }

    #[test]
    fn diversity_examples() {
        assert!(diversity(&set(vec![vec![1.0, 2.0]; 5])).unwrap().abs() < 1e-12);
        assert!((diversity(&set(vec![vec![1.0, 0.0], vec![0.0, 3.0]])).unwrap() - 1.0).abs() < 1e-12);
        // cosines (1, 0, 0): a, a, b with a ⟂ b
        let d = diversity(&set(vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
        assert!((diversity(&set(vec![vec![1.0], vec![-1.0]])).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_errors() {
        assert_eq!(diversity(&set(vec![vec![1.0]])), Err(AnalysisError::TooFew(1)));
        assert_eq!(diversity(&set(vec![vec![1.0, 0.0], vec![0.0, 0.0]])), Err(AnalysisError::ZeroNorm("1".into())));
        assert!(EmbeddingSet::new(vec!["a".into(), "b".into()], vec![vec![1.0], vec![1.0, 2.0]], Modality::Text).is_err());
    }

    proptest! {
        #[test]
        fn closed_form_matches_double_loop(
            vs in (2usize..40, 1usize..24).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(0.01f64..1.0, d), n)),
            scale in 0.1f64..10.0,
        ) {
            let s = set(vs.clone());
            let fast = diversity(&s).unwrap();
            prop_assert!((fast - diversity_naive(&s).unwrap()).abs() < 1e-12);
            let mut rev = vs.clone();
            rev.reverse();
            prop_assert!((diversity(&set(rev)).unwrap() - fast).abs() < 1e-12);
            let mut scaled = vs;
            scaled[0].iter_mut().for_each(|x| *x *= scale);
            prop_assert!((diversity(&set(scaled)).unwrap() - fast).abs() < 1e-12);
        }
    }

    #[test]
    fn qs_examples() {
        let cov = JudgeCoverage::default;
        assert_eq!(quality_score(&[rating("a", &[(5, 5, 5)])], cov()).unwrap().qs, 5.0);
        assert_eq!(quality_score(&[rating("a", &[(4, 3, 5)])], cov()).unwrap().qs, 4.0);
        assert_eq!(quality_score(&[rating("a", &[(5, 5, 5), (3, 3, 3)])], cov()).unwrap().qs, 4.0);
        let r = quality_score(&[rating("a", &[(5, 4, 3)]), rating("b", &[(1, 2, 3)])], cov()).unwrap();
        assert_eq!(r.per_aspect_means["CL"], 3.0);
        assert_eq!(r.qs, 3.0);
        assert_eq!(quality_score(&[], cov()), Err(AnalysisError::NoRatings));
        assert_eq!(AspectScores::new(0, 3, 3), Err(AnalysisError::ScoreRange(0)));
    }

    #[test]
    fn judging_with_one_garbled_judge() {
        let data: Vec<_> = (0..10).map(|i| record(i, &format!("question {i}"))).collect();
        let good = MockChatClient::constant("j1", r#"{"CL": 5, "S": 5, "CO": 5}"#);
        let low = MockChatClient::constant("j2", r#"{"CL": 3, "S": 3, "CO": 3}"#);
        let bad = MockChatClient::new("j3", 0).with_responder(|c| {
            Ok(if c.prompt().contains("question 4") { "no idea".into() } else { r#"{"CL": 4, "S": 4, "CO": 4}"#.into() })
        });
        let judges: Vec<&dyn ChatClient> = vec![&good, &low, &bad];
        let (ratings, cov) = judge_questions(&data, &judges, 200, 1, 4).unwrap();
        assert_eq!(cov.n_sample, 10);
        assert_eq!(cov.requested, 30);
        assert_eq!(cov.obtained, 29);
        assert_eq!(cov.omitted.len(), 1);
        let r4 = ratings.iter().find(|r| r.sample_id == "r4").unwrap();
        assert_eq!(r4.qs(), Some(4.0));
        let r1 = ratings.iter().find(|r| r.sample_id == "r1").unwrap();
        assert_eq!(r1.qs(), Some(4.0));
        let (again, _) = judge_questions(&data, &judges, 5, 1, 1).unwrap();
        let (twice, _) = judge_questions(&data, &judges, 5, 1, 3).unwrap();
        assert_eq!(again, twice);
    }

    #[test]
    fn embedded_repeat_plus_distinct() {
        let data = vec![record(0, "same"), record(1, "same"), record(2, "other")];
        let (set, skipped) = embed_corpus(&data, &MockEmbedder::dense(16), Modality::Text, 2).unwrap();
        assert!(skipped.is_empty());
        assert_eq!(set.vectors[0], set.vectors[1]);
        assert_ne!(set.vectors[0], set.vectors[2]);
        // one-hot mock vectors of distinct contents are orthogonal
        let pair = [record(0, "same"), record(2, "other")];
        let (set, _) = embed_corpus(&pair, &MockEmbedder::one_hot(4096), Modality::Text, 1).unwrap();
        assert_eq!(diversity(&set).unwrap(), 1.0);
    }
}
