use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{AnswerKey, AnswerKind, CapabilityCategory, DiagnosticInstance, ImageAsset, NumericTolerance};

/// One line of a dataset JSONL file. Seed pools, diagnostic pools and
/// generated training sets all share this shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image: ImageAsset,
    pub question: String,
    pub answer: String,
    pub answer_kind: AnswerKind,
    pub category: CapabilityCategory,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

impl DatasetRecord {
    /// Reference answer with the optional `meta.tolerance` (relative) applied.
    pub fn answer_key(&self) -> AnswerKey {
        let mut key = AnswerKey::new(self.answer.clone(), self.answer_kind);
        if let Some(rel) = self.meta.get("tolerance").and_then(Value::as_f64) {
            key = key.with_tolerance(NumericTolerance::relative(rel));
        }
        key
    }

    pub fn to_instance(&self) -> DiagnosticInstance {
        DiagnosticInstance {
            id: self.id.clone(),
            image: self.image.clone(),
            question: self.question.clone(),
            reference: self.answer_key(),
            category: self.category,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capability::{ImageSource, Provenance};

    #[test]
    fn record_wire_shape() {
        let line = r#"{"id":"a1","image":{"source":"remote-url","locator":"https://x/y.png","provenance":"searched"},"question":"What is shown?","answer":"3.14","answer_kind":"numeric","category":"statistical-charts","meta":{"tolerance":0.001}}"#;
        let rec: DatasetRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.category, CapabilityCategory::StatisticalCharts);
        assert_eq!(rec.image.source(), ImageSource::RemoteUrl);
        assert_eq!(rec.image.provenance(), Provenance::Searched);
        assert!(rec.answer_key().matches("3.1416"));
        assert_eq!(serde_json::to_string(&rec).unwrap(), line);
    }

    #[test]
    fn unknown_category_is_rejected() {
        let line = r#"{"id":"a1","image":{"source":"local-path","locator":"a.png","provenance":"seed"},"question":"q","answer":"a","answer_kind":"exact","category":"memes"}"#;
        assert!(serde_json::from_str::<DatasetRecord>(line).is_err());
    }
}
