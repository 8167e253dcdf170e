use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::plan::GenerationPlan;
use crate::agents::{
    extract_json_object, payload_prompt, AgentError, ChatClient, ChatMessage, ChatRequest, EditRequest,
    ImageEditClient, ImageSearchClient, SearchHit, SearchQuery,
};
use crate::capability::{ImageAsset, ImageSource, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub top_k: usize,
    pub min_width: u32,
    pub min_height: u32,
    pub max_bytes: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self { top_k: 3, min_width: 224, min_height: 224, max_bytes: 8 * 1024 * 1024 }
    }
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("plan has an empty image requirement")]
    EmptyRequirement,
    #[error("no candidate image survived filtering after {queries} queries")]
    NoCandidate { queries: usize },
    #[error("image edit failed: {0}")]
    Edit(AgentError),
}

const CLASSIFIER_INSTRUCTION: &str = "Decide whether the described image satisfies the requirement. Reply with a \
JSON object {\"match\": bool}.";

fn queries(plan: &GenerationPlan, top_k: usize) -> Vec<SearchQuery> {
    let tagged = SearchQuery { text: plan.image_req.clone(), tags: plan.search_tags.clone(), top_k };
    let broad = SearchQuery::new(format!("{} {}", plan.category.display_name(), plan.image_req), top_k);
    if broad.query_string() == tagged.query_string() {
        vec![tagged]
    } else {
        vec![tagged, broad]
    }
}

fn passes_limits(hit: &SearchHit, cfg: &SelectorConfig) -> bool {
    let too_small = matches!((hit.width, hit.height), (Some(w), Some(h)) if w < cfg.min_width || h < cfg.min_height);
    let too_large = hit.bytes.is_some_and(|b| b > cfg.max_bytes);
    !hit.url.trim().is_empty() && !too_small && !too_large
}

fn structure_matches(plan: &GenerationPlan, hit: &SearchHit, classifier: &dyn ChatClient) -> bool {
    let payload = json!({
        "requirement": plan.image_req,
        "category": plan.category.id(),
        "title": hit.title,
        "url": hit.url,
        "width": hit.width,
        "height": hit.height,
    });
    let req = ChatRequest::new(classifier.model(), vec![ChatMessage::user(payload_prompt(CLASSIFIER_INSTRUCTION, &payload))]);
    match classifier.chat(&req) {
        Ok(resp) => match extract_json_object(&resp.text) {
            Some(v) => v.get("match").and_then(Value::as_bool).unwrap_or(false),
            None => resp.text.trim().to_ascii_lowercase().starts_with("yes"),
        },
        Err(e) => {
            tracing::debug!(url = %hit.url, error = %e, "structure classifier unavailable; dropping candidate");
            false
        }
    }
}

fn to_asset(hit: &SearchHit) -> Option<ImageAsset> {
    let source = if hit.url.contains("://") { ImageSource::RemoteUrl } else { ImageSource::LocalPath };
    let asset = ImageAsset::new(source, hit.url.clone(), Provenance::Searched).ok()?;
    Some(match (hit.width, hit.height) {
        (Some(w), Some(h)) => asset.with_dimensions(w, h),
        _ => asset,
    })
}

/// Search, filter, then edit or compose when the plan asks for it.
///
/// Each query contributes at most `top_k` hits. Hits are filtered on size
/// limits and, when a classifier is given, on structure. The first
/// survivor in rank order is used; compositions take the first survivors
/// up to the operation's input count.
pub fn select_image(
    plan: &GenerationPlan,
    search: &dyn ImageSearchClient,
    editor: &dyn ImageEditClient,
    classifier: Option<&dyn ChatClient>,
    cfg: &SelectorConfig,
) -> Result<ImageAsset, SelectError> {
    if plan.image_req.trim().is_empty() {
        return Err(SelectError::EmptyRequirement);
    }
    let needed = plan.edit.as_ref().map(|e| e.operation.min_inputs()).unwrap_or(1);
    let qs = queries(plan, cfg.top_k);
    let mut survivors: Vec<ImageAsset> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for q in &qs {
        let hits = match search.search(q) {
            Ok(r) => r.hits,
            Err(e) => {
                tracing::debug!(query = %q.query_string(), error = %e, "search failed");
                continue;
            }
        };
        for hit in hits.iter().take(cfg.top_k) {
            if !seen.insert(hit.url.clone()) || !passes_limits(hit, cfg) {
                continue;
            }
            if classifier.is_some_and(|c| !structure_matches(plan, hit, c)) {
                continue;
            }
            if let Some(a) = to_asset(hit) {
                survivors.push(a);
            }
            if survivors.len() >= needed {
                break;
            }
        }
        if survivors.len() >= needed {
            break;
        }
    }
    if survivors.len() < needed {
        return Err(SelectError::NoCandidate { queries: qs.len() });
    }
    match &plan.edit {
        None => Ok(survivors.swap_remove(0)),
        Some(demand) => {
            let request = EditRequest { operation: demand.operation, instruction: demand.instruction.clone() };
            editor.edit(&request, &survivors[..needed]).map_err(SelectError::Edit)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{read_payload, EditOperation, MockChatClient, MockEditClient, MockSearchClient};
    use crate::capability::CapabilityCategory;
    use crate::questioner::plan::EditDemand;
    use crate::questioner::{AnswerFormat, QuestionKind, QuestionRequirement};

    fn plan(req: &str, edit: Option<EditDemand>) -> GenerationPlan {
        let question_req = QuestionRequirement { kind: QuestionKind::Numeric, unit_required: false, structured_output: false };
        GenerationPlan {
            sample_index: 0,
            category: CapabilityCategory::StatisticalCharts,
            image_req: req.into(),
            search_tags: vec![],
            question_req,
            answer_format_req: AnswerFormat::for_requirement(&question_req),
            direction: "d".into(),
            edit,
        }
    }

    fn hit(url: &str, title: &str, w: u32) -> SearchHit {
        SearchHit { url: url.into(), title: title.into(), width: Some(w), height: Some(w), bytes: Some(1000) }
    }

    fn title_classifier() -> MockChatClient {
        MockChatClient::new("classifier", 0).with_responder(|c| {
            let p = read_payload(c.prompt()).unwrap();
            let ok = p["title"].as_str().unwrap().contains("legend");
            Ok(json!({ "match": ok }).to_string())
        })
    }

    #[test]
    fn structural_filter_picks_the_match() {
        let search = MockSearchClient::fixed(vec![
            hit("https://x/1.png", "bar chart", 800),
            hit("https://x/2.png", "bar chart with legend", 800),
            hit("https://x/3.png", "pie chart", 800),
        ]);
        let classifier = title_classifier();
        let a = select_image(&plan("bar chart with legend", None), &search, &MockEditClient, Some(&classifier), &SelectorConfig::default()).unwrap();
        assert_eq!(a.locator(), "https://x/2.png");
        assert_eq!(a.provenance(), Provenance::Searched);
    }

    #[test]
    fn at_most_top_k_per_query() {
        let seen = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let s2 = seen.clone();
        let search = MockSearchClient::fixed((0..10).map(|i| hit(&format!("https://x/{i}.png"), "t", 800)).collect());
        let classifier = MockChatClient::new("classifier", 0).with_responder(move |_| {
            s2.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok("{\"match\": false}".into())
        });
        let err = select_image(&plan("chart", None), &search, &MockEditClient, Some(&classifier), &SelectorConfig::default());
        assert!(matches!(err, Err(SelectError::NoCandidate { queries: 2 })));
        // Both queries return the same first three hits; duplicates are skipped.
        assert_eq!(seen.load(std::sync::atomic::Ordering::SeqCst), 3);
    }

    #[test]
    fn small_and_large_images_are_dropped() {
        let mut big = hit("https://x/big.png", "t", 4000);
        big.bytes = Some(9 * 1024 * 1024);
        let search = MockSearchClient::fixed(vec![hit("https://x/tiny.png", "t", 100), big, hit("https://x/ok.png", "t", 300)]);
        let a = select_image(&plan("chart", None), &search, &MockEditClient, None, &SelectorConfig::default()).unwrap();
        assert_eq!(a.locator(), "https://x/ok.png");
    }

    #[test]
    fn compose_records_both_parents() {
        let search = MockSearchClient::new(|_| Ok(vec![hit("https://x/a.png", "a", 400), hit("https://x/b.png", "b", 400)]));
        let edit = EditDemand { operation: EditOperation::Stitch, instruction: "side by side".into() };
        let a = select_image(&plan("two charts", Some(edit)), &search, &MockEditClient, None, &SelectorConfig::default()).unwrap();
        assert_eq!(a.provenance(), Provenance::Composed);
        assert_eq!(a.parents(), ["https://x/a.png".to_string(), "https://x/b.png".to_string()]);
    }
}
