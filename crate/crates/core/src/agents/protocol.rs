//! Prompt framing shared by all agent roles.
//!
//! Each role prompt is a natural-language instruction followed by one
//! `INPUT_JSON:` line holding the structured inputs. Agents answer with a
//! JSON object, optionally wrapped in prose or a fenced block.

use serde_json::Value;

const PAYLOAD_TAG: &str = "INPUT_JSON: ";

pub fn payload_prompt(instruction: &str, payload: &Value) -> String {
    format!("{instruction}\n\n{PAYLOAD_TAG}{payload}")
}

/// Recover the structured inputs from a prompt built by [`payload_prompt`].
pub fn read_payload(prompt: &str) -> Option<Value> {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(PAYLOAD_TAG))
        .and_then(|raw| serde_json::from_str(raw).ok())
}

/// First parseable JSON object in a free-form reply.
pub fn extract_json_object(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v @ Value::Object(_)) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str(&trimmed[start..=end]) {
        Ok(v @ Value::Object(_)) => Some(v),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn payload_round_trip() {
        let p = payload_prompt("Do the thing.\nCarefully.", &json!({"a": [1, 2], "b": "x\ny"}));
        assert_eq!(read_payload(&p).unwrap(), json!({"a": [1, 2], "b": "x\ny"}));
        assert!(read_payload("no payload").is_none());
    }

    #[test]
    fn extracts_fenced_json() {
        let reply = "Sure!\n```json\n{\"ok\": true}\n```";
        assert_eq!(extract_json_object(reply).unwrap(), json!({"ok": true}));
        assert!(extract_json_object("nothing here").is_none());
        assert!(extract_json_object("[1,2]").is_none());
    }
}
