use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::capability::{ImageAsset, Provenance};
use crate::util::digest_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOperation {
    Crop,
    OverlayText,
    Stitch,
    Fuse,
}

impl EditOperation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Crop => "crop",
            Self::OverlayText => "overlay_text",
            Self::Stitch => "stitch",
            Self::Fuse => "fuse",
        }
    }

    /// Stitching and fusing combine several inputs into one composed asset.
    pub fn provenance(self) -> Provenance {
        match self {
            Self::Crop | Self::OverlayText => Provenance::Edited,
            Self::Stitch | Self::Fuse => Provenance::Composed,
        }
    }

    pub fn min_inputs(self) -> usize {
        match self {
            Self::Crop | Self::OverlayText => 1,
            Self::Stitch | Self::Fuse => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub operation: EditOperation,
    pub instruction: String,
}

impl EditRequest {
    pub fn check(&self, inputs: &[ImageAsset]) -> Result<(), AgentError> {
        if self.instruction.trim().is_empty() {
            return Err(AgentError::Config("edit instruction must be non-empty".into()));
        }
        if inputs.len() < self.operation.min_inputs() {
            return Err(AgentError::Config(format!(
                "{} needs at least {} input image(s), got {}",
                self.operation.as_str(),
                self.operation.min_inputs(),
                inputs.len()
            )));
        }
        Ok(())
    }
}

pub trait ImageEditClient: Send + Sync {
    /// Returns a new asset whose provenance reflects the operation and whose
    /// parents are the input locators in order.
    fn edit(&self, request: &EditRequest, inputs: &[ImageAsset]) -> Result<ImageAsset, AgentError>;
}

/// Compositor stand-in: output locator is a digest of operation,
/// instruction and input locators.
#[derive(Debug, Clone, Default)]
pub struct MockEditClient;

impl ImageEditClient for MockEditClient {
    fn edit(&self, request: &EditRequest, inputs: &[ImageAsset]) -> Result<ImageAsset, AgentError> {
        request.check(inputs)?;
        let mut key = format!("{}\u{1f}{}", request.operation.as_str(), request.instruction);
        for a in inputs {
            key.push('\u{1f}');
            key.push_str(a.locator());
        }
        let locator = format!("mock://edit/{}/{}.png", request.operation.as_str(), &digest_hex(key.as_bytes())[..16]);
        let parents = inputs.iter().map(|a| a.locator().to_string()).collect();
        let (w, h) = match request.operation {
            EditOperation::Stitch => (
                inputs.iter().filter_map(ImageAsset::width).sum::<u32>().max(1),
                inputs.iter().filter_map(ImageAsset::height).max().unwrap_or(1),
            ),
            _ => (
                inputs[0].width().unwrap_or(512),
                inputs[0].height().unwrap_or(512),
            ),
        };
        ImageAsset::derived(locator, request.operation.provenance(), parents)
            .map(|a| a.with_dimensions(w, h))
            .map_err(|e| AgentError::Malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capability::ImageSource;

    fn asset(loc: &str) -> ImageAsset {
        ImageAsset::new(ImageSource::RemoteUrl, loc, Provenance::Searched).unwrap().with_dimensions(300, 200)
    }

    #[test]
    fn stitch_records_parents_in_order() {
        let req = EditRequest { operation: EditOperation::Stitch, instruction: "side by side".into() };
        let out = MockEditClient.edit(&req, &[asset("https://a"), asset("https://b")]).unwrap();
        assert_eq!(out.provenance(), Provenance::Composed);
        assert_eq!(out.parents(), ["https://a", "https://b"]);
        assert_eq!(out.width(), Some(600));
        let again = MockEditClient.edit(&req, &[asset("https://a"), asset("https://b")]).unwrap();
        assert_eq!(out, again);
        let swapped = MockEditClient.edit(&req, &[asset("https://b"), asset("https://a")]).unwrap();
        assert_ne!(out.locator(), swapped.locator());
    }

    #[test]
    fn rejects_bad_requests() {
        let req = EditRequest { operation: EditOperation::Crop, instruction: " ".into() };
        assert!(MockEditClient.edit(&req, &[asset("https://a")]).is_err());
        let req = EditRequest { operation: EditOperation::Fuse, instruction: "merge".into() };
        assert!(MockEditClient.edit(&req, &[asset("https://a")]).is_err());
        let req = EditRequest { operation: EditOperation::Crop, instruction: "crop legend".into() };
        assert_eq!(MockEditClient.edit(&req, &[asset("https://a")]).unwrap().provenance(), Provenance::Edited);
    }
}
