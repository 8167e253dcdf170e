//! Capability taxonomy and the data model shared by every stage.
//!
//! The taxonomy is closed: twelve categories in a fixed canonical order.
//! Quota accounting needs exact category identity, so unknown identifiers
//! are rejected instead of being folded into `others`.

mod answer;
mod dataset;

pub use answer::{extract_final_answer, parse_number_with_unit, AnswerKey, AnswerKind, NumericTolerance};
pub use dataset::DatasetRecord;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown capability category `{0}`")]
pub struct UnknownCategory(pub String);

/// One of the twelve canonical visual-content classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapabilityCategory {
    GeometryImages,
    MedicalImages,
    StatisticalCharts,
    TextIntensiveImages,
    FlowDiagrams,
    MathematicalFormulas,
    SpatialMaps,
    NaturalScenes,
    DailyObjects,
    Artworks,
    ArchitecturalImages,
    Others,
}

impl CapabilityCategory {
    pub const COUNT: usize = 12;

    /// Canonical order. Tie-breaks everywhere in the crate follow it.
    pub const ALL: [CapabilityCategory; Self::COUNT] = [
        Self::GeometryImages,
        Self::MedicalImages,
        Self::StatisticalCharts,
        Self::TextIntensiveImages,
        Self::FlowDiagrams,
        Self::MathematicalFormulas,
        Self::SpatialMaps,
        Self::NaturalScenes,
        Self::DailyObjects,
        Self::Artworks,
        Self::ArchitecturalImages,
        Self::Others,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Self::GeometryImages => "geometry-images",
            Self::MedicalImages => "medical-images",
            Self::StatisticalCharts => "statistical-charts",
            Self::TextIntensiveImages => "text-intensive-images",
            Self::FlowDiagrams => "flow-diagrams",
            Self::MathematicalFormulas => "mathematical-formulas",
            Self::SpatialMaps => "spatial-maps",
            Self::NaturalScenes => "natural-scenes",
            Self::DailyObjects => "daily-objects",
            Self::Artworks => "artworks",
            Self::ArchitecturalImages => "architectural-images",
            Self::Others => "others",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::GeometryImages => "Geometry images",
            Self::MedicalImages => "Medical images",
            Self::StatisticalCharts => "Statistical charts",
            Self::TextIntensiveImages => "Text-intensive images",
            Self::FlowDiagrams => "Flow diagrams",
            Self::MathematicalFormulas => "Mathematical formulas",
            Self::SpatialMaps => "Spatial maps",
            Self::NaturalScenes => "Natural scenes",
            Self::DailyObjects => "Daily objects",
            Self::Artworks => "Artworks",
            Self::ArchitecturalImages => "Architectural images",
            Self::Others => "Others",
        }
    }

    /// Position in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CapabilityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for CapabilityCategory {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_category(s)
    }
}

/// Case-insensitive lookup of a canonical category identifier.
pub fn parse_category(token: &str) -> Result<CapabilityCategory, UnknownCategory> {
    let needle = token.trim();
    CapabilityCategory::ALL
        .iter()
        .copied()
        .find(|c| c.id().eq_ignore_ascii_case(needle))
        .ok_or_else(|| UnknownCategory(token.to_string()))
}

/// Dense per-category storage indexed by canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct PerCategory<T>(pub [T; CapabilityCategory::COUNT]);

impl<T: Default + Copy> Default for PerCategory<T> {
    fn default() -> Self {
        Self([T::default(); CapabilityCategory::COUNT])
    }
}

impl<T> PerCategory<T> {
    pub fn from_fn(mut f: impl FnMut(CapabilityCategory) -> T) -> Self {
        Self(std::array::from_fn(|i| f(CapabilityCategory::ALL[i])))
    }

    pub fn get(&self, c: CapabilityCategory) -> &T {
        &self.0[c.index()]
    }

    pub fn get_mut(&mut self, c: CapabilityCategory) -> &mut T {
        &mut self.0[c.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (CapabilityCategory, &T)> {
        CapabilityCategory::ALL.iter().copied().zip(self.0.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageSource {
    LocalPath,
    RemoteUrl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Seed,
    Searched,
    Edited,
    Composed,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Seed => "seed",
            Self::Searched => "searched",
            Self::Edited => "edited",
            Self::Composed => "composed",
        }
    }
}

/// Opaque reference to an image. Pixels never pass through this crate.
///
/// Provenance and parents are fixed at construction; there are no setters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAsset {
    source: ImageSource,
    locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    parents: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssetError {
    #[error("image locator must be non-empty")]
    EmptyLocator,
    #[error("{0} assets must record at least one parent locator")]
    MissingParents(&'static str),
}

impl ImageAsset {
    pub fn new(source: ImageSource, locator: impl Into<String>, provenance: Provenance) -> Result<Self, AssetError> {
        let locator = locator.into();
        if locator.trim().is_empty() {
            return Err(AssetError::EmptyLocator);
        }
        if matches!(provenance, Provenance::Edited | Provenance::Composed) {
            return Err(AssetError::MissingParents(provenance.as_str()));
        }
        Ok(Self { source, locator, width: None, height: None, provenance, parents: Vec::new() })
    }

    /// Asset produced by editing or composing `parents`, in order.
    pub fn derived(
        locator: impl Into<String>,
        provenance: Provenance,
        parents: Vec<String>,
    ) -> Result<Self, AssetError> {
        let locator = locator.into();
        if locator.trim().is_empty() {
            return Err(AssetError::EmptyLocator);
        }
        if parents.is_empty() {
            return Err(AssetError::MissingParents(provenance.as_str()));
        }
        let source = source_for(&locator);
        Ok(Self { source, locator, width: None, height: None, provenance, parents })
    }

    pub fn with_dimensions(mut self, width: u32, height: u32) -> Self {
        self.width = Some(width);
        self.height = Some(height);
        self
    }

    pub fn source(&self) -> ImageSource {
        self.source
    }

    pub fn locator(&self) -> &str {
        &self.locator
    }

    pub fn width(&self) -> Option<u32> {
        self.width
    }

    pub fn height(&self) -> Option<u32> {
        self.height
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn parents(&self) -> &[String] {
        &self.parents
    }
}

/// Guess the source kind from a locator string.
pub fn source_for(locator: &str) -> ImageSource {
    if locator.contains("://") && !locator.starts_with("file://") {
        ImageSource::RemoteUrl
    } else {
        ImageSource::LocalPath
    }
}

/// One item of a diagnostic pool.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticInstance {
    pub id: String,
    pub image: ImageAsset,
    pub question: String,
    pub reference: AnswerKey,
    pub category: CapabilityCategory,
}

/// Per-step judgement attached by a verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAssessment {
    pub step_index: usize,
    pub passed: bool,
    #[serde(default)]
    pub note: String,
}

/// Scored outcome for one response. `scalar` is 1 exactly when the final
/// answer is correct; step assessments only feed failure attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub step_assessments: Vec<StepAssessment>,
    pub final_correct: bool,
    scalar: u8,
}

impl Verdict {
    pub fn new(final_correct: bool, step_assessments: Vec<StepAssessment>) -> Self {
        Self { step_assessments, final_correct, scalar: u8::from(final_correct) }
    }

    pub fn scalar(&self) -> u8 {
        self.scalar
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_canonical_and_uppercase_ids() {
        assert_eq!(parse_category("statistical-charts").unwrap(), CapabilityCategory::StatisticalCharts);
        assert_eq!(parse_category("STATISTICAL-CHARTS").unwrap(), CapabilityCategory::StatisticalCharts);
    }

    #[test]
    fn unknown_category_carries_token() {
        let err = parse_category("memes").unwrap_err();
        assert_eq!(err, UnknownCategory("memes".into()));
        assert!(err.to_string().contains("memes"));
    }

    #[test]
    fn taxonomy_is_closed_and_ordered() {
        assert_eq!(CapabilityCategory::ALL.len(), 12);
        for (i, c) in CapabilityCategory::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(parse_category(c.id()).unwrap(), *c);
            let json = serde_json::to_string(c).unwrap();
            assert_eq!(json, format!("\"{}\"", c.id()));
            let back: CapabilityCategory = serde_json::from_str(&json).unwrap();
            assert_eq!(back, *c);
        }
        assert!(serde_json::from_str::<CapabilityCategory>("\"memes\"").is_err());
    }

    #[test]
    fn asset_requires_locator_and_parents() {
        assert_eq!(
            ImageAsset::new(ImageSource::LocalPath, "  ", Provenance::Seed).unwrap_err(),
            AssetError::EmptyLocator
        );
        assert!(ImageAsset::new(ImageSource::LocalPath, "a.png", Provenance::Composed).is_err());
        assert!(ImageAsset::derived("mock://x", Provenance::Edited, vec![]).is_err());
        let a = ImageAsset::derived("mock://x", Provenance::Composed, vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(a.parents(), ["a", "b"]);
        assert_eq!(a.source(), ImageSource::RemoteUrl);
    }

    #[test]
    fn verdict_scalar_tracks_final_correctness() {
        assert_eq!(Verdict::new(true, vec![]).scalar(), 1);
        assert_eq!(Verdict::new(false, vec![]).scalar(), 0);
    }
}
