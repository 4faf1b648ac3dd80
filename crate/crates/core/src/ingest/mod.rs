//! Corpus ingestion: segmentation, extraction, alias normalization and
//! validation of the structured assets a graph is built from.
//!
//! The on-disk form of an [`ExtractionBundle`] is a single JSON document whose
//! field names match the structs below (see `schemas/bundle.schema.json`).

mod alias;
mod extract;
mod segment;
mod validate;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Ordinal, StoryTime};

pub use alias::{alias_map, normalize_aliases};
pub use extract::{
    run_extractor, ExtractionContext, ExtractionRun, ExtractorClient, LlmExtractor, Pass,
    RuleBasedExtractor, ENTITY_PROMPT, EVENT_PROMPT, RELATION_PROMPT,
};
pub use segment::{segment_novel, Chapter, Segmentation, DEFAULT_SPAN_BUDGET};
pub use validate::{validate_bundle, Issue, Rule, ValidationReport};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("empty document")]
    EmptyDocument,
    #[error("invalid chapter pattern: {0}")]
    BadPattern(#[from] regex::Error),
    #[error("alias conflict: mention {mention:?} matches profiles {owners:?}")]
    AliasConflict { mention: String, owners: Vec<String> },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bundle parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A contiguous, paragraph-aligned slice of one chapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub span_id: String,
    pub chapter_index: u32,
    pub text: String,
    /// `(start, end)` offsets in Unicode scalar values into the source document.
    pub char_range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Drive {
    pub description: String,
    pub valid_from: Ordinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relationship {
    pub other_canonical_name: String,
    pub nature: String,
    pub dynamics: String,
}

/// Four-layer persona record: basics, core attributes, drives over time and
/// relationship dynamics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub canonical_name: String,
    #[serde(default)]
    pub aliases: BTreeSet<String>,
    #[serde(default)]
    pub origin: String,
    #[serde(default)]
    pub core_attributes: Vec<String>,
    #[serde(default)]
    pub drives: Vec<Drive>,
    #[serde(default)]
    pub relationships: Vec<Relationship>,
}

impl CharacterProfile {
    pub fn new(canonical_name: impl Into<String>) -> Self {
        Self {
            canonical_name: canonical_name.into(),
            aliases: BTreeSet::new(),
            origin: String::new(),
            core_attributes: Vec::new(),
            drives: Vec::new(),
            relationships: Vec::new(),
        }
    }

    /// The latest drive already in effect at `t`.
    pub fn drive_at(&self, t: Ordinal) -> Option<&Drive> {
        self.drives.iter().rev().find(|d| d.valid_from <= t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Character,
    Location,
    Object,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub name: String,
    pub kind: EntityKind,
    #[serde(default)]
    pub description: String,
    pub span_id: String,
    pub story_time: Ordinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub subject: String,
    pub object: String,
    #[serde(default)]
    pub description: String,
    pub span_id: String,
    pub story_time: Ordinal,
    /// Extra arguments of an n-ary relation. Valid bundles leave this empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_arguments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub title: String,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub participants: Vec<String>,
    pub story_time: Ordinal,
    pub span_id: String,
}

/// Macro-level world fact. Anchored at ordinal 0 unless `story_time` is given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundRecord {
    pub topic: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub story_time: Option<Ordinal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionBundle {
    #[serde(default)]
    pub spans: Vec<Span>,
    #[serde(default)]
    pub profiles: Vec<CharacterProfile>,
    #[serde(default)]
    pub entities: Vec<EntityRecord>,
    #[serde(default)]
    pub relations: Vec<RelationRecord>,
    #[serde(default)]
    pub events: Vec<EventRecord>,
    #[serde(default)]
    pub background: Vec<BackgroundRecord>,
    #[serde(default)]
    pub timeline: Vec<StoryTime>,
}

/// Matches headings such as `Chapter 3`, `CHAPTER IV. The Coral Kingdom`.
pub const DEFAULT_CHAPTER_PATTERN: &str = r"^(?i:chapter)\b.*$";

/// Everything one ingestion run produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestRun {
    pub bundle: ExtractionBundle,
    pub report: ValidationReport,
    pub segmentation_warnings: Vec<String>,
}

/// One timeline entry per chapter, labelled by its heading. Duplicate
/// headings get a ` (2)`, ` (3)` suffix so labels stay unique.
pub fn timeline_from_chapters(chapters: &[Chapter]) -> Vec<StoryTime> {
    let mut seen: BTreeSet<String> = BTreeSet::new();
    chapters
        .iter()
        .map(|c| {
            let base = crate::text::normalize_ws(&c.heading);
            let mut label = base.clone();
            let mut n = 2;
            while !seen.insert(label.clone()) {
                label = format!("{base} ({n})");
                n += 1;
            }
            StoryTime::new(c.index, label)
        })
        .collect()
}

/// Segment, extract, normalize aliases and validate in one pass.
pub fn ingest_novel(
    document: &str,
    chapter_pattern: &str,
    budget: usize,
    profiles: &[CharacterProfile],
    extractor: &dyn ExtractorClient,
) -> Result<IngestRun, IngestError> {
    let seg = segment_novel(document, chapter_pattern, budget)?;
    let timeline = timeline_from_chapters(&seg.chapters);
    let run = run_extractor(&seg.spans, &timeline, profiles, extractor);
    let bundle = normalize_aliases(&run.bundle)?;
    let mut report = validate_bundle(&bundle);
    let mut errors = run.report.errors;
    errors.append(&mut report.errors);
    let mut warnings = run.report.warnings;
    warnings.append(&mut report.warnings);
    Ok(IngestRun {
        bundle,
        report: ValidationReport { errors, warnings },
        segmentation_warnings: seg.warnings,
    })
}

impl ExtractionBundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        fs::write(path, self.to_json() + "\n")
            .map_err(|source| IngestError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path)
            .map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn profile(&self, canonical_name: &str) -> Option<&CharacterProfile> {
        self.profiles.iter().find(|p| p.canonical_name == canonical_name)
    }
}
