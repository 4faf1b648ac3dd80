use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ExtractionBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    TimelineOrdinalDuplicate,
    TimelineNotDense,
    TimelineLabelDuplicate,
    SpanRangeInvalid,
    SpanIdDuplicate,
    SpanOverlap,
    ProfileDuplicate,
    AliasIsCanonical,
    AliasConflict,
    RelationshipUnresolved,
    DrivesUnsorted,
    EmptyName,
    SpanUnknown,
    StoryTimeUnknown,
    RelationNotBinary,
    RelationReflexive,
    DanglingReference,
    CharacterWithoutProfile,
    ExtractorFailure,
    UnparseableResponse,
    RecordDropped,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::TimelineOrdinalDuplicate => "timeline_ordinal_duplicate",
            Rule::TimelineNotDense => "timeline_not_dense",
            Rule::TimelineLabelDuplicate => "timeline_label_duplicate",
            Rule::SpanRangeInvalid => "span_range_invalid",
            Rule::SpanIdDuplicate => "span_id_duplicate",
            Rule::SpanOverlap => "span_overlap",
            Rule::ProfileDuplicate => "profile_duplicate",
            Rule::AliasIsCanonical => "alias_is_canonical",
            Rule::AliasConflict => "alias_conflict",
            Rule::RelationshipUnresolved => "relationship_unresolved",
            Rule::DrivesUnsorted => "drives_unsorted",
            Rule::EmptyName => "empty_name",
            Rule::SpanUnknown => "span_unknown",
            Rule::StoryTimeUnknown => "story_time_unknown",
            Rule::RelationNotBinary => "relation_not_binary",
            Rule::RelationReflexive => "relation_reflexive",
            Rule::DanglingReference => "dangling_reference",
            Rule::CharacterWithoutProfile => "character_without_profile",
            Rule::ExtractorFailure => "extractor_failure",
            Rule::UnparseableResponse => "unparseable_response",
            Rule::RecordDropped => "record_dropped",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    /// Stable record locator such as `relations[3]`.
    pub locator: String,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.locator, self.rule, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub(crate) fn error(&mut self, locator: String, rule: Rule, message: impl Into<String>) {
        self.errors.push(Issue { locator, rule, message: message.into() });
    }

    pub(crate) fn warn(&mut self, locator: String, rule: Rule, message: impl Into<String>) {
        self.warnings.push(Issue { locator, rule, message: message.into() });
    }
}

/// Check every bundle invariant. Issues are ordered by record kind (timeline,
/// spans, profiles, entities, relations, events, background) then index.
pub fn validate_bundle(bundle: &ExtractionBundle) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut ordinals = BTreeSet::new();
    let mut labels = HashSet::new();
    for (i, t) in bundle.timeline.iter().enumerate() {
        let loc = format!("timeline[{i}]");
        if !ordinals.insert(t.ordinal) {
            report.error(loc.clone(), Rule::TimelineOrdinalDuplicate, format!("ordinal {} repeated", t.ordinal));
        } else if t.ordinal as usize != i {
            report.error(loc.clone(), Rule::TimelineNotDense, format!("expected ordinal {i}, found {}", t.ordinal));
        }
        if !labels.insert(t.label.as_str()) {
            report.error(loc, Rule::TimelineLabelDuplicate, format!("label {:?} repeated", t.label));
        }
    }
    let time_ok = |t: u32| ordinals.contains(&t);

    let mut span_ids = HashSet::new();
    let mut last_end: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, s) in bundle.spans.iter().enumerate() {
        let loc = format!("spans[{i}]");
        if s.char_range.0 >= s.char_range.1 {
            report.error(loc.clone(), Rule::SpanRangeInvalid, format!("range {:?} is empty or reversed", s.char_range));
        }
        if !span_ids.insert(s.span_id.as_str()) {
            report.error(loc.clone(), Rule::SpanIdDuplicate, format!("span id {:?} repeated", s.span_id));
        }
        if let Some(&end) = last_end.get(&s.chapter_index) {
            if s.char_range.0 < end {
                report.error(loc, Rule::SpanOverlap, format!("span {:?} overlaps or precedes the previous span of chapter {}", s.span_id, s.chapter_index));
            }
        }
        last_end.insert(s.chapter_index, s.char_range.1);
    }
    let span_ok = |id: &str| span_ids.contains(id);

    let mut owners: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for p in &bundle.profiles {
        owners.entry(p.canonical_name.trim().to_lowercase()).or_default().insert(&p.canonical_name);
        for a in &p.aliases {
            owners.entry(a.trim().to_lowercase()).or_default().insert(&p.canonical_name);
        }
    }
    let canon: HashSet<&str> = bundle.profiles.iter().map(|p| p.canonical_name.as_str()).collect();
    let mut seen_profiles = HashSet::new();
    for (i, p) in bundle.profiles.iter().enumerate() {
        let loc = format!("profiles[{i}]");
        if p.canonical_name.trim().is_empty() {
            report.error(loc.clone(), Rule::EmptyName, "profile has an empty canonical name");
        }
        if !seen_profiles.insert(p.canonical_name.as_str()) {
            report.error(loc.clone(), Rule::ProfileDuplicate, format!("profile {:?} repeated", p.canonical_name));
        }
        let own = p.canonical_name.trim().to_lowercase();
        for a in &p.aliases {
            let k = a.trim().to_lowercase();
            if k == own {
                report.error(loc.clone(), Rule::AliasIsCanonical, format!("alias {a:?} equals the canonical name"));
            } else if owners.get(&k).is_some_and(|o| o.len() > 1) {
                let others: Vec<&str> = owners[&k].iter().copied().filter(|o| *o != p.canonical_name).collect();
                report.error(loc.clone(), Rule::AliasConflict, format!("alias {a:?} also claimed by {others:?}"));
            }
        }
        for rel in &p.relationships {
            if !canon.contains(rel.other_canonical_name.as_str()) {
                report.error(loc.clone(), Rule::RelationshipUnresolved, format!("relationship target {:?} is not a profile", rel.other_canonical_name));
            }
        }
        if p.drives.windows(2).any(|w| w[0].valid_from > w[1].valid_from) {
            report.error(loc.clone(), Rule::DrivesUnsorted, "drives are not sorted by valid_from");
        }
        for d in &p.drives {
            if !time_ok(d.valid_from) {
                report.error(loc.clone(), Rule::StoryTimeUnknown, format!("drive valid_from {} not in timeline", d.valid_from));
            }
        }
    }

    let entity_names: HashSet<&str> = bundle.entities.iter().map(|e| e.name.as_str()).collect();
    for (i, e) in bundle.entities.iter().enumerate() {
        let loc = format!("entities[{i}]");
        if e.name.trim().is_empty() {
            report.error(loc.clone(), Rule::EmptyName, "entity has an empty name");
        }
        if !span_ok(&e.span_id) {
            report.error(loc.clone(), Rule::SpanUnknown, format!("span {:?} does not exist", e.span_id));
        }
        if !time_ok(e.story_time) {
            report.error(loc.clone(), Rule::StoryTimeUnknown, format!("story_time {} not in timeline", e.story_time));
        }
        if e.kind == super::EntityKind::Character && !canon.contains(e.name.as_str()) {
            report.warn(loc, Rule::CharacterWithoutProfile, format!("character {:?} has no profile", e.name));
        }
    }

    for (i, r) in bundle.relations.iter().enumerate() {
        let loc = format!("relations[{i}]");
        if !r.extra_arguments.is_empty() {
            report.error(loc.clone(), Rule::RelationNotBinary, format!("relation not binary: {} extra argument(s)", r.extra_arguments.len()));
        }
        if r.subject == r.object {
            report.error(loc.clone(), Rule::RelationReflexive, format!("relation links {:?} to itself", r.subject));
        }
        for end in [&r.subject, &r.object] {
            if !entity_names.contains(end.as_str()) {
                report.error(loc.clone(), Rule::DanglingReference, format!("relation names unknown entity {end:?}"));
            }
        }
        if !span_ok(&r.span_id) {
            report.error(loc.clone(), Rule::SpanUnknown, format!("span {:?} does not exist", r.span_id));
        }
        if !time_ok(r.story_time) {
            report.error(loc, Rule::StoryTimeUnknown, format!("story_time {} not in timeline", r.story_time));
        }
    }

    for (i, ev) in bundle.events.iter().enumerate() {
        let loc = format!("events[{i}]");
        if ev.title.trim().is_empty() {
            report.error(loc.clone(), Rule::EmptyName, "event has an empty title");
        }
        for p in &ev.participants {
            if !entity_names.contains(p.as_str()) {
                report.error(loc.clone(), Rule::DanglingReference, format!("participant {p:?} is not an entity"));
            }
        }
        if !span_ok(&ev.span_id) {
            report.error(loc.clone(), Rule::SpanUnknown, format!("span {:?} does not exist", ev.span_id));
        }
        if !time_ok(ev.story_time) {
            report.error(loc, Rule::StoryTimeUnknown, format!("story_time {} not in timeline", ev.story_time));
        }
    }

    for (i, b) in bundle.background.iter().enumerate() {
        let loc = format!("background[{i}]");
        if b.topic.trim().is_empty() {
            report.error(loc.clone(), Rule::EmptyName, "background fact has an empty topic");
        }
        if let Some(id) = &b.span_id {
            if !span_ok(id) {
                report.error(loc.clone(), Rule::SpanUnknown, format!("span {id:?} does not exist"));
            }
        }
        let t = b.story_time.unwrap_or(0);
        if !time_ok(t) {
            report.error(loc, Rule::StoryTimeUnknown, format!("story_time {t} not in timeline"));
        }
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{EntityKind, EntityRecord, RelationRecord, Span};
    use crate::time::StoryTime;

    fn valid() -> ExtractionBundle {
        let span = |id: &str, ch: u32, a: usize| Span {
            span_id: id.into(),
            chapter_index: ch,
            text: "x".repeat(10),
            char_range: (a, a + 10),
        };
        let entity = |name: &str, kind, t| EntityRecord {
            name: name.into(),
            kind,
            description: String::new(),
            span_id: "c000-s000".into(),
            story_time: t,
        };
        let mut nemo = crate::ingest::CharacterProfile::new("Captain Nemo");
        nemo.aliases.insert("Nemo".into());
        ExtractionBundle {
            spans: vec![span("c000-s000", 0, 0), span("c001-s000", 1, 20)],
            profiles: vec![nemo],
            entities: vec![
                entity("Captain Nemo", EntityKind::Character, 0),
                entity("Nautilus", EntityKind::Object, 0),
            ],
            relations: vec![RelationRecord {
                subject: "Captain Nemo".into(),
                object: "Nautilus".into(),
                description: "commands".into(),
                span_id: "c001-s000".into(),
                story_time: 1,
                extra_arguments: vec![],
            }],
            events: vec![],
            background: vec![],
            timeline: vec![StoryTime::new(0, "Ch. 1"), StoryTime::new(1, "Ch. 2")],
        }
    }

    #[test]
    fn valid_bundle_has_no_errors() {
        let r = validate_bundle(&valid());
        assert!(r.errors.is_empty(), "{:?}", r.errors);
    }

    #[test]
    fn relation_time_outside_timeline() {
        let mut b = valid();
        b.relations[0].story_time = 7;
        let r = validate_bundle(&b);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].locator, "relations[0]");
        assert_eq!(r.errors[0].rule, Rule::StoryTimeUnknown);
    }

    #[test]
    fn ternary_relation() {
        let mut b = valid();
        b.relations[0].extra_arguments.push("Captain Nemo".into());
        let r = validate_bundle(&b);
        assert_eq!(r.errors.len(), 1);
        assert!(r.errors[0].message.starts_with("relation not binary"));
    }

    #[test]
    fn ordering_is_by_kind_then_index() {
        let mut b = valid();
        b.relations[0].span_id = "nope".into();
        b.entities[1].story_time = 9;
        b.timeline[1].label = "Ch. 1".into();
        let r = validate_bundle(&b);
        let locs: Vec<&str> = r.errors.iter().map(|e| e.locator.as_str()).collect();
        assert_eq!(locs, vec!["timeline[1]", "entities[1]", "relations[0]"]);
    }

    #[test]
    fn alias_rules() {
        let mut b = valid();
        let mut other = crate::ingest::CharacterProfile::new("Nemo Junior");
        other.aliases.insert("nemo".into());
        other.aliases.insert("Nemo Junior".into());
        b.profiles.push(other);
        let rules: Vec<Rule> = validate_bundle(&b).errors.iter().map(|e| e.rule).collect();
        assert_eq!(rules, vec![Rule::AliasConflict, Rule::AliasIsCanonical, Rule::AliasConflict]);
    }

    #[test]
    fn dangling_and_unsorted() {
        let mut b = valid();
        b.relations[0].object = "Abraham Lincoln".into();
        b.timeline = vec![StoryTime::new(1, "a"), StoryTime::new(0, "b")];
        let rules: Vec<Rule> = validate_bundle(&b).errors.iter().map(|e| e.rule).collect();
        assert_eq!(rules, vec![Rule::TimelineNotDense, Rule::TimelineNotDense, Rule::DanglingReference]);
    }
}
