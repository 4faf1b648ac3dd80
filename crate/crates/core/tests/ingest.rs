mod common;

use std::fs;

use living_novel::graph::build_graph;
use living_novel::ingest::{
    ingest_novel, normalize_aliases, segment_novel, validate_bundle, CharacterProfile, EntityKind,
    ExtractionBundle, RuleBasedExtractor, DEFAULT_CHAPTER_PATTERN, DEFAULT_SPAN_BUDGET,
};
use proptest::prelude::*;

fn chars(s: &str, range: (usize, usize)) -> String {
    s.chars().skip(range.0).take(range.1 - range.0).collect()
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

fn nautilus() -> (String, Vec<CharacterProfile>) {
    let text = fs::read_to_string(common::fixture("nautilus.txt")).unwrap();
    let profiles = serde_json::from_str(&fs::read_to_string(common::fixture("nautilus.profiles.json")).unwrap()).unwrap();
    (text, profiles)
}

fn paragraph() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-zA-Zéü]{1,12}[.,!?]?", 1..30).prop_map(|w| w.join(" "))
}

fn document() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::collection::vec(paragraph(), 1..6), 1..5).prop_map(|chapters| {
        chapters
            .iter()
            .enumerate()
            .map(|(i, paras)| format!("CHAPTER {}\n\n{}\n", i + 1, paras.join("\n\n")))
            .collect::<Vec<_>>()
            .join("\n")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn segmentation_reconstructs_every_chapter(doc in document(), budget in 8usize..400) {
        let seg = segment_novel(&doc, "^CHAPTER", budget).unwrap();
        prop_assert!(seg.warnings.is_empty());
        for ch in &seg.chapters {
            let spans: Vec<_> = seg.spans.iter().filter(|s| s.chapter_index == ch.index).collect();
            for s in &spans {
                prop_assert!(s.char_range.0 < s.char_range.1);
                prop_assert!(s.text.chars().count() <= budget);
                prop_assert_eq!(&chars(&doc, s.char_range), &s.text);
            }
            for w in spans.windows(2) {
                prop_assert!(w[0].char_range.1 <= w[1].char_range.0);
            }
            let joined: String = spans.iter().map(|s| s.text.as_str()).collect();
            prop_assert_eq!(squash(&joined), squash(&chars(&doc, ch.char_range)));
        }
    }

    #[test]
    fn bundle_json_round_trip(seed in any::<u64>()) {
        let bundle = common::random_bundle(seed, 8);
        let back = ExtractionBundle::from_json(&bundle.to_json()).unwrap();
        prop_assert_eq!(back, bundle);
    }

    #[test]
    fn normalize_is_idempotent_and_keeps_counts(seed in any::<u64>()) {
        let mut bundle = common::random_bundle(seed, 6);
        // give every character a lowercase alias that the records use
        for p in &mut bundle.profiles {
            p.aliases.insert(format!("old {}", p.canonical_name.to_lowercase()));
        }
        for e in bundle.entities.iter_mut().step_by(2) {
            if e.kind == EntityKind::Character {
                e.name = format!("  OLD {} ", e.name);
            }
        }
        let once = normalize_aliases(&bundle).unwrap();
        let twice = normalize_aliases(&once).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.entities.len(), bundle.entities.len());
        prop_assert_eq!(once.relations.len(), bundle.relations.len());
        prop_assert_eq!(once.events.len(), bundle.events.len());
        prop_assert_eq!(once.background.len(), bundle.background.len());
        for e in once.entities.iter().filter(|e| e.kind == EntityKind::Character) {
            prop_assert!(once.profiles.iter().any(|p| p.canonical_name == e.name), "{}", e.name);
        }
    }

    #[test]
    fn valid_bundles_always_build(seed in any::<u64>()) {
        let bundle = common::random_bundle(seed, 10);
        prop_assert!(validate_bundle(&bundle).is_ok());
        prop_assert!(build_graph(&bundle).is_ok());
    }
}

#[test]
fn small_fixture_is_valid() {
    let report = validate_bundle(&common::small_bundle());
    assert!(report.is_ok(), "{:?}", report.errors);
    assert!(report.warnings.is_empty(), "{:?}", report.warnings);
}

#[test]
fn fixture_novel_ingests_into_a_valid_bundle() {
    let (text, profiles) = nautilus();
    let run = ingest_novel(&text, DEFAULT_CHAPTER_PATTERN, DEFAULT_SPAN_BUDGET, &profiles, &RuleBasedExtractor).unwrap();
    assert!(run.segmentation_warnings.is_empty());
    assert!(run.report.is_ok(), "{:?}", run.report.errors);
    // independent re-validation of the emitted bundle
    assert!(validate_bundle(&run.bundle).is_ok());

    let b = &run.bundle;
    assert_eq!(b.timeline.len(), 12);
    assert_eq!(b.timeline[0].label, "CHAPTER 1. The Moving Reef");
    let names: Vec<&str> = b.entities.iter().map(|e| e.name.as_str()).collect();
    for canonical in ["Captain Nemo", "Professor Aronnax", "Conseil", "Ned Land"] {
        assert!(names.contains(&canonical), "missing {canonical}");
    }
    // aliases never survive normalization
    assert!(!names.contains(&"Nemo"));
    assert!(b.entities.iter().any(|e| e.name == "Nautilus"));
    assert!(b.entities.iter().any(|e| e.name == "Torres Strait" && e.kind == EntityKind::Location));
    assert!(!b.relations.is_empty());
    assert!(!b.events.is_empty());
    assert!(b.relations.iter().all(|r| r.extra_arguments.is_empty() && r.subject != r.object));
}

#[test]
fn fixture_ingestion_is_deterministic() {
    let (text, profiles) = nautilus();
    let a = ingest_novel(&text, DEFAULT_CHAPTER_PATTERN, DEFAULT_SPAN_BUDGET, &profiles, &RuleBasedExtractor).unwrap();
    let b = ingest_novel(&text, DEFAULT_CHAPTER_PATTERN, DEFAULT_SPAN_BUDGET, &profiles, &RuleBasedExtractor).unwrap();
    assert_eq!(a.bundle.to_json(), b.bundle.to_json());
}

#[test]
fn bundle_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.json");
    let bundle = common::small_bundle();
    bundle.save(&path).unwrap();
    assert_eq!(ExtractionBundle::load(&path).unwrap(), bundle);
}
