//! Fixtures and random bundle generation shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use living_novel::graph::{build_graph, DiegeticGraph};
use living_novel::ingest::{
    ingest_novel, BackgroundRecord, CharacterProfile, EntityKind, EntityRecord, EventRecord,
    ExtractionBundle, RelationRecord, RuleBasedExtractor, Span, DEFAULT_CHAPTER_PATTERN,
    DEFAULT_SPAN_BUDGET,
};
use living_novel::StoryTime;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn small_bundle() -> ExtractionBundle {
    ExtractionBundle::load(&fixture("small.bundle.json")).expect("small fixture loads")
}

pub fn small_graph() -> DiegeticGraph {
    build_graph(&small_bundle()).expect("small fixture builds")
}

pub fn nautilus_profiles() -> Vec<CharacterProfile> {
    let text = std::fs::read_to_string(fixture("nautilus.profiles.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// The fixture novel run through the rule-based extractor.
pub fn nautilus_bundle() -> ExtractionBundle {
    let text = std::fs::read_to_string(fixture("nautilus.txt")).unwrap();
    ingest_novel(&text, DEFAULT_CHAPTER_PATTERN, DEFAULT_SPAN_BUDGET, &nautilus_profiles(), &RuleBasedExtractor)
        .expect("fixture novel ingests")
        .bundle
}

pub fn nautilus_graph() -> DiegeticGraph {
    build_graph(&nautilus_bundle()).expect("fixture novel builds")
}

/// The small fixture with two extra events so that every ordinal has one.
pub fn three_event_bundle() -> ExtractionBundle {
    let mut b = small_bundle();
    b.events.push(EventRecord {
        title: "The Reef Moves".into(),
        summary: "A long shape glows under the waves and strikes the frigate.".into(),
        participants: vec!["Professor Aronnax".into(), "Ned Land".into()],
        story_time: 0,
        span_id: "s0".into(),
    });
    b.events.push(EventRecord {
        title: "The Natives Attack".into(),
        summary: "Islanders throw spears at the stranded hull until an electric charge drives them off.".into(),
        participants: vec!["Captain Nemo".into(), "Ned Land".into()],
        story_time: 1,
        span_id: "s1".into(),
    });
    b
}

const NAMES: &[&str] = &[
    "Anna", "Boris", "Clara", "Dmitri", "Elena", "Fyodor", "Greta", "Hugo", "Irina", "Jonas",
    "Katya", "Lev", "Marta", "Nikolai",
];
const PLACES: &[&str] = &["Harbor", "Tower", "Forest", "Station", "Mill", "Bridge", "Chapel"];
const WORDS: &[&str] = &[
    "storm", "letter", "secret", "ship", "promise", "duel", "winter", "wedding", "fire", "debt",
    "garden", "journey", "knife", "lamp", "oath", "river", "silver", "train", "voice", "wolf",
];
const VERBS: &[&str] = &[
    "betrays", "rescues", "meets", "warns", "trusts", "fears", "follows", "marries", "visits",
    "hunts", "helps", "distrusts",
];

fn phrase(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// A valid bundle with `1..=max_t` timeline points and random records.
///
/// Entities reuse names across story times so deduplication and facets get
/// exercised; relations, events and background facts are anchored uniformly.
pub fn random_bundle(seed: u64, max_t: u32) -> ExtractionBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = rng.random_range(1..=max_t);
    let timeline: Vec<StoryTime> = (0..t_len).map(|o| StoryTime::new(o, format!("Part {o}"))).collect();
    let spans: Vec<Span> = (0..t_len)
        .map(|o| Span {
            span_id: format!("s{o}"),
            chapter_index: o,
            text: format!("chapter {o}"),
            char_range: (o as usize * 100, o as usize * 100 + 50),
        })
        .collect();

    let n_chars = rng.random_range(2..=6);
    let chars: Vec<&str> = NAMES.choose_multiple(&mut rng, n_chars).copied().collect();
    let profiles = chars.iter().map(|c| CharacterProfile::new(*c)).collect();

    let mut entities = Vec::new();
    let mut entity_names = BTreeSet::new();
    let n_entities = rng.random_range(2..=14);
    for i in 0..n_entities {
        let (name, kind) = if i < chars.len() || rng.random_bool(0.6) {
            (chars[i % chars.len()].to_string(), EntityKind::Character)
        } else {
            (PLACES.choose(&mut rng).unwrap().to_string(), EntityKind::Location)
        };
        let t = rng.random_range(0..t_len);
        let words = rng.random_range(1..=5);
        entities.push(EntityRecord {
            name: name.clone(),
            kind,
            description: phrase(&mut rng, words),
            span_id: format!("s{t}"),
            story_time: t,
        });
        entity_names.insert(name);
    }
    let names: Vec<String> = entity_names.into_iter().collect();

    let mut relations = Vec::new();
    if names.len() >= 2 {
        for _ in 0..rng.random_range(0..=12) {
            let pair: Vec<&String> = names.choose_multiple(&mut rng, 2).collect();
            let t = rng.random_range(0..t_len);
            let words = rng.random_range(0..=3);
            relations.push(RelationRecord {
                subject: pair[0].clone(),
                object: pair[1].clone(),
                description: format!("{} {}", VERBS.choose(&mut rng).unwrap(), phrase(&mut rng, words)).trim().to_string(),
                span_id: format!("s{t}"),
                story_time: t,
                extra_arguments: Vec::new(),
            });
        }
    }

    let mut events = Vec::new();
    for i in 0..rng.random_range(0..=6) {
        let t = rng.random_range(0..t_len);
        let k = rng.random_range(0..=names.len().min(3));
        events.push(EventRecord {
            title: format!("The {} {i}", capitalize(WORDS.choose(&mut rng).unwrap())),
            summary: phrase(&mut rng, 6),
            participants: names.choose_multiple(&mut rng, k).cloned().collect(),
            story_time: t,
            span_id: format!("s{t}"),
        });
    }

    let mut background = Vec::new();
    for i in 0..rng.random_range(0..=3) {
        let anchored = rng.random_bool(0.3);
        background.push(BackgroundRecord {
            topic: format!("World {i}"),
            description: phrase(&mut rng, 4),
            story_time: anchored.then(|| rng.random_range(0..t_len)),
            span_id: None,
        });
    }

    ExtractionBundle { spans, profiles, entities, relations, events, background, timeline }
}

pub fn random_graph(seed: u64, max_t: u32) -> DiegeticGraph {
    build_graph(&random_bundle(seed, max_t)).expect("random bundles are valid")
}

/// A query built from words that occur in the random vocabulary.
pub fn random_query(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut parts = vec![NAMES.choose(&mut rng).unwrap().to_string()];
    parts.push(VERBS.choose(&mut rng).unwrap().to_string());
    let words = rng.random_range(0..=3);
    parts.push(phrase(&mut rng, words));
    if rng.random_bool(0.5) {
        parts.push(NAMES.choose(&mut rng).unwrap().to_string());
    }
    parts.join(" ").trim().to_string()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}
