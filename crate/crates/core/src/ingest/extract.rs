//! Extraction passes over spans.
//!
//! Every span goes through three passes (entities, relations, events and
//! background). An [`ExtractorClient`] answers each pass with a JSON payload;
//! [`run_extractor`] parses, retries and merges the answers in span order.

use std::collections::{BTreeSet, HashSet};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    alias_map, BackgroundRecord, CharacterProfile, EntityKind, EntityRecord, EventRecord,
    ExtractionBundle, RelationRecord, Rule, Span, ValidationReport,
};
use crate::llm::{render_template, strip_code_fence, ChatClient, ChatMessage, ClientError};
use crate::text::{is_stopword, sentences};
use crate::time::StoryTime;

pub const ENTITY_PROMPT: &str = include_str!("../../assets/prompts/extract_entities.v1.txt");
pub const RELATION_PROMPT: &str = include_str!("../../assets/prompts/extract_relations.v1.txt");
pub const EVENT_PROMPT: &str = include_str!("../../assets/prompts/extract_events.v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Entities,
    Relations,
    EventsBackground,
}

impl Pass {
    pub const ALL: [Pass; 3] = [Pass::Entities, Pass::Relations, Pass::EventsBackground];

    fn name(self) -> &'static str {
        match self {
            Pass::Entities => "entities",
            Pass::Relations => "relations",
            Pass::EventsBackground => "events",
        }
    }
}

pub struct ExtractionContext<'a> {
    pub profiles: &'a [CharacterProfile],
    pub story_time: &'a StoryTime,
    /// Entity names found by the entity pass over the same span.
    pub known_entities: &'a [String],
}

pub trait ExtractorClient: Send + Sync {
    /// Answer one pass over one span with a JSON payload.
    fn extract(&self, pass: Pass, span: &Span, ctx: &ExtractionContext<'_>) -> Result<String, ClientError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionRun {
    pub bundle: ExtractionBundle,
    /// Remote failures land in `errors`; unparseable or dropped records in `warnings`.
    pub report: ValidationReport,
}

#[derive(Deserialize)]
struct RawEntity {
    name: String,
    kind: EntityKind,
    #[serde(default)]
    description: String,
}

#[derive(Deserialize)]
struct RawRelation {
    subject: String,
    object: String,
    #[serde(default)]
    description: String,
}

#[derive(Deserialize)]
struct RawEvent {
    title: String,
    #[serde(default)]
    summary: String,
    #[serde(default)]
    participants: Vec<String>,
}

#[derive(Deserialize)]
struct RawBackground {
    topic: String,
    description: String,
}

/// Run all passes over `spans` in order. A span's story time is the timeline
/// entry whose ordinal equals its chapter index.
///
/// Seed `profiles` are copied into the bundle; every extracted character that
/// is neither a seed nor a seed alias gets a minimal profile.
pub fn run_extractor(
    spans: &[Span],
    timeline: &[StoryTime],
    profiles: &[CharacterProfile],
    extractor: &dyn ExtractorClient,
) -> ExtractionRun {
    let mut bundle = ExtractionBundle {
        spans: spans.to_vec(),
        profiles: profiles.to_vec(),
        timeline: timeline.to_vec(),
        ..Default::default()
    };
    let mut report = ValidationReport::default();

    for span in spans {
        let story_time = timeline
            .iter()
            .find(|t| t.ordinal == span.chapter_index)
            .cloned()
            .unwrap_or_else(|| StoryTime::new(span.chapter_index, format!("Chapter {}", span.chapter_index + 1)));
        let mut known: Vec<String> = Vec::new();
        for pass in Pass::ALL {
            let ctx = ExtractionContext { profiles, story_time: &story_time, known_entities: &known };
            let Some(payload) = call_with_retry(extractor, pass, span, &ctx, &mut report) else {
                continue;
            };
            let locator = |i: usize| format!("span {} {} pass item {i}", span.span_id, pass.name());
            let t = story_time.ordinal;
            match pass {
                Pass::Entities => {
                    for (i, raw) in records::<RawEntity>(&payload, "entities", &mut report, &locator) {
                        if raw.name.trim().is_empty() {
                            report.warn(locator(i), Rule::RecordDropped, "empty entity name");
                            continue;
                        }
                        known.push(raw.name.clone());
                        bundle.entities.push(EntityRecord {
                            name: raw.name,
                            kind: raw.kind,
                            description: raw.description,
                            span_id: span.span_id.clone(),
                            story_time: t,
                        });
                    }
                }
                Pass::Relations => {
                    for (_, raw) in records::<RawRelation>(&payload, "relations", &mut report, &locator) {
                        bundle.relations.push(RelationRecord {
                            subject: raw.subject,
                            object: raw.object,
                            description: raw.description,
                            span_id: span.span_id.clone(),
                            story_time: t,
                            extra_arguments: Vec::new(),
                        });
                    }
                }
                Pass::EventsBackground => {
                    for (_, raw) in records::<RawEvent>(&payload, "events", &mut report, &locator) {
                        bundle.events.push(EventRecord {
                            title: raw.title,
                            summary: raw.summary,
                            participants: raw.participants,
                            story_time: t,
                            span_id: span.span_id.clone(),
                        });
                    }
                    for (_, raw) in records::<RawBackground>(&payload, "background", &mut report, &locator) {
                        bundle.background.push(BackgroundRecord {
                            topic: raw.topic,
                            description: raw.description,
                            story_time: Some(t),
                            span_id: Some(span.span_id.clone()),
                        });
                    }
                }
            }
        }
    }

    let claimed = alias_map(&bundle);
    let mut added = HashSet::new();
    for e in &bundle.entities {
        if e.kind == EntityKind::Character
            && !claimed.contains_key(&e.name.trim().to_lowercase())
            && added.insert(e.name.clone())
        {
            bundle.profiles.push(CharacterProfile::new(e.name.clone()));
        }
    }
    ExtractionRun { bundle, report }
}

fn call_with_retry(
    extractor: &dyn ExtractorClient,
    pass: Pass,
    span: &Span,
    ctx: &ExtractionContext<'_>,
    report: &mut ValidationReport,
) -> Option<Value> {
    let locator = format!("span {} {} pass", span.span_id, pass.name());
    let mut last_failure = None;
    let mut last_unparseable = None;
    for _ in 0..2 {
        match extractor.extract(pass, span, ctx) {
            Err(e) => last_failure = Some(e.to_string()),
            Ok(text) => match parse_payload(&text, pass) {
                Some(v) => return Some(v),
                None => {
                    last_failure = None;
                    last_unparseable = Some(text);
                }
            },
        }
    }
    if let Some(e) = last_failure {
        report.error(locator, Rule::ExtractorFailure, format!("extractor failed twice: {e}"));
    } else if let Some(text) = last_unparseable {
        let preview: String = text.chars().take(80).collect();
        report.warn(locator, Rule::UnparseableResponse, format!("unparseable response after retry: {preview:?}"));
    }
    None
}

fn parse_payload(text: &str, pass: Pass) -> Option<Value> {
    let v: Value = serde_json::from_str(strip_code_fence(text)).ok()?;
    let obj = v.as_object()?;
    let key = match pass {
        Pass::Entities => "entities",
        Pass::Relations => "relations",
        Pass::EventsBackground => "events",
    };
    obj.get(key)?.as_array()?;
    Some(v)
}

fn records<T: for<'de> Deserialize<'de>>(
    payload: &Value,
    key: &str,
    report: &mut ValidationReport,
    locator: &dyn Fn(usize) -> String,
) -> Vec<(usize, T)> {
    let Some(items) = payload.get(key).and_then(Value::as_array) else {
        return Vec::new();
    };
    items
        .iter()
        .enumerate()
        .filter_map(|(i, item)| match serde_json::from_value::<T>(item.clone()) {
            Ok(r) => Some((i, r)),
            Err(e) => {
                report.warn(locator(i), Rule::RecordDropped, format!("{key} record violates schema: {e}"));
                None
            }
        })
        .collect()
}

/// Offline extractor: capitalized-name heuristics plus matching of seeded
/// profile names and aliases.
///
/// * Known names (canonical or alias, longest first) are characters and are
///   reported under the canonical name.
/// * Other runs of capitalized words are characters when led by a title
///   (Captain, Professor, ...), locations after a place preposition, objects
///   after a determiner, and characters otherwise. A lone capitalized word
///   opening a sentence is ignored.
/// * Each sentence relates consecutive distinct mentions pairwise.
/// * A paragraph mentioning a character is an event; one mentioning only
///   places or objects is a background fact.
#[derive(Debug, Clone, Default)]
pub struct RuleBasedExtractor;

const TITLES: &[&str] = &[
    "captain", "commander", "doctor", "dr", "lady", "lord", "madame", "master", "miss", "mister",
    "monsieur", "mr", "mrs", "professor", "sir",
];
const PLACE_PREPOSITIONS: &[&str] = &[
    "across", "around", "at", "beyond", "from", "in", "into", "left", "near", "of", "off", "past",
    "reached", "through", "to", "toward", "towards", "visited",
];
const PLACE_WORDS: &[&str] = &[
    "bay", "cape", "city", "coast", "island", "islands", "isle", "mountain", "ocean", "river",
    "sea", "strait", "street", "town",
];
const DETERMINERS: &[&str] = &["a", "an", "her", "his", "its", "our", "the", "their"];

#[derive(Debug, Clone, PartialEq, Eq)]
struct Mention {
    name: String,
    kind: EntityKind,
}

struct Token<'a> {
    text: &'a str,
    start: usize,
    end: usize,
}

fn word_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{L}\p{N}][\p{L}\p{N}'’\-]*").expect("static regex"))
}

impl RuleBasedExtractor {
    fn mentions(sentence: &str, profiles: &[CharacterProfile]) -> Vec<Mention> {
        let tokens: Vec<Token> = word_regex()
            .find_iter(sentence)
            .map(|m| Token { text: m.as_str(), start: m.start(), end: m.end() })
            .collect();
        let lower: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();

        let mut names: Vec<(Vec<String>, &str)> = profiles
            .iter()
            .flat_map(|p| {
                std::iter::once(&p.canonical_name)
                    .chain(p.aliases.iter())
                    .map(move |n| (crate::text::word_tokens(n), p.canonical_name.as_str()))
            })
            .filter(|(toks, _)| !toks.is_empty())
            .collect();
        names.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(b.1)));

        let mut covered = vec![false; tokens.len()];
        let mut found: Vec<(usize, Mention)> = Vec::new();
        for (toks, canonical) in &names {
            let n = toks.len();
            let mut i = 0;
            while i + n <= tokens.len() {
                if !covered[i..i + n].iter().any(|&c| c) && lower[i..i + n] == toks[..] {
                    covered[i..i + n].iter_mut().for_each(|c| *c = true);
                    found.push((i, Mention { name: canonical.to_string(), kind: EntityKind::Character }));
                    i += n;
                } else {
                    i += 1;
                }
            }
        }

        let capitalized = |i: usize| tokens[i].text.chars().next().is_some_and(char::is_uppercase);
        let joined = |a: usize, b: usize| sentence[tokens[a].end..tokens[b].start].trim().is_empty();
        let mut i = 0;
        while i < tokens.len() {
            if covered[i] || !capitalized(i) {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < tokens.len() && !covered[j] && joined(j - 1, j) {
                if capitalized(j) {
                    j += 1;
                } else if lower[j] == "of" && j + 1 < tokens.len() && capitalized(j + 1) && !covered[j + 1] && joined(j, j + 1) {
                    j += 2;
                } else {
                    break;
                }
            }
            let mut start = i;
            while start < j && is_stopword(&lower[start]) {
                start += 1;
            }
            let next = j;
            if start < j && !(start == 0 && j - start == 1) {
                let name = sentence[tokens[start].start..tokens[j - 1].end].to_string();
                let prev = start.checked_sub(1).map(|p| lower[p].as_str());
                let before_det = start.checked_sub(2).map(|p| lower[p].as_str());
                let place_after_det = prev.is_some_and(|p| DETERMINERS.contains(&p))
                    && before_det.is_some_and(|p| PLACE_PREPOSITIONS.contains(&p));
                let kind = if TITLES.contains(&lower[start].as_str()) {
                    EntityKind::Character
                } else if PLACE_WORDS.contains(&lower[j - 1].as_str())
                    || prev.is_some_and(|p| PLACE_PREPOSITIONS.contains(&p))
                    || place_after_det
                {
                    EntityKind::Location
                } else if prev.is_some_and(|p| DETERMINERS.contains(&p)) {
                    EntityKind::Object
                } else {
                    EntityKind::Character
                };
                found.push((start, Mention { name, kind }));
            }
            i = next;
        }
        found.sort_by_key(|(pos, _)| *pos);
        found.into_iter().map(|(_, m)| m).collect()
    }

    fn entities(span: &Span, profiles: &[CharacterProfile]) -> Vec<(Mention, String)> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for sentence in sentences(&span.text) {
            for m in Self::mentions(sentence, profiles) {
                if seen.insert(m.name.clone()) {
                    out.push((m, sentence.to_string()));
                }
            }
        }
        out
    }

    fn relations(span: &Span, profiles: &[CharacterProfile]) -> Vec<Value> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for sentence in sentences(&span.text) {
            let mut names: Vec<String> = Vec::new();
            for m in Self::mentions(sentence, profiles) {
                if !names.contains(&m.name) {
                    names.push(m.name);
                }
            }
            for pair in names.windows(2) {
                if seen.insert((pair[0].clone(), pair[1].clone(), sentence.to_string())) {
                    out.push(json!({"subject": pair[0], "object": pair[1], "description": sentence}));
                }
            }
        }
        out
    }

    fn events(span: &Span, profiles: &[CharacterProfile]) -> (Vec<Value>, Vec<Value>) {
        let mut events = Vec::new();
        let mut background = Vec::new();
        let mut titles = HashSet::new();
        for para in span.text.split("\n\n").map(str::trim).filter(|p| !p.is_empty()) {
            let sents = sentences(para);
            let Some(first) = sents.first() else { continue };
            let mut characters: Vec<String> = Vec::new();
            let mut others: Vec<String> = Vec::new();
            for s in &sents {
                for m in Self::mentions(s, profiles) {
                    let bucket = if m.kind == EntityKind::Character { &mut characters } else { &mut others };
                    if !bucket.contains(&m.name) {
                        bucket.push(m.name);
                    }
                }
            }
            if !characters.is_empty() {
                let title = event_title(first);
                if titles.insert(title.clone()) {
                    let summary = sents.iter().take(2).copied().collect::<Vec<_>>().join(" ");
                    events.push(json!({"title": title, "summary": summary, "participants": characters}));
                }
            } else if let Some(topic) = others.first() {
                background.push(json!({"topic": topic, "description": first}));
            }
        }
        (events, background)
    }
}

fn event_title(sentence: &str) -> String {
    let words: Vec<&str> = sentence.split_whitespace().take(10).collect();
    words.join(" ").trim_end_matches(|c: char| !c.is_alphanumeric()).to_string()
}

impl ExtractorClient for RuleBasedExtractor {
    fn extract(&self, pass: Pass, span: &Span, ctx: &ExtractionContext<'_>) -> Result<String, ClientError> {
        let value = match pass {
            Pass::Entities => {
                let items: Vec<Value> = Self::entities(span, ctx.profiles)
                    .into_iter()
                    .map(|(m, sentence)| json!({"name": m.name, "kind": m.kind, "description": sentence}))
                    .collect();
                json!({ "entities": items })
            }
            Pass::Relations => json!({ "relations": Self::relations(span, ctx.profiles) }),
            Pass::EventsBackground => {
                let (events, background) = Self::events(span, ctx.profiles);
                json!({ "events": events, "background": background })
            }
        };
        Ok(value.to_string())
    }
}

/// Extractor backed by a chat-completions model and the bundled prompt templates.
pub struct LlmExtractor {
    client: Box<dyn ChatClient>,
}

impl LlmExtractor {
    pub fn new(client: Box<dyn ChatClient>) -> Self {
        Self { client }
    }

    pub fn render(pass: Pass, span: &Span, ctx: &ExtractionContext<'_>) -> String {
        let template = match pass {
            Pass::Entities => ENTITY_PROMPT,
            Pass::Relations => RELATION_PROMPT,
            Pass::EventsBackground => EVENT_PROMPT,
        };
        let profiles = ctx
            .profiles
            .iter()
            .map(|p| {
                let aliases: Vec<&str> = p.aliases.iter().map(String::as_str).collect();
                format!("- {} ({})", p.canonical_name, aliases.join(", "))
            })
            .collect::<Vec<_>>()
            .join("\n");
        let entities = ctx
            .known_entities
            .iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|e| format!("- {e}"))
            .collect::<Vec<_>>()
            .join("\n");
        render_template(
            template,
            &[
                ("story_time", ctx.story_time.label.as_str()),
                ("profiles", profiles.as_str()),
                ("entities", entities.as_str()),
                ("span", span.text.as_str()),
            ],
        )
    }
}

impl ExtractorClient for LlmExtractor {
    fn extract(&self, pass: Pass, span: &Span, ctx: &ExtractionContext<'_>) -> Result<String, ClientError> {
        let messages = [
            ChatMessage::system("You extract structured facts from novels. Reply with JSON only."),
            ChatMessage::user(Self::render(pass, span, ctx)),
        ];
        self.client.complete(&messages, None)
    }
}
