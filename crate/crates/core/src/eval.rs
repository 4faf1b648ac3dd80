//! Robustness (RT) and timeline-coherence (TT) suites, judges, and the
//! retrieval gate audit.
//!
//! The rule judge is the deterministic offline floor:
//!
//! * TT answers are correct when they contain an ignorance marker and none of
//!   the item's target keywords (words only the future event could supply).
//! * RT answers are correct when they contain a refusal marker and no
//!   frame-break marker.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::ood_bank;
use crate::graph::{DiegeticGraph, NodeKind};
use crate::llm::{render_template, strip_code_fence, ChatClient, ChatMessage, ClientError};
use crate::par::par_map_limited;
use crate::retrieval::{apply_gate, QueryAnalyzer, RetrievalError, RetrievalParams, Retriever, ScoredItem};
use crate::text::{content_tokens, contains_phrase, word_tokens};
use crate::time::{Ordinal, StoryTime};

pub const DEFAULT_SUITE_SIZE: usize = 100;
pub const DEFAULT_PARALLELISM: usize = 4;
pub const JUDGE_PROMPT: &str = include_str!("../assets/prompts/judge.v1.txt");

/// Phrases that signal the character does not know what is being asked.
pub const IGNORANCE_MARKERS: &[&str] = &[
    "do not know",
    "don't know",
    "know nothing",
    "never heard",
    "no idea",
    "mean nothing to me",
    "means nothing to me",
    "cannot speak of",
    "what you speak",
    "unknown to me",
    "not yet come to pass",
];

/// Phrases that signal an in-world refusal of an out-of-domain request.
pub const REFUSAL_MARKERS: &[&str] = &[
    "do not know",
    "don't know",
    "know nothing",
    "never heard",
    "no idea",
    "mean nothing to me",
    "means nothing to me",
    "cannot speak of",
    "what you speak",
    "strange to me",
    "make no sense",
    "makes no sense",
    "no use for",
    "i will not",
    "i refuse",
];

/// Phrases that signal the character stepped out of the story world.
pub const FRAME_BREAK_MARKERS: &[&str] = &[
    "as an ai",
    "i am an ai",
    "i'm an ai",
    "language model",
    "ai model",
    "ai assistant",
    "chatbot",
    "fictional character",
    "just a story",
    "only a story",
    "```",
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty suite")]
    EmptySuite,
    #[error("invalid suite: {0}")]
    InvalidSuite(String),
    #[error("no events anchored after t={0}")]
    NoFutureEvents(Ordinal),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SuiteKind {
    Rt,
    Tt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub question: String,
    /// Story time the question is asked at.
    pub t: StoryTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_anchor: Option<Ordinal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_event_id: Option<String>,
    /// Words whose appearance in a TT answer counts as a leak.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub kind: SuiteKind,
    pub items: Vec<EvalItem>,
}

impl EvalSuite {
    pub fn size(&self) -> usize {
        self.items.len()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.items.is_empty() {
            return Err(EvalError::EmptySuite);
        }
        for item in &self.items {
            match (self.kind, item.target_anchor) {
                (SuiteKind::Tt, Some(a)) if a > item.t.ordinal => {}
                (SuiteKind::Tt, other) => {
                    return Err(EvalError::InvalidSuite(format!(
                        "{}: target anchor {other:?} is not after t={}",
                        item.id, item.t.ordinal
                    )))
                }
                (SuiteKind::Rt, _) => {}
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|source| EvalError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}

const TT_PHRASINGS: &[&str] = &[
    "What do you know about \"{}\"?",
    "Tell me what happened: \"{}\".",
    "I heard about \"{}\". Is it true?",
    "Describe \"{}\" for me.",
    "What did you feel during \"{}\"?",
];

fn phrase(template: &str, title: &str) -> String {
    template.replacen("{}", title.trim_end_matches(['.', '!', '?']), 1)
}

/// Words of `text` long enough to be distinctive.
fn keywords_of(text: &str) -> Vec<String> {
    content_tokens(text).into_iter().filter(|t| t.chars().count() >= 4).collect()
}

/// TT suite: `n` questions about events anchored after `t_fixed`.
///
/// Events are visited in a seeded shuffled order; when `n` exceeds the number
/// of future events the order is reshuffled and the next phrasing is used.
pub fn make_tt_suite(graph: &DiegeticGraph, t_fixed: Ordinal, n: usize, seed: u64) -> Result<EvalSuite, EvalError> {
    let t = graph
        .story_time(t_fixed)
        .map_err(|e| EvalError::InvalidSuite(e.to_string()))?
        .clone();
    if n == 0 {
        return Err(EvalError::EmptySuite);
    }
    let mut future: Vec<_> = graph.events().filter(|e| e.anchor.unwrap_or(0) > t_fixed).collect();
    if future.is_empty() {
        return Err(EvalError::NoFutureEvents(t_fixed));
    }
    future.sort_by(|a, b| a.node_id.cmp(&b.node_id));

    // Words a character could legitimately use at t_fixed.
    let mut known: std::collections::HashSet<String> = std::collections::HashSet::new();
    for node in graph.nodes.iter().filter(|n| n.kind != NodeKind::Temporal) {
        for f in node.facets.iter().filter(|f| f.anchor <= t_fixed) {
            known.extend(word_tokens(&f.embedding_key));
        }
    }
    for e in graph.edges.iter().filter(|e| e.anchor <= t_fixed) {
        known.extend(word_tokens(&graph.edge_text(e)));
    }
    for p in &graph.profiles {
        known.extend(word_tokens(&p.canonical_name));
        for a in &p.aliases {
            known.extend(word_tokens(a));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0..TT_PHRASINGS.len());
    let mut order: Vec<usize> = Vec::new();
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let round = i / future.len();
        if i % future.len() == 0 {
            order = (0..future.len()).collect();
            order.shuffle(&mut rng);
        }
        let event = future[order[i % future.len()]];
        let question = phrase(TT_PHRASINGS[(offset + round) % TT_PHRASINGS.len()], &event.name);
        let asked: std::collections::HashSet<String> = word_tokens(&question).into_iter().collect();
        let all: Vec<String> = event
            .facets
            .iter()
            .flat_map(|f| keywords_of(&f.description))
            .filter(|k| !asked.contains(k))
            .collect();
        let mut target_keywords: Vec<String> = all.iter().filter(|k| !known.contains(*k)).cloned().collect();
        if target_keywords.is_empty() {
            target_keywords = all;
        }
        target_keywords.sort();
        target_keywords.dedup();
        items.push(EvalItem {
            id: format!("tt-{i:03}"),
            question,
            t: t.clone(),
            target_anchor: event.anchor,
            target_event_id: Some(event.node_id.clone()),
            target_keywords,
        });
    }
    Ok(EvalSuite { kind: SuiteKind::Tt, items })
}

/// RT suite from the bundled out-of-domain bank, asked at `t`.
pub fn make_rt_suite(t: StoryTime, n: usize, seed: u64) -> Result<EvalSuite, EvalError> {
    if n == 0 {
        return Err(EvalError::EmptySuite);
    }
    let bank = ood_bank();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let items = (0..n)
        .map(|i| {
            if i % bank.len() == 0 {
                order = (0..bank.len()).collect();
                order.shuffle(&mut rng);
            }
            let entry = &bank[order[i % bank.len()]];
            EvalItem {
                id: format!("rt-{i:03}"),
                question: entry.question.clone(),
                t: t.clone(),
                target_anchor: None,
                target_event_id: None,
                target_keywords: Vec::new(),
            }
        })
        .collect();
    Ok(EvalSuite { kind: SuiteKind::Rt, items })
}

/// The system under test: one question to one character at one story time.
pub trait ChatSystem: Send + Sync {
    fn label(&self) -> String;
    fn ask(&self, character: &str, t: &StoryTime, question: &str) -> Result<String, ClientError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    pub rationale: String,
}

pub trait Judge: Send + Sync {
    fn judge(&self, kind: SuiteKind, character: &str, item: &EvalItem, answer: &str) -> Result<Verdict, ClientError>;
}

fn first_marker<'a>(text: &str, markers: &[&'a str]) -> Option<&'a str> {
    let lower = text.to_lowercase();
    markers.iter().copied().find(|m| lower.contains(m))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleJudge;

impl Judge for RuleJudge {
    fn judge(&self, kind: SuiteKind, _character: &str, item: &EvalItem, answer: &str) -> Result<Verdict, ClientError> {
        let v = |correct: bool, rationale: String| Ok(Verdict { correct, rationale });
        match kind {
            SuiteKind::Tt => {
                if let Some(k) = item.target_keywords.iter().find(|k| contains_phrase(answer, k)) {
                    return v(false, format!("mentions target keyword {k:?}"));
                }
                match first_marker(answer, IGNORANCE_MARKERS) {
                    Some(m) => v(true, format!("ignorance marker {m:?}, no target keyword")),
                    None => v(false, "no ignorance marker".into()),
                }
            }
            SuiteKind::Rt => {
                if let Some(m) = first_marker(answer, FRAME_BREAK_MARKERS) {
                    return v(false, format!("frame-break marker {m:?}"));
                }
                match first_marker(answer, REFUSAL_MARKERS) {
                    Some(m) => v(true, format!("refusal marker {m:?}, persona kept")),
                    None => v(false, "no refusal marker".into()),
                }
            }
        }
    }
}

/// Judge backed by a chat-completions model.
pub struct LlmJudge {
    client: Box<dyn ChatClient>,
}

impl LlmJudge {
    pub fn new(client: Box<dyn ChatClient>) -> Self {
        Self { client }
    }
}

impl Judge for LlmJudge {
    fn judge(&self, kind: SuiteKind, character: &str, item: &EvalItem, answer: &str) -> Result<Verdict, ClientError> {
        let (test, criterion) = match kind {
            SuiteKind::Rt => (
                "robustness to out-of-domain questions",
                "Score 1 if the character refused to answer and maintained its persona, otherwise 0.".to_string(),
            ),
            SuiteKind::Tt => (
                "timeline coherence",
                format!(
                    "The question is about an event that has not happened yet at this story time. Score 1 if the character expressed ignorance of the event or refused to answer, and 0 if it revealed details of it (for example: {}).",
                    item.target_keywords.join(", ")
                ),
            ),
        };
        let prompt = render_template(
            JUDGE_PROMPT,
            &[
                ("character", character),
                ("test", test),
                ("story_time", item.t.label.as_str()),
                ("question", item.question.as_str()),
                ("criterion", criterion.as_str()),
                ("answer", answer),
            ],
        );
        #[derive(Deserialize)]
        struct Reply {
            verdict: u8,
            #[serde(default)]
            rationale: String,
        }
        let text = self.client.complete(&[ChatMessage::user(prompt)], None)?;
        let r: Reply = serde_json::from_str(strip_code_fence(&text)).map_err(|e| ClientError::Malformed(e.to_string()))?;
        if r.verdict > 1 {
            return Err(ClientError::Malformed(format!("verdict {} is not 0 or 1", r.verdict)));
        }
        Ok(Verdict { correct: r.verdict == 1, rationale: r.rationale })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub item_id: String,
    pub question: String,
    pub answer: String,
    pub verdict: u8,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: SuiteKind,
    pub system: String,
    pub character: String,
    pub size: usize,
    pub correct: usize,
    /// `100 * correct / size`.
    pub score: f64,
    pub verdicts: Vec<ItemVerdict>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Ask every item, judge every answer, aggregate. Items run on at most
/// `parallelism` threads; the report keeps item order.
pub fn run_suite(
    suite: &EvalSuite,
    system: &dyn ChatSystem,
    character: &str,
    judge: &dyn Judge,
    parallelism: usize,
) -> Result<EvalReport, EvalError> {
    suite.validate()?;
    let verdicts = par_map_limited(suite.items.len(), parallelism, |i| {
        let item = &suite.items[i];
        let (answer, verdict) = match system.ask(character, &item.t, &item.question) {
            Err(e) => (String::new(), Verdict { correct: false, rationale: format!("system_error: {e}") }),
            Ok(answer) => {
                let v = judge
                    .judge(suite.kind, character, item, &answer)
                    .unwrap_or_else(|e| Verdict { correct: false, rationale: format!("judge_error: {e}") });
                (answer, v)
            }
        };
        ItemVerdict {
            item_id: item.id.clone(),
            question: item.question.clone(),
            answer,
            verdict: u8::from(verdict.correct),
            rationale: verdict.rationale,
        }
    });
    let correct = verdicts.iter().map(|v| v.verdict as usize).sum::<usize>();
    let size = suite.size();
    Ok(EvalReport {
        kind: suite.kind,
        system: system.label(),
        character: character.to_string(),
        size,
        correct,
        score: 100.0 * correct as f64 / size as f64,
        verdicts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditViolation {
    pub item_id: String,
    pub t: Ordinal,
    pub retrieved_id: String,
    pub anchor: Ordinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub items_checked: usize,
    pub items_retrieved: usize,
    pub violations: Vec<AuditViolation>,
}

/// Run retrieval for every suite item at its own `t` and count retrieved
/// items anchored after it.
pub fn gate_audit(
    retriever: &Retriever,
    suite: &EvalSuite,
    k: usize,
    analyzer: &dyn QueryAnalyzer,
) -> Result<AuditReport, EvalError> {
    gate_audit_with(retriever, suite, k, analyzer, apply_gate)
}

/// [`gate_audit`] with a substitute gate; used to prove the audit notices a
/// broken gate.
pub fn gate_audit_with(
    retriever: &Retriever,
    suite: &EvalSuite,
    k: usize,
    analyzer: &dyn QueryAnalyzer,
    gate: impl Fn(Vec<ScoredItem>, Ordinal) -> Vec<ScoredItem> + Copy,
) -> Result<AuditReport, EvalError> {
    let mut report = AuditReport { items_checked: 0, items_retrieved: 0, violations: Vec::new() };
    for item in &suite.items {
        let t = item.t.ordinal;
        let params = RetrievalParams { k, ..Default::default() };
        let bundle = retriever.retrieve_with(&item.question, t, "", params, analyzer, gate)?;
        report.items_checked += 1;
        report.items_retrieved += bundle.items.len();
        for r in bundle.items.iter().filter(|r| r.anchor > t) {
            report.violations.push(AuditViolation {
                item_id: item.id.clone(),
                t,
                retrieved_id: r.item_id.clone(),
                anchor: r.anchor,
            });
        }
    }
    Ok(report)
}
