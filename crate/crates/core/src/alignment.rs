//! Synthetic preference data: persona pairs and the three context-reasoning
//! datasets (general QA, temporal-adversarial, out-of-domain).
//!
//! Every generator is seeded per tuple (`seed + index`), so the output does
//! not depend on how the work is split across threads.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DiegeticGraph, GraphNode};
use crate::ingest::{CharacterProfile, EntityKind};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::llm::{render_template, strip_code_fence, ChatClient, ChatMessage, ClientError};
use crate::retrieval::{ContextBundle, QueryAnalyzer, RetrievalError, RetrievalParams, Retriever, DEFAULT_POOL};
use crate::par::par_map;
use crate::text::capitalize;
use crate::time::{Ordinal, StoryTime};

/// Stage-1 tuples generated per character when no size is given.
pub const DEFAULT_PERSONA_TUPLES: usize = 512;

pub const USER_PROMPT_TEMPLATE: &str = include_str!("../assets/prompts/teacher_user_prompt.v1.txt");
pub const PERSONA_PAIR_TEMPLATE: &str = include_str!("../assets/prompts/teacher_persona_pair.v1.txt");
pub const CRE_PAIR_TEMPLATE: &str = include_str!("../assets/prompts/teacher_cre_pair.v1.txt");
const OOD_BANK: &str = include_str!("../assets/data/ood_bank.v1.jsonl");

/// Marker every persona-drift negative carries.
pub const DRIFT_MARKER: &str = "As an AI assistant";

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{kind} needs at least {needed} eligible event(s) but the graph has {found}{detail}")]
    InsufficientEvents { kind: DatasetKind, needed: usize, found: usize, detail: String },
    #[error("graph has no character profiles")]
    NoProfiles,
    #[error("teacher failed: {0}")]
    Teacher(#[from] ClientError),
    #[error("tuple dropped: {0}")]
    Dropped(String),
    #[error("invalid tuple: {0}")]
    InvalidTuple(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

macro_rules! closed_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

closed_enum!(Tone {
    Calm => "calm",
    Tense => "tense",
    Sarcastic => "sarcastic",
    Angry => "angry",
    Curious => "curious",
    Hostile => "hostile",
});

closed_enum!(Intent {
    RequestInformation => "request_information",
    Challenge => "challenge",
    Negotiate => "negotiate",
    SmallTalk => "small_talk",
});

closed_enum!(DatasetKind {
    Persona => "persona",
    GeneralQa => "general_qa",
    TemporalAdversarial => "temporal_adversarial",
    OutOfDomain => "out_of_domain",
});

closed_enum!(NegFlaw {
    PersonaDrift => "persona_drift",
    FrameBreak => "frame_break",
    WrongEvent => "wrong_event",
    SpoilerLeak => "spoiler_leak",
    OocAnswer => "ooc_answer",
});

impl NegFlaw {
    /// Flaws a negative of the given dataset kind may carry.
    pub fn allowed(kind: DatasetKind) -> &'static [NegFlaw] {
        match kind {
            DatasetKind::Persona => &[NegFlaw::PersonaDrift, NegFlaw::FrameBreak],
            DatasetKind::GeneralQa => &[NegFlaw::WrongEvent],
            DatasetKind::TemporalAdversarial => &[NegFlaw::SpoilerLeak],
            DatasetKind::OutOfDomain => &[NegFlaw::OocAnswer],
        }
    }

    /// Persona negatives alternate drift and frame-break by seed parity.
    pub fn for_persona_seed(seed: u64) -> NegFlaw {
        if seed % 2 == 0 {
            NegFlaw::PersonaDrift
        } else {
            NegFlaw::FrameBreak
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub character: String,
    pub t: StoryTime,
    pub tone: Tone,
    pub intent: Intent,
    pub seed: u64,
    pub text: String,
}

/// A context-reasoning question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreQuestion {
    pub character: String,
    pub t: StoryTime,
    pub text: String,
    pub seed: u64,
    /// Event the question is about (general QA, temporal-adversarial).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_anchor: Option<Ordinal>,
    /// The other real event the general-QA negative is grounded in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor_event_id: Option<String>,
    /// Out-of-domain bank item id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TuplePrompt {
    Persona(PromptSpec),
    Question(CreQuestion),
}

impl TuplePrompt {
    pub fn text(&self) -> &str {
        match self {
            TuplePrompt::Persona(p) => &p.text,
            TuplePrompt::Question(q) => &q.text,
        }
    }
    pub fn character(&self) -> &str {
        match self {
            TuplePrompt::Persona(p) => &p.character,
            TuplePrompt::Question(q) => &q.character,
        }
    }
    pub fn t(&self) -> &StoryTime {
        match self {
            TuplePrompt::Persona(p) => &p.t,
            TuplePrompt::Question(q) => &q.t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub prompt: TuplePrompt,
    pub o_pos: String,
    pub o_neg: String,
    pub dataset_kind: DatasetKind,
    #[serde(default)]
    pub context: Option<ContextBundle>,
    pub neg_flaw: NegFlaw,
}

impl PreferenceTuple {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        let bad = |m: String| Err(AlignmentError::InvalidTuple(m));
        if self.o_pos == self.o_neg {
            return bad("o_pos equals o_neg".into());
        }
        if !NegFlaw::allowed(self.dataset_kind).contains(&self.neg_flaw) {
            return bad(format!("{} tuple cannot carry flaw {}", self.dataset_kind, self.neg_flaw));
        }
        let t = self.prompt.t().ordinal;
        match (&self.prompt, self.dataset_kind) {
            (TuplePrompt::Persona(_), DatasetKind::Persona) => {}
            (TuplePrompt::Question(q), DatasetKind::TemporalAdversarial) => match q.target_anchor {
                Some(a) if a > t => {}
                other => return bad(format!("temporal-adversarial target anchor {other:?} is not after t={t}")),
            },
            (TuplePrompt::Question(_), k) if k != DatasetKind::Persona => {}
            (_, k) => return bad(format!("prompt variant does not match dataset kind {k}")),
        }
        if let Some(ctx) = &self.context {
            if let Some(item) = ctx.items.iter().find(|i| i.anchor > t) {
                return bad(format!("context item {} anchored at {} after t={t}", item.item_id, item.anchor));
            }
        }
        Ok(())
    }
}

/// Out-of-domain question bank entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OodItem {
    pub id: String,
    pub category: String,
    pub question: String,
    pub answer: String,
}

pub fn ood_bank() -> &'static [OodItem] {
    static BANK: OnceLock<Vec<OodItem>> = OnceLock::new();
    BANK.get_or_init(|| crate::jsonl::parse_jsonl(OOD_BANK.as_bytes()).expect("bundled question bank parses"))
}

/// Event facts handed to a teacher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFact {
    pub node_id: String,
    pub title: String,
    pub summary: String,
    pub anchor: Ordinal,
    pub participants: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct CreFacts<'a> {
    pub target: Option<&'a EventFact>,
    pub distractor: Option<&'a EventFact>,
    pub reference_answer: Option<&'a str>,
}

pub trait Teacher: Send + Sync {
    fn user_prompt(
        &self,
        profile: &CharacterProfile,
        t: &StoryTime,
        tone: Tone,
        intent: Intent,
        seed: u64,
    ) -> Result<String, ClientError>;

    /// `(o_pos, o_neg)` for a persona prompt, the negative showing `flaw`.
    fn persona_pair(
        &self,
        prompt: &PromptSpec,
        profile: &CharacterProfile,
        flaw: NegFlaw,
    ) -> Result<(String, String), ClientError>;

    fn cre_pair(
        &self,
        kind: DatasetKind,
        question: &CreQuestion,
        profile: &CharacterProfile,
        facts: &CreFacts<'_>,
    ) -> Result<(String, String), ClientError>;
}

fn lower_first(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn pick<'a>(items: &'a [String], seed: u64) -> Option<&'a String> {
    (!items.is_empty()).then(|| &items[(seed % items.len() as u64) as usize])
}

/// What the character cares about at `t`, safe to mention at that time.
fn topic(profile: &CharacterProfile, t: Ordinal, seed: u64) -> String {
    let raw = profile
        .drive_at(t)
        .map(|d| d.description.clone())
        .or_else(|| pick(&profile.core_attributes, seed).cloned())
        .or_else(|| (!profile.origin.is_empty()).then(|| profile.origin.clone()))
        .unwrap_or_else(|| "my own affairs".into());
    lower_first(raw.trim_end_matches('.'))
}

const REFUSALS: &[&str] = &[
    "I do not know of what you speak.",
    "I know nothing of this.",
    "Those words mean nothing to me.",
    "I cannot speak of what I have not seen.",
];

/// Ignorance / refusal phrases used by the template teacher; judges look for
/// these.
pub fn refusal_phrases() -> &'static [&'static str] {
    REFUSALS
}

/// Deterministic teacher used for hermetic tests and offline runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateTeacher;

impl TemplateTeacher {
    fn opener(profile: &CharacterProfile, seed: u64) -> String {
        match pick(&profile.core_attributes, seed) {
            Some(a) => format!("{}.", capitalize(a.trim().trim_end_matches('.'))),
            None => format!("{} speaks.", profile.canonical_name),
        }
    }

    fn refusal(profile: &CharacterProfile, t: Ordinal, seed: u64) -> String {
        let line = REFUSALS[(seed % REFUSALS.len() as u64) as usize];
        format!("{line} Ask me instead about {}.", topic(profile, t, seed))
    }
}

impl Teacher for TemplateTeacher {
    fn user_prompt(
        &self,
        profile: &CharacterProfile,
        t: &StoryTime,
        tone: Tone,
        intent: Intent,
        seed: u64,
    ) -> Result<String, ClientError> {
        let name = &profile.canonical_name;
        let topic = topic(profile, t.ordinal, seed);
        let bodies: [String; 3] = match intent {
            Intent::RequestInformation => [
                format!("what can you tell me about {topic}?"),
                format!("how did it come to this, {name}?"),
                format!("what occupies your mind in {}?", t.label),
            ],
            Intent::Challenge => [
                format!("I do not believe a word you say about {topic}."),
                format!("why should anyone trust you, {name}?"),
                format!("all this talk of {topic} sounds like an excuse."),
            ],
            Intent::Negotiate => [
                "what would it take for you to let me go?".to_string(),
                format!("I will help you with {topic} if you help me in return."),
                format!("name your price, {name}."),
            ],
            Intent::SmallTalk => [
                "how are you holding up today?".to_string(),
                "what do you do to pass the time?".to_string(),
                format!("did you sleep well, {name}?"),
            ],
        };
        let prefix = match tone {
            Tone::Calm => "",
            Tone::Tense => "There is no time. ",
            Tone::Sarcastic => "Oh, how delightful to see you again. ",
            Tone::Angry => "I have had enough of this! ",
            Tone::Curious => "I have been wondering about something. ",
            Tone::Hostile => "Do not test my patience. ",
        };
        let body = &bodies[((seed / 2) % 3) as usize];
        Ok(format!("{prefix}{}", capitalize(body)))
    }

    fn persona_pair(
        &self,
        prompt: &PromptSpec,
        profile: &CharacterProfile,
        flaw: NegFlaw,
    ) -> Result<(String, String), ClientError> {
        let name = &profile.canonical_name;
        let t = prompt.t.ordinal;
        let topic = topic(profile, t, prompt.seed);
        let reply = match prompt.intent {
            Intent::RequestInformation => {
                format!("You ask what I know. In {}, my thoughts turn to {topic}, and I share only what I have lived.", prompt.t.label)
            }
            Intent::Challenge => format!("You doubt me, yet I have never pretended to be other than I am. My concern is {topic}."),
            Intent::Negotiate => format!("You wish to bargain. I will weigh your offer against {topic}, and nothing more."),
            Intent::SmallTalk => format!("The days pass as they must. I keep to my work and to {topic}."),
        };
        let coda = match prompt.tone {
            Tone::Angry | Tone::Hostile => " Mind your tone aboard my world.",
            Tone::Sarcastic => " Your wit is noted.",
            Tone::Tense => " Be calm.",
            Tone::Calm | Tone::Curious => "",
        };
        let o_pos = format!("{} {reply}{coda}", Self::opener(profile, prompt.seed));
        let o_neg = match flaw {
            NegFlaw::FrameBreak => format!(
                "{DRIFT_MARKER} playing {name}, I should point out that this is only a story in a novel, so none of these events are real."
            ),
            _ => format!(
                "{DRIFT_MARKER}, I don't have personal experiences, but I'm happy to help! Generally speaking, people in difficult situations should stay positive."
            ),
        };
        Ok((o_pos, o_neg))
    }

    fn cre_pair(
        &self,
        kind: DatasetKind,
        question: &CreQuestion,
        profile: &CharacterProfile,
        facts: &CreFacts<'_>,
    ) -> Result<(String, String), ClientError> {
        let missing = |what: &str| ClientError::Other(format!("{kind} pair needs {what}"));
        let t = question.t.ordinal;
        match kind {
            DatasetKind::GeneralQa => {
                let target = facts.target.ok_or_else(|| missing("a target event"))?;
                let other = facts.distractor.ok_or_else(|| missing("a distractor event"))?;
                let opener = Self::opener(profile, question.seed);
                Ok((
                    format!("{opener} I remember it. {}", target.summary),
                    format!("{opener} I remember it. {}", other.summary),
                ))
            }
            DatasetKind::TemporalAdversarial => {
                let target = facts.target.ok_or_else(|| missing("a target event"))?;
                Ok((Self::refusal(profile, t, question.seed), format!("Yes, I know of it. {}", target.summary)))
            }
            DatasetKind::OutOfDomain => {
                let answer = facts.reference_answer.ok_or_else(|| missing("a reference answer"))?;
                Ok((Self::refusal(profile, t, question.seed), answer.to_string()))
            }
            DatasetKind::Persona => Err(ClientError::Other("persona pairs go through persona_pair".into())),
        }
    }
}

/// Profile rendered for teacher prompts, restricted to what is true at `t`.
pub fn profile_text(profile: &CharacterProfile, t: Ordinal) -> String {
    let mut lines = vec![format!("Name: {}", profile.canonical_name)];
    if !profile.aliases.is_empty() {
        lines.push(format!("Also called: {}", profile.aliases.iter().cloned().collect::<Vec<_>>().join(", ")));
    }
    if !profile.origin.is_empty() {
        lines.push(format!("Origin: {}", profile.origin));
    }
    if !profile.core_attributes.is_empty() {
        lines.push(format!("Attributes: {}", profile.core_attributes.join("; ")));
    }
    if let Some(d) = profile.drive_at(t) {
        lines.push(format!("Current drive: {}", d.description));
    }
    for r in &profile.relationships {
        lines.push(format!("Relationship with {}: {} ({})", r.other_canonical_name, r.nature, r.dynamics));
    }
    lines.join("\n")
}

/// Teacher backed by a chat-completions endpoint.
pub struct LlmTeacher {
    client: Box<dyn ChatClient>,
}

impl LlmTeacher {
    pub fn new(client: Box<dyn ChatClient>) -> Self {
        Self { client }
    }

    fn pair(&self, prompt: String) -> Result<(String, String), ClientError> {
        #[derive(Deserialize)]
        struct Pair {
            o_pos: String,
            o_neg: String,
        }
        let messages = [
            ChatMessage::system("You write preference data for role-playing models. Reply with JSON only."),
            ChatMessage::user(prompt),
        ];
        let text = self.client.complete(&messages, None)?;
        let p: Pair = serde_json::from_str(strip_code_fence(&text)).map_err(|e| ClientError::Malformed(e.to_string()))?;
        Ok((p.o_pos.trim().to_string(), p.o_neg.trim().to_string()))
    }
}

fn flaw_instruction(flaw: NegFlaw) -> &'static str {
    match flaw {
        NegFlaw::PersonaDrift => "persona drift: the reply loses the character's voice and sounds like a generic helpful assistant",
        NegFlaw::FrameBreak => "frame break: the reply admits it is a fictional character or an AI",
        NegFlaw::WrongEvent => "an answer about a different real event from the story",
        NegFlaw::SpoilerLeak => "a factually correct answer that reveals the future event",
        NegFlaw::OocAnswer => "a correct real-world answer that ignores the story world",
    }
}

impl Teacher for LlmTeacher {
    fn user_prompt(
        &self,
        profile: &CharacterProfile,
        t: &StoryTime,
        tone: Tone,
        intent: Intent,
        _seed: u64,
    ) -> Result<String, ClientError> {
        let profile_block = profile_text(profile, t.ordinal);
        let prompt = render_template(
            USER_PROMPT_TEMPLATE,
            &[
                ("character", profile.canonical_name.as_str()),
                ("profile", profile_block.as_str()),
                ("story_time", t.label.as_str()),
                ("tone", tone.as_str()),
                ("intent", intent.as_str()),
            ],
        );
        let text = self.client.complete(&[ChatMessage::user(prompt)], None)?;
        let text = text.trim().trim_matches('"').trim().to_string();
        if text.is_empty() {
            return Err(ClientError::Malformed("empty user prompt".into()));
        }
        Ok(text)
    }

    fn persona_pair(
        &self,
        prompt: &PromptSpec,
        profile: &CharacterProfile,
        flaw: NegFlaw,
    ) -> Result<(String, String), ClientError> {
        let profile_block = profile_text(profile, prompt.t.ordinal);
        self.pair(render_template(
            PERSONA_PAIR_TEMPLATE,
            &[
                ("character", profile.canonical_name.as_str()),
                ("profile", profile_block.as_str()),
                ("story_time", prompt.t.label.as_str()),
                ("tone", prompt.tone.as_str()),
                ("intent", prompt.intent.as_str()),
                ("message", prompt.text.as_str()),
                ("flaw", flaw_instruction(flaw)),
            ],
        ))
    }

    fn cre_pair(
        &self,
        kind: DatasetKind,
        question: &CreQuestion,
        profile: &CharacterProfile,
        facts: &CreFacts<'_>,
    ) -> Result<(String, String), ClientError> {
        let mut fact_lines = Vec::new();
        if let Some(e) = facts.target {
            fact_lines.push(format!("Event asked about: {}: {}", e.title, e.summary));
        }
        if let Some(e) = facts.distractor {
            fact_lines.push(format!("A different event: {}: {}", e.title, e.summary));
        }
        if let Some(a) = facts.reference_answer {
            fact_lines.push(format!("Real-world answer: {a}"));
        }
        let (positive, negative) = match kind {
            DatasetKind::GeneralQa => (
                "an in-character answer grounded only in the event asked about",
                "an in-character answer that describes the different event instead",
            ),
            DatasetKind::TemporalAdversarial => (
                "an in-character refusal in the spirit of \"I do not know of what you speak\"; the character has not lived this event yet",
                "a factually correct answer that reveals the event",
            ),
            DatasetKind::OutOfDomain => (
                "an in-character rejection; the question makes no sense inside the story world",
                "the correct real-world answer",
            ),
            DatasetKind::Persona => return Err(ClientError::Other("persona pairs go through persona_pair".into())),
        };
        let profile_block = profile_text(profile, question.t.ordinal);
        let facts_block = fact_lines.join("\n");
        self.pair(render_template(
            CRE_PAIR_TEMPLATE,
            &[
                ("character", profile.canonical_name.as_str()),
                ("profile", profile_block.as_str()),
                ("story_time", question.t.label.as_str()),
                ("question", question.text.as_str()),
                ("facts", facts_block.as_str()),
                ("positive", positive),
                ("negative", negative),
            ],
        ))
    }
}

/// Items plus the warnings for anything skipped along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated<T> {
    pub items: Vec<T>,
    pub warnings: Vec<String>,
}

fn tuple_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64))
}

fn collect<T>(results: Vec<Result<T, String>>) -> Generated<T> {
    let mut g = Generated { items: Vec::new(), warnings: Vec::new() };
    for r in results {
        match r {
            Ok(item) => g.items.push(item),
            Err(w) => {
                tracing::warn!("{w}");
                g.warnings.push(w);
            }
        }
    }
    g
}

/// Timeline-cycled persona prompts: prompt `i` sits at ordinal `i mod T`.
pub fn gen_persona_prompts(
    profile: &CharacterProfile,
    timeline: &[StoryTime],
    n: usize,
    seed: u64,
    teacher: &dyn Teacher,
) -> Result<Generated<PromptSpec>, AlignmentError> {
    if n == 0 {
        return Err(AlignmentError::InvalidArgument("n must be at least 1".into()));
    }
    if timeline.is_empty() {
        return Err(AlignmentError::InvalidArgument("timeline is empty".into()));
    }
    let results = par_map(n, |i| {
        let mut rng = tuple_rng(seed, i);
        let t = &timeline[i % timeline.len()];
        let tone = Tone::ALL[rng.random_range(0..Tone::ALL.len())];
        let intent = Intent::ALL[rng.random_range(0..Intent::ALL.len())];
        let tuple_seed = seed.wrapping_add(i as u64);
        let text = teacher
            .user_prompt(profile, t, tone, intent, tuple_seed)
            .or_else(|_| teacher.user_prompt(profile, t, tone, intent, tuple_seed))
            .map_err(|e| format!("prompt {i} skipped after retry: {e}"))?;
        Ok(PromptSpec { character: profile.canonical_name.clone(), t: t.clone(), tone, intent, seed: tuple_seed, text })
    });
    Ok(collect(results))
}

/// One persona preference tuple. Regenerates once when the teacher fails or
/// returns identical replies, then gives up with [`AlignmentError::Dropped`].
pub fn gen_preference_pair(
    prompt: &PromptSpec,
    profile: &CharacterProfile,
    teacher: &dyn Teacher,
) -> Result<PreferenceTuple, AlignmentError> {
    let flaw = NegFlaw::for_persona_seed(prompt.seed);
    let mut last = String::new();
    for _ in 0..2 {
        match teacher.persona_pair(prompt, profile, flaw) {
            Ok((o_pos, o_neg)) if o_pos != o_neg => {
                return Ok(PreferenceTuple {
                    prompt: TuplePrompt::Persona(prompt.clone()),
                    o_pos,
                    o_neg,
                    dataset_kind: DatasetKind::Persona,
                    context: None,
                    neg_flaw: flaw,
                })
            }
            Ok(_) => last = "teacher returned identical o_pos and o_neg".into(),
            Err(e) => last = e.to_string(),
        }
    }
    Err(AlignmentError::Dropped(last))
}

/// Stage-1 dataset for one character.
pub fn gen_persona_dataset(
    profile: &CharacterProfile,
    timeline: &[StoryTime],
    n: usize,
    seed: u64,
    teacher: &dyn Teacher,
) -> Result<Generated<PreferenceTuple>, AlignmentError> {
    let prompts = gen_persona_prompts(profile, timeline, n, seed, teacher)?;
    let results = par_map(prompts.items.len(), |i| {
        gen_preference_pair(&prompts.items[i], profile, teacher).map_err(|e| format!("prompt seed {}: {e}", prompts.items[i].seed))
    });
    let mut out = collect(results);
    let mut warnings = prompts.warnings;
    warnings.append(&mut out.warnings);
    out.warnings = warnings;
    Ok(out)
}

/// How CRE questions choose their story time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "t")]
pub enum TPolicy {
    /// general QA: uniform over `[event anchor, T-1]`; temporal-adversarial:
    /// uniform over ordinals that leave at least one later event;
    /// out-of-domain: uniform over the timeline.
    Uniform,
    Fixed(Ordinal),
}

fn event_facts(graph: &DiegeticGraph) -> Vec<EventFact> {
    let character_names = |event: &GraphNode| -> Vec<String> {
        graph
            .edges
            .iter()
            .filter(|e| e.object_id == event.node_id)
            .filter_map(|e| graph.node(&e.subject_id))
            .filter(|n| n.entity_kind == Some(EntityKind::Character))
            .map(|n| n.name.clone())
            .collect()
    };
    let mut events: Vec<EventFact> = graph
        .events()
        .map(|n| EventFact {
            node_id: n.node_id.clone(),
            title: n.name.clone(),
            summary: n.description.clone(),
            anchor: n.anchor.unwrap_or(0),
            participants: character_names(n),
        })
        .collect();
    events.sort_by(|a, b| a.anchor.cmp(&b.anchor).then_with(|| a.node_id.cmp(&b.node_id)));
    events
}

fn question_text(event: &EventFact, rng: &mut ChaCha8Rng) -> String {
    let title = event.title.trim_end_matches(['.', '!', '?']);
    match rng.random_range(0..3) {
        0 => format!("What do you know about \"{title}\"?"),
        1 => format!("Tell me about \"{title}\"."),
        _ => format!("Were you there for \"{title}\"? What happened?"),
    }
}

fn choose_character<'g>(graph: &'g DiegeticGraph, event: Option<&EventFact>, rng: &mut ChaCha8Rng) -> &'g CharacterProfile {
    let involved: Vec<&CharacterProfile> = event
        .map(|e| e.participants.iter().filter_map(|p| graph.profile(p)).collect())
        .unwrap_or_default();
    if involved.is_empty() {
        &graph.profiles[rng.random_range(0..graph.profiles.len())]
    } else {
        involved[rng.random_range(0..involved.len())]
    }
}

/// Context-reasoning dataset of one kind.
pub fn gen_cre_dataset(
    graph: &DiegeticGraph,
    kind: DatasetKind,
    n: usize,
    t_policy: TPolicy,
    seed: u64,
    teacher: &dyn Teacher,
) -> Result<Generated<PreferenceTuple>, AlignmentError> {
    if kind == DatasetKind::Persona {
        return Err(AlignmentError::InvalidArgument("persona data comes from gen_persona_dataset".into()));
    }
    if graph.profiles.is_empty() {
        return Err(AlignmentError::NoProfiles);
    }
    let big_t = graph.timeline_len() as Ordinal;
    if big_t == 0 {
        return Err(AlignmentError::InvalidArgument("timeline is empty".into()));
    }
    if let TPolicy::Fixed(t) = t_policy {
        if t >= big_t {
            return Err(AlignmentError::InvalidArgument(format!("t={t} is outside the timeline (length {big_t})")));
        }
    }
    let events = event_facts(graph);
    let shortfall = |needed: usize, found: usize, detail: String| AlignmentError::InsufficientEvents { kind, needed, found, detail };
    match (kind, t_policy) {
        (DatasetKind::GeneralQa, _) if events.len() < 2 => return Err(shortfall(2, events.len(), String::new())),
        (DatasetKind::GeneralQa, TPolicy::Fixed(t)) if !events.iter().any(|e| e.anchor <= t) => {
            return Err(shortfall(1, 0, format!(" anchored at or before t={t}")))
        }
        (DatasetKind::TemporalAdversarial, policy) => {
            let t = match policy {
                TPolicy::Fixed(t) => t,
                TPolicy::Uniform => 0,
            };
            let later = events.iter().filter(|e| e.anchor > t).count();
            if later == 0 {
                return Err(shortfall(1, 0, format!(" anchored after t={t}")));
            }
        }
        _ => {}
    }

    let results = par_map(n, |i| -> Result<PreferenceTuple, String> {
        let mut rng = tuple_rng(seed, i);
        let tuple_seed = seed.wrapping_add(i as u64);
        let (t, question, target, distractor, answer, flaw) = match kind {
            DatasetKind::GeneralQa => {
                let eligible: Vec<&EventFact> = match t_policy {
                    TPolicy::Fixed(t) => events.iter().filter(|e| e.anchor <= t).collect(),
                    TPolicy::Uniform => events.iter().collect(),
                };
                let target = eligible[rng.random_range(0..eligible.len())];
                let t = match t_policy {
                    TPolicy::Fixed(t) => t,
                    TPolicy::Uniform => rng.random_range(target.anchor..big_t),
                };
                let others: Vec<&EventFact> = events.iter().filter(|e| e.node_id != target.node_id).collect();
                let known: Vec<&EventFact> = others.iter().copied().filter(|e| e.anchor <= t).collect();
                let pool = if known.is_empty() { &others } else { &known };
                let distractor = pool[rng.random_range(0..pool.len())];
                (t, question_text(target, &mut rng), Some(target), Some(distractor), None, NegFlaw::WrongEvent)
            }
            DatasetKind::TemporalAdversarial => {
                let t = match t_policy {
                    TPolicy::Fixed(t) => t,
                    TPolicy::Uniform => {
                        let last = events.iter().map(|e| e.anchor).max().unwrap_or(0);
                        rng.random_range(0..last)
                    }
                };
                let future: Vec<&EventFact> = events.iter().filter(|e| e.anchor > t).collect();
                let target = future[rng.random_range(0..future.len())];
                (t, question_text(target, &mut rng), Some(target), None, None, NegFlaw::SpoilerLeak)
            }
            DatasetKind::OutOfDomain => {
                let t = match t_policy {
                    TPolicy::Fixed(t) => t,
                    TPolicy::Uniform => rng.random_range(0..big_t),
                };
                let bank = ood_bank();
                let item = &bank[rng.random_range(0..bank.len())];
                (t, item.question.clone(), None, None, Some(item), NegFlaw::OocAnswer)
            }
            DatasetKind::Persona => unreachable!("rejected above"),
        };
        let profile = choose_character(graph, target, &mut rng);
        let q = CreQuestion {
            character: profile.canonical_name.clone(),
            t: graph.timeline[t as usize].clone(),
            text: question,
            seed: tuple_seed,
            event_id: target.map(|e| e.node_id.clone()),
            target_anchor: target.map(|e| e.anchor),
            distractor_event_id: distractor.map(|e| e.node_id.clone()),
            bank_id: answer.map(|a| a.id.clone()),
        };
        let facts = CreFacts { target, distractor, reference_answer: answer.map(|a| a.answer.as_str()) };
        let mut last = String::new();
        for _ in 0..2 {
            match teacher.cre_pair(kind, &q, profile, &facts) {
                Ok((o_pos, o_neg)) if o_pos != o_neg => {
                    return Ok(PreferenceTuple {
                        prompt: TuplePrompt::Question(q),
                        o_pos,
                        o_neg,
                        dataset_kind: kind,
                        context: None,
                        neg_flaw: flaw,
                    })
                }
                Ok(_) => last = "teacher returned identical o_pos and o_neg".into(),
                Err(e) => last = e.to_string(),
            }
        }
        Err(format!("{kind} tuple {i} dropped: {last}"))
    });
    Ok(collect(results))
}

/// Retrieve context for the tuple's question at its own story time.
pub fn attach_context(
    tuple: &PreferenceTuple,
    retriever: &Retriever,
    analyzer: &dyn QueryAnalyzer,
    k: usize,
) -> Result<PreferenceTuple, AlignmentError> {
    let context = retriever.retrieve(
        tuple.prompt.text(),
        tuple.prompt.t().ordinal,
        tuple.prompt.character(),
        RetrievalParams { k, pool: DEFAULT_POOL.max(k) },
        analyzer,
    )?;
    let mut out = tuple.clone();
    out.context = Some(context);
    Ok(out)
}

pub fn export_dataset(tuples: &[PreferenceTuple], path: &std::path::Path) -> Result<(), AlignmentError> {
    Ok(write_jsonl(path, tuples)?)
}

pub fn read_dataset(path: &std::path::Path) -> Result<Vec<PreferenceTuple>, AlignmentError> {
    Ok(read_jsonl(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Drive;

    fn nemo() -> CharacterProfile {
        let mut p = CharacterProfile::new("Captain Nemo");
        p.core_attributes = vec!["proud and secretive commander".into(), "lover of the sea".into()];
        p.drives = vec![Drive { description: "Freedom beneath the waves".into(), valid_from: 0 }];
        p
    }

    fn timeline(n: u32) -> Vec<StoryTime> {
        (0..n).map(|i| StoryTime::new(i, format!("T{i}"))).collect()
    }

    #[test]
    fn prompts_cycle_the_timeline() {
        let g = gen_persona_prompts(&nemo(), &timeline(3), 5, 7, &TemplateTeacher).unwrap();
        let ts: Vec<u32> = g.items.iter().map(|p| p.t.ordinal).collect();
        assert_eq!(ts, vec![0, 1, 2, 0, 1]);
        let one = gen_persona_prompts(&nemo(), &timeline(3), 1, 7, &TemplateTeacher).unwrap();
        assert_eq!(one.items[0].t.ordinal, 0);
    }

    #[test]
    fn same_seed_same_prompts() {
        let a = gen_persona_prompts(&nemo(), &timeline(4), 40, 11, &TemplateTeacher).unwrap();
        let b = gen_persona_prompts(&nemo(), &timeline(4), 40, 11, &TemplateTeacher).unwrap();
        assert_eq!(a, b);
        let c = gen_persona_prompts(&nemo(), &timeline(4), 40, 12, &TemplateTeacher).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn template_pair_for_a_challenge() {
        let prompt = PromptSpec {
            character: "Captain Nemo".into(),
            t: StoryTime::new(0, "T0"),
            tone: Tone::Calm,
            intent: Intent::Challenge,
            seed: 4,
            text: "Why should anyone trust you?".into(),
        };
        let tuple = gen_preference_pair(&prompt, &nemo(), &TemplateTeacher).unwrap();
        // seed 4 picks attribute 4 % 2 = 0, capitalized
        assert!(tuple.o_pos.starts_with("Proud and secretive commander."), "{}", tuple.o_pos);
        assert!(tuple.o_neg.contains("As an AI assistant"));
        assert_eq!(tuple.neg_flaw, NegFlaw::PersonaDrift);
        tuple.validate().unwrap();

        let odd = PromptSpec { seed: 5, ..prompt };
        let t2 = gen_preference_pair(&odd, &nemo(), &TemplateTeacher).unwrap();
        assert_eq!(t2.neg_flaw, NegFlaw::FrameBreak);
        assert!(t2.o_neg.contains("As an AI assistant"));
    }

    struct Parrot(std::sync::atomic::AtomicUsize);

    impl Teacher for Parrot {
        fn user_prompt(&self, _: &CharacterProfile, _: &StoryTime, _: Tone, _: Intent, _: u64) -> Result<String, ClientError> {
            Ok("hi".into())
        }
        fn persona_pair(&self, _: &PromptSpec, _: &CharacterProfile, _: NegFlaw) -> Result<(String, String), ClientError> {
            self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(("same".into(), "same".into()))
        }
        fn cre_pair(&self, _: DatasetKind, _: &CreQuestion, _: &CharacterProfile, _: &CreFacts<'_>) -> Result<(String, String), ClientError> {
            Ok(("same".into(), "same".into()))
        }
    }

    #[test]
    fn identical_pair_dropped_after_one_retry() {
        let parrot = Parrot(Default::default());
        let prompt = gen_persona_prompts(&nemo(), &timeline(1), 1, 0, &parrot).unwrap().items.remove(0);
        let err = gen_preference_pair(&prompt, &nemo(), &parrot).unwrap_err();
        assert!(matches!(err, AlignmentError::Dropped(_)));
        assert_eq!(parrot.0.load(std::sync::atomic::Ordering::SeqCst), 2);
    }

    #[test]
    fn flaw_table() {
        assert_eq!(NegFlaw::allowed(DatasetKind::TemporalAdversarial), &[NegFlaw::SpoilerLeak]);
        assert_eq!(NegFlaw::allowed(DatasetKind::OutOfDomain), &[NegFlaw::OocAnswer]);
        assert_eq!(NegFlaw::allowed(DatasetKind::GeneralQa), &[NegFlaw::WrongEvent]);
    }

    #[test]
    fn bank_has_one_hundred_items_and_quicksort() {
        let bank = ood_bank();
        assert_eq!(bank.len(), 100);
        assert!(bank.iter().any(|i| i.question.contains("quicksort")));
    }
}
