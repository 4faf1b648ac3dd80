//! Prompt assembly: system, context, history and user blocks in that order.

use living_novel::alignment::profile_text;
use living_novel::embed::fnv1a;
use living_novel::ingest::CharacterProfile;
use living_novel::llm::ChatMessage;
use living_novel::retrieval::ContextBundle;
use living_novel::StoryTime;
use serde::{Deserialize, Serialize};

use crate::session::Turn;

/// History turns included in a prompt.
pub const HISTORY_TURNS: usize = 12;

/// Prefix of every context line; the offline generator counts these.
pub const CONTEXT_LINE_PREFIX: &str = "- [t=";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub adapter_id: String,
    pub system_block: String,
    pub context_block: String,
    pub history_block: String,
    pub user_block: String,
}

impl AssembledPrompt {
    /// The four blocks in their fixed order, separated by blank lines.
    pub fn render(&self) -> String {
        [&self.system_block, &self.context_block, &self.history_block, &self.user_block]
            .into_iter()
            .filter(|b| !b.is_empty())
            .cloned()
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// System message carries persona and context; the user message carries
    /// the recent history and the new message.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let system = format!("{}\n\n{}", self.system_block, self.context_block);
        let user = if self.history_block.is_empty() {
            self.user_block.clone()
        } else {
            format!("{}\n\n{}", self.history_block, self.user_block)
        };
        vec![ChatMessage::system(system), ChatMessage::user(user)]
    }
}

/// Stable model selector for a character of a novel.
pub fn adapter_id(novel_id: &str, character: &str) -> String {
    let slug: String = character
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join("-");
    let h = fnv1a(format!("{novel_id}\u{0}{character}").as_bytes());
    format!("{slug}-{:08x}", h as u32)
}

/// Build the prompt for `profile` answering `message` at `t`.
///
/// `context` must have been retrieved at `t`; only the last
/// [`HISTORY_TURNS`] entries of `history` are used.
pub fn assemble_prompt(
    novel_id: &str,
    profile: &CharacterProfile,
    t: &StoryTime,
    context: &ContextBundle,
    history: &[Turn],
    message: &str,
) -> AssembledPrompt {
    debug_assert_eq!(context.t_star.ordinal, t.ordinal);
    let name = &profile.canonical_name;
    let adapter = adapter_id(novel_id, name);
    let system_block = format!(
        "You are {name}, a character in a novel. Stay in character at all times.\n\
         The story has reached: {label} (story time {ord}). You know nothing that happens after this point; \
         if asked about it, answer in character that you do not know.\n\
         Never say that you are an AI, an assistant or a fictional character.\n\
         {profile}\n\
         [adapter: {adapter}]",
        label = t.label,
        ord = t.ordinal,
        profile = profile_text(profile, t.ordinal),
    );

    let mut context_lines = vec![format!("What you know (story time {}):", t.ordinal)];
    if context.items.is_empty() {
        context_lines.push("(nothing relevant)".into());
    }
    for item in &context.items {
        context_lines.push(format!("{CONTEXT_LINE_PREFIX}{}] {}", item.anchor, item.text));
    }

    let recent = &history[history.len().saturating_sub(HISTORY_TURNS)..];
    let history_block = if recent.is_empty() {
        String::new()
    } else {
        let mut lines = vec!["Conversation so far:".to_string()];
        lines.extend(recent.iter().map(|turn| format!("{}: {}", turn.speaker, turn.text)));
        lines.join("\n")
    };

    AssembledPrompt {
        adapter_id: adapter,
        system_block,
        context_block: context_lines.join("\n"),
        history_block,
        user_block: format!("user: {message}\n{name}:"),
    }
}
