//! Offline reply generator.

use living_novel::llm::{ChatClient, ChatMessage, ClientError};

use crate::prompt::CONTEXT_LINE_PREFIX;

/// Deterministic stand-in for the generation model.
///
/// The reply names the selected adapter, echoes how many context lines the
/// prompt carried and repeats the user's message, so tests can observe what
/// the pipeline sent. Streaming emits one word (with its trailing space) per
/// delta.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoGenerator;

impl EchoGenerator {
    pub fn context_count(messages: &[ChatMessage]) -> usize {
        messages
            .iter()
            .filter(|m| m.role == "system")
            .flat_map(|m| m.content.lines())
            .filter(|l| l.starts_with(CONTEXT_LINE_PREFIX))
            .count()
    }

    fn user_message(messages: &[ChatMessage]) -> &str {
        messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .and_then(|m| m.content.lines().rev().find_map(|l| l.strip_prefix("user: ")))
            .unwrap_or("")
    }
}

impl ChatClient for EchoGenerator {
    fn complete(&self, messages: &[ChatMessage], model: Option<&str>) -> Result<String, ClientError> {
        let n = Self::context_count(messages);
        let noun = if n == 1 { "fact" } else { "facts" };
        Ok(format!(
            "[{}] I recall {n} {noun}. You said: {}",
            model.unwrap_or("default"),
            Self::user_message(messages)
        ))
    }

    fn stream(
        &self,
        messages: &[ChatMessage],
        model: Option<&str>,
        on_delta: &mut dyn FnMut(&str),
    ) -> Result<String, ClientError> {
        let text = self.complete(messages, model)?;
        for chunk in text.split_inclusive(' ') {
            on_delta(chunk);
        }
        Ok(text)
    }
}
