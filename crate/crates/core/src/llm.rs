//! Chat-completions style model endpoints.
//!
//! Every remote role (extractor, analyzer, teacher, generator, judge) talks to
//! an OpenAI-compatible `/chat/completions` endpoint through [`ChatClient`].
//! Endpoints are configured per role from environment variables:
//!
//! * `LIVING_NOVEL_<ROLE>_URL`, `LIVING_NOVEL_<ROLE>_KEY`, `LIVING_NOVEL_<ROLE>_MODEL`
//! * falling back to `LIVING_NOVEL_LLM_URL`, `LIVING_NOVEL_LLM_KEY`, `LIVING_NOVEL_LLM_MODEL`

use std::io::{BufRead, BufReader};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("endpoint not configured: {0}")]
    NotConfigured(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

pub trait ChatClient: Send + Sync {
    /// Single non-streaming completion. `model` overrides the configured model.
    fn complete(&self, messages: &[ChatMessage], model: Option<&str>) -> Result<String, ClientError>;

    /// Streaming completion; `on_delta` receives text chunks in order and the
    /// full text is returned at the end.
    fn stream(
        &self,
        messages: &[ChatMessage],
        model: Option<&str>,
        on_delta: &mut dyn FnMut(&str),
    ) -> Result<String, ClientError> {
        let text = self.complete(messages, model)?;
        on_delta(&text);
        Ok(text)
    }
}

/// Which remote role an endpoint serves; selects the environment variable prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Extractor,
    Analyzer,
    Teacher,
    Generator,
    Judge,
    Embeddings,
}

impl Role {
    fn env_prefix(self) -> &'static str {
        match self {
            Role::Extractor => "LIVING_NOVEL_EXTRACTOR",
            Role::Analyzer => "LIVING_NOVEL_ANALYZER",
            Role::Teacher => "LIVING_NOVEL_TEACHER",
            Role::Generator => "LIVING_NOVEL_GENERATOR",
            Role::Judge => "LIVING_NOVEL_JUDGE",
            Role::Embeddings => "LIVING_NOVEL_EMBEDDINGS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads the role's endpoint from the environment.
    pub fn from_env(role: Role) -> Result<Self, ClientError> {
        let get = |suffix: &str| {
            std::env::var(format!("{}_{suffix}", role.env_prefix()))
                .or_else(|_| std::env::var(format!("LIVING_NOVEL_LLM_{suffix}")))
                .ok()
                .filter(|v| !v.is_empty())
        };
        let base_url = get("URL").ok_or_else(|| {
            ClientError::NotConfigured(format!(
                "set {}_URL or LIVING_NOVEL_LLM_URL",
                role.env_prefix()
            ))
        })?;
        let model = get("MODEL").unwrap_or_else(|| "default".to_string());
        Ok(Self { api_key: get("KEY"), ..Self::new(base_url, model) })
    }

    pub(crate) fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path.trim_start_matches('/'))
    }

    pub(crate) fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }
}

/// Blocking HTTP client for OpenAI-compatible chat completions.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    config: EndpointConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    stream: bool,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    message: Option<ChatMessage>,
    #[serde(default)]
    delta: Option<Delta>,
}

#[derive(Deserialize)]
struct Delta {
    #[serde(default)]
    content: Option<String>,
}

impl HttpChatClient {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = config.agent();
        Self { config, agent }
    }

    pub fn from_env(role: Role) -> Result<Self, ClientError> {
        EndpointConfig::from_env(role).map(Self::new)
    }

    fn send(
        &self,
        messages: &[ChatMessage],
        model: Option<&str>,
        stream: bool,
    ) -> Result<ureq::http::Response<ureq::Body>, ClientError> {
        let body = CompletionRequest {
            model: model.unwrap_or(&self.config.model),
            messages,
            stream,
            temperature: 0.0,
        };
        let mut req = self.agent.post(self.config.url("chat/completions"));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ClientError::Status { status, body });
        }
        Ok(resp)
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, messages: &[ChatMessage], model: Option<&str>) -> Result<String, ClientError> {
        let mut resp = self.send(messages, model, false)?;
        let parsed: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message)
            .map(|m| m.content)
            .ok_or_else(|| ClientError::Malformed("no choices in response".into()))
    }

    fn stream(
        &self,
        messages: &[ChatMessage],
        model: Option<&str>,
        on_delta: &mut dyn FnMut(&str),
    ) -> Result<String, ClientError> {
        let resp = self.send(messages, model, true)?;
        let reader = BufReader::new(resp.into_body().into_reader());
        let mut full = String::new();
        for line in reader.lines() {
            let line = line.map_err(|e| ClientError::Transport(e.to_string()))?;
            let Some(data) = line.strip_prefix("data:") else { continue };
            let data = data.trim();
            if data == "[DONE]" {
                break;
            }
            let chunk: CompletionResponse =
                serde_json::from_str(data).map_err(|e| ClientError::Malformed(e.to_string()))?;
            for choice in chunk.choices {
                if let Some(text) = choice.delta.and_then(|d| d.content) {
                    if !text.is_empty() {
                        on_delta(&text);
                        full.push_str(&text);
                    }
                }
            }
        }
        Ok(full)
    }
}

/// Strip a Markdown code fence if the model wrapped its JSON in one.
pub fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.split_once('\n').map(|(_, r)| r).unwrap_or("");
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Fill `{{name}}` placeholders in a versioned prompt template. The first
/// line (`# template: ...`) is a header and is dropped. Substitution is a
/// single left-to-right pass, so inserted text is never re-expanded.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let body = match template.split_once('\n') {
        Some((first, rest)) if first.starts_with("# template") => rest,
        _ => template,
    };
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}").map(|close| (&after[..close], close)) {
            Some((name, close)) => {
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[open..open + 4 + close]),
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
