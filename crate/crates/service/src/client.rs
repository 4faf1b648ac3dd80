//! Blocking client for the HTTP API, and the eval adapter built on it.

use std::time::Duration;

use living_novel::eval::ChatSystem;
use living_novel::llm::ClientError;
use living_novel::{Ordinal, StoryTime};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::service::{HistoryPage, NovelInfo, Target, TurnEvent};
use crate::session::Session;

#[derive(Debug, Clone)]
pub struct ApiClient {
    base_url: String,
    agent: ureq::Agent,
}

fn transport(e: impl std::fmt::Display) -> ClientError {
    ClientError::Transport(e.to_string())
}

/// Parse a complete `text/event-stream` body.
pub fn parse_sse(body: &str) -> Result<Vec<TurnEvent>, ClientError> {
    let mut events = Vec::new();
    for block in body.replace("\r\n", "\n").split("\n\n") {
        let mut name = "message";
        let mut data = String::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                name = v.trim_start();
            } else if let Some(v) = line.strip_prefix("data:") {
                if !data.is_empty() {
                    data.push('\n');
                }
                data.push_str(v.strip_prefix(' ').unwrap_or(v));
            }
        }
        if data.is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&data).map_err(|e| ClientError::Malformed(e.to_string()))?;
        let s = |k: &str| v[k].as_str().unwrap_or_default().to_string();
        events.push(match name {
            "delta" => TurnEvent::Delta { character: s("character"), text: s("text") },
            "done" => TurnEvent::Done {
                character: s("character"),
                text: s("text"),
                latency_ms: v["latency_ms"].as_u64().unwrap_or(0),
                turn_index: v["turn_index"].as_u64().unwrap_or(0) as usize,
            },
            "error" => TurnEvent::Error { message: s("message") },
            other => return Err(ClientError::Malformed(format!("unknown event {other:?}"))),
        });
    }
    Ok(events)
}

impl ApiClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { base_url: base_url.into().trim_end_matches('/').to_string(), agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url)
    }

    fn finish(mut resp: ureq::http::Response<ureq::Body>) -> Result<String, ClientError> {
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(transport)?;
        if status >= 400 {
            return Err(ClientError::Status { status, body });
        }
        Ok(body)
    }

    fn json<T: DeserializeOwned>(text: &str) -> Result<T, ClientError> {
        serde_json::from_str(text).map_err(|e| ClientError::Malformed(e.to_string()))
    }

    fn post_raw(&self, path: &str, body: &Value) -> Result<String, ClientError> {
        let resp = self
            .agent
            .post(&self.url(path))
            .header("content-type", "application/json")
            .send(body.to_string())
            .map_err(transport)?;
        Self::finish(resp)
    }

    fn get_raw(&self, path: &str) -> Result<String, ClientError> {
        Self::finish(self.agent.get(&self.url(path)).call().map_err(transport)?)
    }

    pub fn health(&self) -> Result<Value, ClientError> {
        Self::json(&self.get_raw("/health")?)
    }

    /// Upload a graph or bundle (as JSON) and return the novel id.
    pub fn upload(&self, document: &Value) -> Result<String, ClientError> {
        let v: Value = Self::json(&self.post_raw("/api/novels", document)?)?;
        v["novel_id"].as_str().map(str::to_string).ok_or_else(|| ClientError::Malformed("missing novel_id".into()))
    }

    pub fn novel(&self, novel_id: &str) -> Result<NovelInfo, ClientError> {
        Self::json(&self.get_raw(&format!("/api/novels/{novel_id}"))?)
    }

    pub fn create_session(&self, novel_id: &str, characters: &[&str], t0: Ordinal) -> Result<Session, ClientError> {
        let body = json!({ "novel_id": novel_id, "characters": characters, "t0": t0 });
        Self::json(&self.post_raw("/api/sessions", &body)?)
    }

    pub fn set_timeline(&self, session_id: &str, t: Ordinal) -> Result<Session, ClientError> {
        Self::json(&self.post_raw(&format!("/api/sessions/{session_id}/timeline"), &json!({ "t": t }))?)
    }

    /// Post a message and collect the whole event stream.
    pub fn post_message(&self, session_id: &str, text: &str, target: &Target) -> Result<Vec<TurnEvent>, ClientError> {
        let body = json!({ "text": text, "target": target });
        parse_sse(&self.post_raw(&format!("/api/sessions/{session_id}/messages"), &body)?)
    }

    pub fn history(&self, session_id: &str, page: usize, page_size: usize) -> Result<HistoryPage, ClientError> {
        Self::json(&self.get_raw(&format!("/api/sessions/{session_id}/history?page={page}&page_size={page_size}"))?)
    }
}

/// Evaluation adapter: every question goes to a fresh single-character
/// session at the item's story time.
#[derive(Debug, Clone)]
pub struct HttpSystem {
    client: ApiClient,
    novel_id: String,
}

impl HttpSystem {
    pub fn new(base_url: impl Into<String>, novel_id: impl Into<String>) -> Self {
        Self { client: ApiClient::new(base_url), novel_id: novel_id.into() }
    }
}

impl ChatSystem for HttpSystem {
    fn label(&self) -> String {
        format!("{} ({})", self.client.base_url, self.novel_id)
    }

    fn ask(&self, character: &str, t: &StoryTime, question: &str) -> Result<String, ClientError> {
        let session = self.client.create_session(&self.novel_id, &[character], t.ordinal)?;
        let events = self.client.post_message(&session.session_id, question, &Target::character(character))?;
        for e in events {
            match e {
                TurnEvent::Done { text, .. } => return Ok(text),
                TurnEvent::Error { message } => return Err(ClientError::Other(message)),
                TurnEvent::Delta { .. } => {}
            }
        }
        Err(ClientError::Malformed("stream ended without a done event".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sse_parsing() {
        let body = "event: delta\ndata: {\"character\":\"A\",\"text\":\"hi \"}\n\n\
                    event: done\ndata: {\"character\":\"A\",\"text\":\"hi\",\"latency_ms\":3,\"turn_index\":1}\n\n";
        let events = parse_sse(body).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0], TurnEvent::Delta { character: "A".into(), text: "hi ".into() });
        assert!(matches!(events[1], TurnEvent::Done { turn_index: 1, latency_ms: 3, .. }));
        assert!(parse_sse("event: odd\ndata: {}\n\n").is_err());
    }
}
