//! Chat backend for talking to a novel's characters at a chosen story time.
//!
//! [`ChatService`] owns loaded novels and sessions. A turn retrieves context
//! gated at the session's story time, assembles a prompt per character and
//! streams the generator's reply; [`http`] exposes it over HTTP with
//! server-sent events.

pub mod client;
pub mod generator;
pub mod http;
pub mod prompt;
pub mod service;
pub mod session;

use thiserror::Error;

pub use client::{ApiClient, HttpSystem};
pub use generator::EchoGenerator;
pub use prompt::{adapter_id, assemble_prompt, AssembledPrompt, HISTORY_TURNS};
pub use service::{AuditRecord, Backends, ChatService, Target, TurnEvent, TurnRequest};
pub use session::{Clock, FixedClock, Session, SessionLog, SystemClock, Turn};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("session {0} already has a turn in flight")]
    Busy(String),
    #[error("retrieval failed: {0}")]
    Retrieval(String),
    #[error("generator failed: {0}")]
    Generator(String),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("{0}")]
    Internal(String),
}
