//! Session orchestration: retrieval gated at the session's story time, prompt
//! assembly, streamed generation and history bookkeeping.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use living_novel::embed::{fnv1a, Embedder, HashEmbedder};
use living_novel::graph::{build_graph, DiegeticGraph, NodeKind};
use living_novel::ingest::{CharacterProfile, ExtractionBundle};
use living_novel::llm::ChatClient;
use living_novel::retrieval::{ContextBundle, HeuristicAnalyzer, QueryAnalyzer, RetrievalParams, Retriever};
use living_novel::{Ordinal, StoryTime};
use serde::{Deserialize, Serialize};

use crate::generator::EchoGenerator;
use crate::prompt::{assemble_prompt, AssembledPrompt, HISTORY_TURNS};
use crate::session::{Clock, LogEvent, Session, SessionLog, SystemClock, Turn, USER};
use crate::ServiceError;

pub const DEFAULT_PAGE_SIZE: usize = 20;
pub const DEFAULT_AUDIT_CAPACITY: usize = 10_000;

pub type AnalyzerFactory = Arc<dyn Fn(&DiegeticGraph) -> Box<dyn QueryAnalyzer> + Send + Sync>;

/// Remote or offline collaborators of the service.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn ChatClient>,
    pub embedder: Arc<dyn Embedder>,
    pub analyzer: AnalyzerFactory,
}

impl Backends {
    /// Echo generator, hash embedder and heuristic analyzer.
    pub fn offline() -> Self {
        Self {
            generator: Arc::new(EchoGenerator),
            embedder: Arc::new(HashEmbedder::default()),
            analyzer: Arc::new(|g: &DiegeticGraph| Box::new(HeuristicAnalyzer::for_graph(g)) as Box<dyn QueryAnalyzer>),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    /// The literal string `"group"`: every selected character replies.
    Group(GroupTag),
    Character(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTag {
    Group,
}

impl Target {
    pub fn group() -> Self {
        Target::Group(GroupTag::Group)
    }
    pub fn character(name: impl Into<String>) -> Self {
        Target::Character(name.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRequest {
    #[serde(default)]
    pub session_id: String,
    pub text: String,
    /// Moves the session to this story time before the turn, as the slider
    /// would. Omitted means the session's current time.
    #[serde(default)]
    pub t_current: Option<Ordinal>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TurnEvent {
    Delta { character: String, text: String },
    Done { character: String, text: String, latency_ms: u64, turn_index: usize },
    Error { message: String },
}

/// Everything that went into one generator call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub session_id: String,
    pub novel_id: String,
    pub character: String,
    pub t_current: StoryTime,
    pub message: String,
    /// The history tail the prompt was assembled from.
    pub history: Vec<Turn>,
    pub context: ContextBundle,
    pub prompt: AssembledPrompt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryPage {
    pub session_id: String,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundInfo {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NovelInfo {
    pub novel_id: String,
    pub profiles: Vec<CharacterProfile>,
    pub timeline: Vec<StoryTime>,
    pub background: Vec<BackgroundInfo>,
}

pub struct Novel {
    pub novel_id: String,
    retriever: Retriever,
    analyzer: Box<dyn QueryAnalyzer>,
}

impl Novel {
    pub fn graph(&self) -> &DiegeticGraph {
        self.retriever.graph()
    }
}

struct Slot {
    state: Mutex<(Session, usize)>,
    busy: Arc<AtomicBool>,
}

pub struct ChatService {
    backends: Backends,
    clock: Arc<dyn Clock>,
    log: SessionLog,
    params: RetrievalParams,
    novels: Mutex<HashMap<String, Arc<Novel>>>,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
    next_session: Mutex<u64>,
    audit: Mutex<VecDeque<AuditRecord>>,
    audit_capacity: usize,
}

impl ChatService {
    pub fn new(backends: Backends) -> Self {
        Self {
            backends,
            clock: Arc::new(SystemClock),
            log: SessionLog::in_memory(),
            params: RetrievalParams::default(),
            novels: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next_session: Mutex::new(1),
            audit: Mutex::new(VecDeque::new()),
            audit_capacity: DEFAULT_AUDIT_CAPACITY,
        }
    }

    pub fn offline() -> Self {
        Self::new(Backends::offline())
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_params(mut self, params: RetrievalParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_audit_capacity(mut self, capacity: usize) -> Self {
        self.audit_capacity = capacity;
        self
    }

    /// Persist sessions under `log` and restore any already there. Sessions
    /// whose novel is not loaded yet are kept and work once it is.
    pub fn with_log(mut self, log: SessionLog) -> Result<Self, ServiceError> {
        let restored = log.load_all()?;
        {
            let mut sessions = self.sessions.lock().unwrap();
            let mut next = self.next_session.lock().unwrap();
            for (session, events) in restored {
                if let Some(n) = session.session_id.strip_prefix("session-").and_then(|n| n.parse::<u64>().ok()) {
                    *next = (*next).max(n + 1);
                }
                let id = session.session_id.clone();
                sessions.insert(id, Arc::new(Slot { state: Mutex::new((session, events)), busy: Default::default() }));
            }
        }
        self.log = log;
        Ok(self)
    }

    pub fn params(&self) -> RetrievalParams {
        self.params
    }

    // ---- novels ---------------------------------------------------------

    /// Register a graph; the id is derived from its canonical bytes, so the
    /// same graph always gets the same id.
    pub fn add_graph(&self, graph: DiegeticGraph) -> Result<String, ServiceError> {
        graph.check_integrity().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let novel_id = format!("novel-{:016x}", fnv1a(graph.to_canonical_json().as_bytes()));
        let mut novels = self.novels.lock().unwrap();
        if !novels.contains_key(&novel_id) {
            let analyzer = (self.backends.analyzer)(&graph);
            let retriever = Retriever::new(Arc::new(graph), self.backends.embedder.clone())
                .map_err(|e| ServiceError::Retrieval(e.to_string()))?;
            novels.insert(novel_id.clone(), Arc::new(Novel { novel_id: novel_id.clone(), retriever, analyzer }));
        }
        Ok(novel_id)
    }

    pub fn add_bundle(&self, bundle: &ExtractionBundle) -> Result<String, ServiceError> {
        let graph = build_graph(bundle).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        self.add_graph(graph)
    }

    pub fn novel(&self, novel_id: &str) -> Result<Arc<Novel>, ServiceError> {
        self.novels
            .lock()
            .unwrap()
            .get(novel_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("novel {novel_id}")))
    }

    pub fn novel_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.novels.lock().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn novel_info(&self, novel_id: &str) -> Result<NovelInfo, ServiceError> {
        let novel = self.novel(novel_id)?;
        let g = novel.graph();
        let background = g
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Background)
            .map(|n| BackgroundInfo { name: n.name.clone(), description: n.description.clone() })
            .collect();
        Ok(NovelInfo { novel_id: novel.novel_id.clone(), profiles: g.profiles.clone(), timeline: g.timeline.clone(), background })
    }

    // ---- sessions -------------------------------------------------------

    fn slot(&self, session_id: &str) -> Result<Arc<Slot>, ServiceError> {
        self.sessions
            .lock()
            .unwrap()
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))
    }

    fn story_time(graph: &DiegeticGraph, t: Ordinal) -> Result<StoryTime, ServiceError> {
        graph.story_time(t).cloned().map_err(|e| ServiceError::BadRequest(e.to_string()))
    }

    fn record(&self, slot: &Slot, event: LogEvent) -> Result<Session, ServiceError> {
        let mut state = slot.state.lock().unwrap();
        let (session, count) = &mut *state;
        let mut next = session.clone();
        next.apply(&event);
        self.log.append(&next, &event, *count + 1)?;
        *session = next;
        *count += 1;
        Ok(session.clone())
    }

    pub fn create_session(&self, novel_id: &str, characters: &[String], t0: Ordinal) -> Result<Session, ServiceError> {
        let novel = self.novel(novel_id)?;
        let g = novel.graph();
        if characters.is_empty() {
            return Err(ServiceError::BadRequest("select at least one character".into()));
        }
        for (i, c) in characters.iter().enumerate() {
            if g.profile(c).is_none() {
                return Err(ServiceError::NotFound(format!("character {c:?} in novel {novel_id}")));
            }
            if characters[..i].contains(c) {
                return Err(ServiceError::BadRequest(format!("character {c:?} selected twice")));
            }
        }
        let t = Self::story_time(g, t0)?;
        let now = self.clock.now_ms();
        let session_id = {
            let mut next = self.next_session.lock().unwrap();
            let id = format!("session-{:06}", *next);
            *next += 1;
            id
        };
        let session = Session {
            session_id: session_id.clone(),
            novel_id: novel_id.to_string(),
            selected_characters: characters.to_vec(),
            t_current: t,
            history: Vec::new(),
            created_at: now,
            updated_at: now,
        };
        self.log.append(&session, &LogEvent::Created { session: session.clone() }, 1)?;
        let slot = Arc::new(Slot { state: Mutex::new((session.clone(), 1)), busy: Default::default() });
        self.sessions.lock().unwrap().insert(session_id, slot);
        Ok(session)
    }

    pub fn session(&self, session_id: &str) -> Result<Session, ServiceError> {
        Ok(self.slot(session_id)?.state.lock().unwrap().0.clone())
    }

    pub fn set_timeline(&self, session_id: &str, t: Ordinal) -> Result<Session, ServiceError> {
        let slot = self.slot(session_id)?;
        let novel_id = slot.state.lock().unwrap().0.novel_id.clone();
        let t = Self::story_time(self.novel(&novel_id)?.graph(), t)?;
        self.record(&slot, LogEvent::Timeline { t, at: self.clock.now_ms() })
    }

    /// Page `page` (from 0) of the history; past the end is an empty page.
    pub fn history(&self, session_id: &str, page: usize, page_size: usize) -> Result<HistoryPage, ServiceError> {
        if page_size == 0 {
            return Err(ServiceError::BadRequest("page_size must be at least 1".into()));
        }
        let session = self.session(session_id)?;
        let turns = session.history.iter().skip(page.saturating_mul(page_size)).take(page_size).cloned().collect();
        Ok(HistoryPage { session_id: session.session_id, page, page_size, total: session.history.len(), turns })
    }

    // ---- turns ----------------------------------------------------------

    /// Validate a turn and claim the session for it. Nothing is sent to the
    /// generator until [`PreparedTurn::run`].
    pub fn prepare_turn(self: &Arc<Self>, request: &TurnRequest) -> Result<PreparedTurn, ServiceError> {
        let text = request.text.trim();
        if text.is_empty() {
            return Err(ServiceError::BadRequest("message text is empty".into()));
        }
        let slot = self.slot(&request.session_id)?;
        let session = slot.state.lock().unwrap().0.clone();
        let novel = self.novel(&session.novel_id)?;
        if let Some(t) = request.t_current {
            Self::story_time(novel.graph(), t)?;
        }
        let characters = match &request.target {
            Target::Group(_) => session.selected_characters.clone(),
            Target::Character(c) if session.selected_characters.contains(c) => vec![c.clone()],
            Target::Character(c) => {
                return Err(ServiceError::BadRequest(format!("{c:?} is not part of session {}", session.session_id)))
            }
        };
        if slot.busy.swap(true, Ordering::SeqCst) {
            return Err(ServiceError::Busy(session.session_id));
        }
        let guard = BusyGuard(slot.busy.clone());
        let session = match request.t_current {
            Some(t) if t != session.t_current.ordinal => self.set_timeline(&session.session_id, t)?,
            _ => session,
        };
        Ok(PreparedTurn {
            service: self.clone(),
            slot,
            novel,
            session,
            characters,
            text: text.to_string(),
            _guard: guard,
        })
    }

    /// Prepare and run a turn in one call.
    pub fn post_message(
        self: &Arc<Self>,
        request: &TurnRequest,
        sink: &mut dyn FnMut(TurnEvent),
    ) -> Result<Vec<Turn>, ServiceError> {
        self.prepare_turn(request)?.run(sink)
    }

    pub fn audit_log(&self) -> Vec<AuditRecord> {
        self.audit.lock().unwrap().iter().cloned().collect()
    }

    fn push_audit(&self, record: AuditRecord) {
        if self.audit_capacity == 0 {
            return;
        }
        let mut audit = self.audit.lock().unwrap();
        if audit.len() == self.audit_capacity {
            audit.pop_front();
        }
        audit.push_back(record);
    }
}

struct BusyGuard(Arc<AtomicBool>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

/// A validated turn holding its session's single-writer claim.
pub struct PreparedTurn {
    service: Arc<ChatService>,
    slot: Arc<Slot>,
    novel: Arc<Novel>,
    session: Session,
    characters: Vec<String>,
    text: String,
    _guard: BusyGuard,
}

impl PreparedTurn {
    pub fn session(&self) -> &Session {
        &self.session
    }

    /// Retrieve and assemble for every replying character, then generate in
    /// selection order. Each character sees the history before this turn and
    /// not the other replies. The turn is committed only if every reply
    /// succeeds; `done` events are sent after the commit.
    pub fn run(self, sink: &mut dyn FnMut(TurnEvent)) -> Result<Vec<Turn>, ServiceError> {
        match self.run_inner(sink) {
            Ok(turns) => Ok(turns),
            Err(e) => {
                sink(TurnEvent::Error { message: e.to_string() });
                Err(e)
            }
        }
    }

    fn run_inner(&self, sink: &mut dyn FnMut(TurnEvent)) -> Result<Vec<Turn>, ServiceError> {
        let started = Instant::now();
        let svc = &self.service;
        let g = self.novel.graph();
        let t = &self.session.t_current;
        let history = &self.session.history;
        let tail = history[history.len().saturating_sub(HISTORY_TURNS)..].to_vec();

        let mut plans = Vec::with_capacity(self.characters.len());
        for name in &self.characters {
            let profile = g.profile(name).ok_or_else(|| ServiceError::NotFound(format!("character {name:?}")))?;
            let context = self
                .novel
                .retriever
                .retrieve(&self.text, t.ordinal, name, svc.params, self.novel.analyzer.as_ref())
                .map_err(|e| ServiceError::Retrieval(e.to_string()))?;
            let prompt = assemble_prompt(&self.novel.novel_id, profile, t, &context, &tail, &self.text);
            plans.push((name.clone(), context, prompt));
        }

        let mut replies = Vec::with_capacity(plans.len());
        for (name, context, prompt) in plans {
            svc.push_audit(AuditRecord {
                session_id: self.session.session_id.clone(),
                novel_id: self.novel.novel_id.clone(),
                character: name.clone(),
                t_current: t.clone(),
                message: self.text.clone(),
                history: tail.clone(),
                context,
                prompt: prompt.clone(),
            });
            let mut on_delta = |d: &str| sink(TurnEvent::Delta { character: name.clone(), text: d.to_string() });
            let text = svc
                .backends
                .generator
                .stream(&prompt.messages(), Some(&prompt.adapter_id), &mut on_delta)
                .map_err(|e| ServiceError::Generator(e.to_string()))?;
            replies.push((name, text, started.elapsed().as_millis() as u64));
        }

        let base = self.slot.state.lock().unwrap().0.history.len();
        let mut turns = vec![Turn { index: base, speaker: USER.into(), text: self.text.clone(), t_at_send: t.ordinal }];
        for (i, (name, text, _)) in replies.iter().enumerate() {
            turns.push(Turn { index: base + 1 + i, speaker: name.clone(), text: text.clone(), t_at_send: t.ordinal });
        }
        svc.record(&self.slot, LogEvent::Turns { turns: turns.clone(), at: svc.clock.now_ms() })?;
        for (turn, (name, text, latency_ms)) in turns[1..].iter().zip(replies) {
            sink(TurnEvent::Done { character: name, text, latency_ms, turn_index: turn.index });
        }
        Ok(turns)
    }
}
