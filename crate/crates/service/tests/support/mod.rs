//! Fixtures and fake backends shared by the service tests.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use living_novel::embed::{Embedder, HashEmbedder};
use living_novel::graph::{build_graph, DiegeticGraph};
use living_novel::ingest::ExtractionBundle;
use living_novel::llm::{ChatClient, ChatMessage, ClientError};
use living_novel_service::{http, Backends, ChatService, FixedClock};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn small_bundle() -> ExtractionBundle {
    ExtractionBundle::load(&fixture("small.bundle.json")).unwrap()
}

pub fn small_graph() -> DiegeticGraph {
    build_graph(&small_bundle()).unwrap()
}

/// Offline service on a fixed clock with the small fixture loaded.
pub fn service_with(backends: Backends) -> (Arc<ChatService>, String) {
    let svc = Arc::new(ChatService::new(backends).with_clock(Arc::new(FixedClock(1_700_000_000_000))));
    let id = svc.add_graph(small_graph()).unwrap();
    (svc, id)
}

pub fn offline_service() -> (Arc<ChatService>, String) {
    service_with(Backends::offline())
}

/// Generator that always fails, counting its calls.
#[derive(Default)]
pub struct Broken(pub AtomicUsize);

impl ChatClient for Broken {
    fn complete(&self, _: &[ChatMessage], _: Option<&str>) -> Result<String, ClientError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Err(ClientError::Transport("connection refused".into()))
    }
}

/// Embedder that works while indexing and fails afterwards.
pub struct FailAfter {
    pub calls: AtomicUsize,
    pub limit: usize,
}

impl Embedder for FailAfter {
    fn dimension(&self) -> usize {
        HashEmbedder::DEFAULT_DIMENSION
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, ClientError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.limit {
            return Err(ClientError::Transport("embedding endpoint down".into()));
        }
        HashEmbedder::default().embed(text)
    }
}

/// Serve `svc` on an ephemeral port from a background runtime.
pub fn start_server(svc: Arc<ChatService>) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = http::bind(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            http::serve(listener, svc).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}
