//! Dual-level, story-time gated retrieval.
//!
//! A query is split into low-level keywords (searched against node facets)
//! and high-level keywords (searched against edge descriptions). Each level
//! returns its top `pool` candidates, the gate drops everything anchored after
//! `t_star`, and the survivors are merged, deduplicated and ranked by
//! `(score desc, anchor asc, item_id asc)`.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{unit_score, Embedder};
use crate::graph::{DiegeticGraph, NodeKind};
use crate::llm::{render_template, strip_code_fence, ChatClient, ChatMessage, ClientError};
use crate::text::{contains_phrase, content_tokens};
use crate::time::{Ordinal, StoryTime};

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_POOL: usize = 32;
pub const ANALYZER_PROMPT: &str = include_str!("../assets/prompts/analyze_query.v1.txt");

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("pool must be at least 1")]
    ZeroPool,
    #[error("story time {ordinal} is outside the timeline (length {len})")]
    BadStoryTime { ordinal: Ordinal, len: usize },
    #[error("embedding failed: {0}")]
    Embedding(#[from] ClientError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryDecomposition {
    pub low_keywords: Vec<String>,
    pub high_keywords: Vec<String>,
    /// Set when a remote analyzer failed and the heuristic answered instead.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Node,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    /// A facet id (`entity:x#0`) for node items, an edge id for edge items.
    pub item_id: String,
    pub level: Level,
    pub score: f64,
    pub anchor: Ordinal,
    pub text: String,
}

impl ScoredItem {
    /// The owning node id of a facet item, or the edge id.
    pub fn node_id(&self) -> &str {
        match self.level {
            Level::Node => self.item_id.split_once('#').map(|(n, _)| n).unwrap_or(&self.item_id),
            Level::Edge => &self.item_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub items: Vec<ScoredItem>,
    pub t_star: StoryTime,
    pub query: String,
    pub character: String,
    pub decomposition: QueryDecomposition,
}

/// Grid that retrieval scores are rounded to.
pub const SCORE_QUANTUM: f64 = 1e-9;
const SCORE_STEPS: f64 = 1e9;

/// `unit_score` rounded to [`SCORE_QUANTUM`]. Candidates whose cosines are
/// mathematically equal can differ in the last bits depending on summation
/// order; rounding makes them tie exactly so the documented tie-break decides.
/// Dividing by the integer step count yields the double nearest the decimal,
/// so scores serialize without trailing noise.
pub fn retrieval_score(query: &[f64], candidate: &[f64]) -> f64 {
    (unit_score(query, candidate) * SCORE_STEPS).round() / SCORE_STEPS
}

/// Ranking order shared by search, merge and every oracle in the tests.
pub fn rank_order(a: &ScoredItem, b: &ScoredItem) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.anchor.cmp(&b.anchor))
        .then_with(|| a.item_id.cmp(&b.item_id))
}

pub trait QueryAnalyzer: Send + Sync {
    fn decompose(&self, query: &str) -> Result<QueryDecomposition, RetrievalError>;
}

const RELATION_VERBS: &[&str] = &[
    "abandon", "admire", "attack", "betray", "capture", "command", "destroy", "distrust", "escape",
    "fear", "fight", "follow", "forgive", "free", "hate", "help", "hunt", "imprison", "kill", "know",
    "love", "marry", "meet", "obey", "protect", "refuse", "release", "rescue", "respect", "save",
    "serve", "trust", "visit", "warn",
];

fn is_relation_verb(token: &str) -> bool {
    let stems = [token, token.trim_end_matches('s'), token.strip_suffix("ed").unwrap_or(token),
        token.strip_suffix("ing").unwrap_or(token), token.strip_suffix('d').unwrap_or(token)];
    stems.iter().any(|s| RELATION_VERBS.contains(s))
}

fn push_unique(list: &mut Vec<String>, item: String) {
    if !item.is_empty() && !list.contains(&item) {
        list.push(item);
    }
}

/// Deterministic keyword heuristic.
///
/// Low keywords are the query's content tokens. High keywords are bigrams of
/// consecutive content tokens, relationship verbs, and the lowercased
/// canonical names of characters mentioned by name or alias.
#[derive(Debug, Clone, Default)]
pub struct HeuristicAnalyzer {
    // (mention, canonical) pairs, longest mention first
    names: Vec<(String, String)>,
}

impl HeuristicAnalyzer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn for_graph(graph: &DiegeticGraph) -> Self {
        let mut names = Vec::new();
        for p in &graph.profiles {
            for mention in std::iter::once(&p.canonical_name).chain(&p.aliases) {
                names.push((mention.clone(), p.canonical_name.to_lowercase()));
            }
        }
        names.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Self { names }
    }

    pub fn analyze(&self, query: &str) -> QueryDecomposition {
        let tokens = content_tokens(query);
        let mut low = Vec::new();
        for t in &tokens {
            push_unique(&mut low, t.clone());
        }
        let mut high = Vec::new();
        for w in tokens.windows(2) {
            push_unique(&mut high, format!("{} {}", w[0], w[1]));
        }
        for t in &tokens {
            if is_relation_verb(t) {
                push_unique(&mut high, t.clone());
            }
        }
        for (mention, canonical) in &self.names {
            if contains_phrase(query, mention) {
                push_unique(&mut high, canonical.clone());
            }
        }
        QueryDecomposition { low_keywords: low, high_keywords: high, fallback: false }
    }
}

impl QueryAnalyzer for HeuristicAnalyzer {
    fn decompose(&self, query: &str) -> Result<QueryDecomposition, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        Ok(self.analyze(query))
    }
}

/// Small-model analyzer with automatic heuristic fallback.
pub struct RemoteAnalyzer {
    client: Box<dyn ChatClient>,
    fallback: HeuristicAnalyzer,
}

impl RemoteAnalyzer {
    pub fn new(client: Box<dyn ChatClient>, fallback: HeuristicAnalyzer) -> Self {
        Self { client, fallback }
    }

    fn ask(&self, query: &str) -> Result<QueryDecomposition, ClientError> {
        #[derive(Deserialize)]
        struct Reply {
            #[serde(default)]
            low_keywords: Vec<String>,
            #[serde(default)]
            high_keywords: Vec<String>,
        }
        let messages = [
            ChatMessage::system("You turn questions into search keywords. Reply with JSON only."),
            ChatMessage::user(render_template(ANALYZER_PROMPT, &[("query", query)])),
        ];
        let text = self.client.complete(&messages, None)?;
        let reply: Reply = serde_json::from_str(strip_code_fence(&text))
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        let clean = |list: Vec<String>| {
            let mut out = Vec::new();
            for k in list {
                push_unique(&mut out, k.trim().to_lowercase());
            }
            out
        };
        let d = QueryDecomposition {
            low_keywords: clean(reply.low_keywords),
            high_keywords: clean(reply.high_keywords),
            fallback: false,
        };
        if d.low_keywords.is_empty() && d.high_keywords.is_empty() {
            return Err(ClientError::Malformed("both keyword lists are empty".into()));
        }
        Ok(d)
    }
}

impl QueryAnalyzer for RemoteAnalyzer {
    fn decompose(&self, query: &str) -> Result<QueryDecomposition, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        match self.ask(query) {
            Ok(d) => Ok(d),
            Err(err) => {
                tracing::warn!(%err, "query analyzer failed, using heuristic");
                let mut d = self.fallback.analyze(query);
                d.fallback = true;
                Ok(d)
            }
        }
    }
}

pub fn decompose_query(query: &str, analyzer: &dyn QueryAnalyzer) -> Result<QueryDecomposition, RetrievalError> {
    analyzer.decompose(query)
}

struct Candidate {
    item_id: String,
    anchor: Ordinal,
    text: String,
    vector: Vec<f64>,
}

fn node_candidates(graph: &DiegeticGraph, embedder: &dyn Embedder) -> Result<Vec<Candidate>, ClientError> {
    let mut out = Vec::new();
    for node in graph.nodes.iter().filter(|n| n.kind != NodeKind::Temporal) {
        for f in &node.facets {
            out.push(Candidate {
                item_id: f.facet_id.clone(),
                anchor: f.anchor,
                text: f.embedding_key.clone(),
                vector: embedder.embed(&f.embedding_key)?,
            });
        }
    }
    Ok(out)
}

fn edge_candidates(graph: &DiegeticGraph, embedder: &dyn Embedder) -> Result<Vec<Candidate>, ClientError> {
    graph
        .edges
        .iter()
        .map(|e| {
            Ok(Candidate {
                item_id: e.edge_id.clone(),
                anchor: e.anchor,
                text: graph.edge_text(e),
                vector: embedder.embed(&e.description)?,
            })
        })
        .collect()
}

fn top_pool(
    level: Level,
    keywords: &[String],
    candidates: &[Candidate],
    embedder: &dyn Embedder,
    pool: usize,
) -> Result<Vec<ScoredItem>, RetrievalError> {
    if pool == 0 {
        return Err(RetrievalError::ZeroPool);
    }
    if keywords.is_empty() {
        return Ok(Vec::new());
    }
    let q = embedder.embed(&keywords.join(" "))?;
    let mut items: Vec<ScoredItem> = candidates
        .iter()
        .map(|c| ScoredItem {
            item_id: c.item_id.clone(),
            level,
            score: retrieval_score(&q, &c.vector),
            anchor: c.anchor,
            text: c.text.clone(),
        })
        .collect();
    items.sort_by(rank_order);
    items.truncate(pool);
    Ok(items)
}

/// Semantic search over node facets; top `pool` ungated candidates.
pub fn search_nodes(
    graph: &DiegeticGraph,
    keywords: &[String],
    embedder: &dyn Embedder,
    pool: usize,
) -> Result<Vec<ScoredItem>, RetrievalError> {
    let candidates = if keywords.is_empty() { Vec::new() } else { node_candidates(graph, embedder)? };
    top_pool(Level::Node, keywords, &candidates, embedder, pool)
}

/// Semantic search over edge descriptions; top `pool` ungated candidates.
pub fn search_edges(
    graph: &DiegeticGraph,
    keywords: &[String],
    embedder: &dyn Embedder,
    pool: usize,
) -> Result<Vec<ScoredItem>, RetrievalError> {
    let candidates = if keywords.is_empty() { Vec::new() } else { edge_candidates(graph, embedder)? };
    top_pool(Level::Edge, keywords, &candidates, embedder, pool)
}

/// Keep items anchored at or before `t_star`, preserving order.
pub fn apply_gate(items: Vec<ScoredItem>, t_star: Ordinal) -> Vec<ScoredItem> {
    items.into_iter().filter(|i| i.anchor <= t_star).collect()
}

/// Union by `item_id` keeping the highest score, ranked, truncated to `k`.
pub fn merge_rank(node_items: Vec<ScoredItem>, edge_items: Vec<ScoredItem>, k: usize) -> Vec<ScoredItem> {
    let mut best: HashMap<String, ScoredItem> = HashMap::new();
    for item in node_items.into_iter().chain(edge_items) {
        match best.get(&item.item_id) {
            Some(prev) if prev.score >= item.score => {}
            _ => {
                best.insert(item.item_id.clone(), item);
            }
        }
    }
    let mut items: Vec<ScoredItem> = best.into_values().collect();
    items.sort_by(rank_order);
    items.truncate(k);
    items
}

/// Parameters of one retrieval call.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalParams {
    pub k: usize,
    pub pool: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self { k: DEFAULT_K, pool: DEFAULT_POOL }
    }
}

/// Retrieval over one graph with precomputed candidate embeddings.
pub struct Retriever {
    graph: Arc<DiegeticGraph>,
    embedder: Arc<dyn Embedder>,
    nodes: Vec<Candidate>,
    edges: Vec<Candidate>,
}

impl Retriever {
    pub fn new(graph: Arc<DiegeticGraph>, embedder: Arc<dyn Embedder>) -> Result<Self, RetrievalError> {
        let nodes = node_candidates(&graph, embedder.as_ref())?;
        let edges = edge_candidates(&graph, embedder.as_ref())?;
        Ok(Self { graph, embedder, nodes, edges })
    }

    pub fn graph(&self) -> &DiegeticGraph {
        &self.graph
    }

    /// Ungated, unmerged candidate pools for both levels.
    pub fn candidates(
        &self,
        d: &QueryDecomposition,
        pool: usize,
    ) -> Result<(Vec<ScoredItem>, Vec<ScoredItem>), RetrievalError> {
        let e = self.embedder.as_ref();
        Ok((
            top_pool(Level::Node, &d.low_keywords, &self.nodes, e, pool)?,
            top_pool(Level::Edge, &d.high_keywords, &self.edges, e, pool)?,
        ))
    }

    pub fn retrieve(
        &self,
        query: &str,
        t_star: Ordinal,
        character: &str,
        params: RetrievalParams,
        analyzer: &dyn QueryAnalyzer,
    ) -> Result<ContextBundle, RetrievalError> {
        self.retrieve_with(query, t_star, character, params, analyzer, apply_gate)
    }

    /// [`Retriever::retrieve`] with a substitute gate, for auditing what the
    /// gate prevents. Production code always uses [`apply_gate`].
    pub fn retrieve_with(
        &self,
        query: &str,
        t_star: Ordinal,
        character: &str,
        params: RetrievalParams,
        analyzer: &dyn QueryAnalyzer,
        gate: impl Fn(Vec<ScoredItem>, Ordinal) -> Vec<ScoredItem>,
    ) -> Result<ContextBundle, RetrievalError> {
        let st = self
            .graph
            .story_time(t_star)
            .map_err(|_| RetrievalError::BadStoryTime { ordinal: t_star, len: self.graph.timeline_len() })?
            .clone();
        let decomposition = analyzer.decompose(query)?;
        let (nodes, edges) = self.candidates(&decomposition, params.pool)?;
        let items = merge_rank(gate(nodes, t_star), gate(edges, t_star), params.k);
        Ok(ContextBundle {
            items,
            t_star: st,
            query: query.to_string(),
            character: character.to_string(),
            decomposition,
        })
    }
}

/// One-shot retrieval without a cached [`Retriever`].
#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    graph: &DiegeticGraph,
    query: &str,
    t_star: Ordinal,
    character: &str,
    k: usize,
    embedder: Arc<dyn Embedder>,
    analyzer: &dyn QueryAnalyzer,
) -> Result<ContextBundle, RetrievalError> {
    let retriever = Retriever::new(Arc::new(graph.clone()), embedder)?;
    retriever.retrieve(query, t_star, character, RetrievalParams { k, pool: DEFAULT_POOL }, analyzer)
}

/// Ids of every item in a bundle, for set comparisons.
pub fn item_ids(bundle: &ContextBundle) -> BTreeSet<String> {
    bundle.items.iter().map(|i| i.item_id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;

    fn item(id: &str, score: f64, anchor: Ordinal) -> ScoredItem {
        ScoredItem { item_id: id.into(), level: Level::Node, score, anchor, text: id.into() }
    }

    #[test]
    fn heuristic_on_the_imprisonment_question() {
        let d = HeuristicAnalyzer::new().analyze("Why does Nemo imprison the professor?");
        for k in ["nemo", "imprison", "professor"] {
            assert!(d.low_keywords.contains(&k.to_string()), "{d:?}");
        }
        for k in ["nemo imprison", "imprison professor"] {
            assert!(d.high_keywords.contains(&k.to_string()), "{d:?}");
        }
        assert!(d.high_keywords.contains(&"imprison".to_string()));
    }

    #[test]
    fn empty_query_is_rejected() {
        assert!(matches!(HeuristicAnalyzer::new().decompose("  "), Err(RetrievalError::EmptyQuery)));
    }

    #[test]
    fn relation_verb_inflections() {
        assert!(is_relation_verb("imprisoned"));
        assert!(is_relation_verb("loves"));
        assert!(is_relation_verb("saving") || is_relation_verb("saves"));
        assert!(!is_relation_verb("ocean"));
    }

    #[test]
    fn gate_and_merge_examples() {
        let gated = apply_gate(vec![item("a", 0.1, 0), item("b", 0.2, 1), item("c", 0.3, 5)], 1);
        assert_eq!(gated.iter().map(|i| i.anchor).collect::<Vec<_>>(), vec![0, 1]);

        let merged = merge_rank(vec![item("x", 0.4, 0)], vec![item("x", 0.7, 0)], 8);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].score, 0.7);
        assert!(merge_rank(vec![item("x", 0.4, 0)], vec![], 0).is_empty());
    }

    #[test]
    fn ties_break_by_anchor_then_id() {
        let merged = merge_rank(vec![item("b", 0.5, 1), item("a", 0.5, 1), item("c", 0.5, 0)], vec![], 3);
        let ids: Vec<&str> = merged.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn zero_pool_is_an_error() {
        let e = HashEmbedder::default();
        assert!(matches!(
            top_pool(Level::Node, &["x".into()], &[], &e, 0),
            Err(RetrievalError::ZeroPool)
        ));
    }

    #[test]
    fn facet_node_id() {
        assert_eq!(item("entity:nemo#2", 0.0, 0).node_id(), "entity:nemo");
    }
}
