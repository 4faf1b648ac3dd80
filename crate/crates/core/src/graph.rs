//! The diegetic knowledge graph: entity, event and background nodes plus
//! binary relation edges, every one anchored to a point on the timeline.
//!
//! Nodes are deduplicated by `(kind, name)`. Each later mention is kept as
//! its own anchored [`Facet`], so a description first given at `t = 9` never
//! leaks through the `t = 0` primary facet of the same entity.
//!
//! Graph files are a single JSON document with `version`, `timeline`,
//! `nodes`, `edges`, `profiles` and `background_ids`. Saving always writes the
//! canonical form: sorted keys, nodes and edges sorted by id.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ingest::{validate_bundle, CharacterProfile, EntityKind, ExtractionBundle, ValidationReport};
use crate::text::slug;
use crate::time::{Ordinal, StoryTime};

pub const FORMAT_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: u64 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("bundle is invalid: {}", first_error(.0))]
    InvalidBundle(ValidationReport),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("story time {ordinal} is outside the timeline (length {len})")]
    BadStoryTime { ordinal: Ordinal, len: usize },
    #[error("graph parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported graph format version {found:?} (supported major version {supported})")]
    Version { found: String, supported: u64 },
    #[error("graph integrity violation: {0}")]
    Integrity(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn first_error(report: &ValidationReport) -> String {
    match report.errors.first() {
        Some(issue) if report.errors.len() > 1 => {
            format!("{issue} (and {} more)", report.errors.len() - 1)
        }
        Some(issue) => issue.to_string(),
        None => "no errors".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Entity,
    Event,
    Background,
    Temporal,
}

impl NodeKind {
    fn prefix(self) -> &'static str {
        match self {
            NodeKind::Entity => "entity",
            NodeKind::Event => "event",
            NodeKind::Background => "background",
            NodeKind::Temporal => "time",
        }
    }
}

/// One anchored mention of a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Facet {
    pub facet_id: String,
    pub anchor: Ordinal,
    pub description: String,
    pub embedding_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub node_id: String,
    pub kind: NodeKind,
    pub name: String,
    pub description: String,
    pub embedding_key: String,
    /// Primary (earliest) anchor. Absent only on temporal nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Ordinal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_kind: Option<EntityKind>,
    /// Every anchored mention, earliest first; `facets[0]` is the primary.
    #[serde(default)]
    pub facets: Vec<Facet>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub edge_id: String,
    pub subject_id: String,
    pub object_id: String,
    pub description: String,
    pub anchor: Ordinal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiegeticGraph {
    pub version: String,
    pub timeline: Vec<StoryTime>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub profiles: Vec<CharacterProfile>,
    pub background_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactKind {
    Facet,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchoredFact {
    pub id: String,
    pub kind: FactKind,
    pub anchor: Ordinal,
    pub text: String,
}

pub fn temporal_node_id(ordinal: Ordinal) -> String {
    format!("time:{ordinal:05}")
}

struct NodeDraft {
    kind: NodeKind,
    name: String,
    // one per mention; the node takes the most common
    entity_kinds: Vec<EntityKind>,
    // (anchor, description, span_id) in bundle order
    mentions: Vec<(Ordinal, String, Option<String>)>,
}

/// Build the graph from a bundle that passes validation.
pub fn build_graph(bundle: &ExtractionBundle) -> Result<DiegeticGraph, GraphError> {
    let report = validate_bundle(bundle);
    if !report.is_ok() {
        return Err(GraphError::InvalidBundle(report));
    }

    let mut drafts: Vec<NodeDraft> = Vec::new();
    let mut by_key: HashMap<(NodeKind, String), usize> = HashMap::new();
    let mut draft = |kind: NodeKind, name: &str, ek: Option<EntityKind>, m: (Ordinal, String, Option<String>)| {
        let idx = *by_key.entry((kind, name.to_string())).or_insert_with(|| {
            drafts.push(NodeDraft { kind, name: name.to_string(), entity_kinds: Vec::new(), mentions: Vec::new() });
            drafts.len() - 1
        });
        drafts[idx].entity_kinds.extend(ek);
        drafts[idx].mentions.push(m);
        idx
    };

    for e in &bundle.entities {
        draft(NodeKind::Entity, &e.name, Some(e.kind), (e.story_time, e.description.clone(), Some(e.span_id.clone())));
    }
    let mut event_drafts = Vec::new();
    for ev in &bundle.events {
        let idx = draft(NodeKind::Event, &ev.title, None, (ev.story_time, ev.summary.clone(), Some(ev.span_id.clone())));
        event_drafts.push(idx);
    }
    let mut background_drafts = Vec::new();
    for b in &bundle.background {
        let idx = draft(
            NodeKind::Background,
            &b.topic,
            None,
            (b.story_time.unwrap_or(0), b.description.clone(), b.span_id.clone()),
        );
        background_drafts.push(idx);
    }

    let mut used_ids = HashSet::new();
    let mut draft_ids = Vec::with_capacity(drafts.len());
    for d in &drafts {
        let base = format!("{}:{}", d.kind.prefix(), slug(&d.name));
        let mut id = base.clone();
        let mut n = 2;
        while !used_ids.insert(id.clone()) {
            id = format!("{base}-{n}");
            n += 1;
        }
        draft_ids.push(id);
    }

    let mut nodes: Vec<GraphNode> = bundle
        .timeline
        .iter()
        .map(|t| GraphNode {
            node_id: temporal_node_id(t.ordinal),
            kind: NodeKind::Temporal,
            name: t.label.clone(),
            description: String::new(),
            embedding_key: t.label.clone(),
            anchor: None,
            entity_kind: None,
            facets: Vec::new(),
        })
        .collect();

    for (d, id) in drafts.iter().zip(&draft_ids) {
        let mut mentions: Vec<&(Ordinal, String, Option<String>)> = Vec::new();
        for m in &d.mentions {
            if !mentions.iter().any(|x| x.0 == m.0 && x.1 == m.1) {
                mentions.push(m);
            }
        }
        mentions.sort_by_key(|m| m.0);
        let facets: Vec<Facet> = mentions
            .iter()
            .enumerate()
            .map(|(i, (anchor, description, span_id))| Facet {
                facet_id: format!("{id}#{i}"),
                anchor: *anchor,
                description: description.clone(),
                embedding_key: embedding_key(&d.name, description),
                span_id: span_id.clone(),
            })
            .collect();
        let primary = &facets[0];
        nodes.push(GraphNode {
            node_id: id.clone(),
            kind: d.kind,
            name: d.name.clone(),
            description: primary.description.clone(),
            embedding_key: primary.embedding_key.clone(),
            anchor: Some(primary.anchor),
            entity_kind: majority_kind(&d.entity_kinds),
            facets,
        });
    }

    let entity_id: HashMap<&str, &str> = drafts
        .iter()
        .zip(&draft_ids)
        .filter(|(d, _)| d.kind == NodeKind::Entity)
        .map(|(d, id)| (d.name.as_str(), id.as_str()))
        .collect();
    let resolve = |name: &str, record: &str| {
        entity_id.get(name).map(|s| s.to_string()).ok_or_else(|| {
            GraphError::Integrity(format!("{record} references unknown entity {name:?}"))
        })
    };

    // Edge ids are sequential in bundle order: relations, then participation.
    let mut edges = Vec::new();
    let mut counter = 0usize;
    let mut edge_id = || {
        let id = format!("edge:{counter:06}");
        counter += 1;
        id
    };
    for (i, r) in bundle.relations.iter().enumerate() {
        let record = format!("relations[{i}]");
        edges.push(GraphEdge {
            edge_id: edge_id(),
            subject_id: resolve(&r.subject, &record)?,
            object_id: resolve(&r.object, &record)?,
            description: r.description.clone(),
            anchor: r.story_time,
            span_id: Some(r.span_id.clone()),
        });
    }
    for (i, (ev, &didx)) in bundle.events.iter().zip(&event_drafts).enumerate() {
        let record = format!("events[{i}]");
        for p in &ev.participants {
            edges.push(GraphEdge {
                edge_id: edge_id(),
                subject_id: resolve(p, &record)?,
                object_id: draft_ids[didx].clone(),
                description: format!("{p} takes part in: {}", ev.title),
                anchor: ev.story_time,
                span_id: Some(ev.span_id.clone()),
            });
        }
    }

    let mut background_ids: Vec<String> = background_drafts.iter().map(|&i| draft_ids[i].clone()).collect();
    background_ids.sort();
    background_ids.dedup();
    nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    edges.sort_by(|a, b| a.edge_id.cmp(&b.edge_id));

    let graph = DiegeticGraph {
        version: FORMAT_VERSION.to_string(),
        timeline: bundle.timeline.clone(),
        nodes,
        edges,
        profiles: bundle.profiles.clone(),
        background_ids,
    };
    graph.check_integrity()?;
    Ok(graph)
}

/// Most frequent kind; ties go to the kind mentioned first.
fn majority_kind(kinds: &[EntityKind]) -> Option<EntityKind> {
    let count = |k: &EntityKind| kinds.iter().filter(|x| *x == k).count();
    kinds.iter().fold(None, |best: Option<EntityKind>, k| match best {
        Some(b) if count(&b) >= count(k) => Some(b),
        _ => Some(*k),
    })
}

fn embedding_key(name: &str, description: &str) -> String {
    if description.trim().is_empty() {
        name.to_string()
    } else {
        format!("{name}: {description}")
    }
}

impl DiegeticGraph {
    pub fn timeline_len(&self) -> usize {
        self.timeline.len()
    }

    pub fn story_time(&self, ordinal: Ordinal) -> Result<&StoryTime, GraphError> {
        self.timeline
            .get(ordinal as usize)
            .ok_or(GraphError::BadStoryTime { ordinal, len: self.timeline.len() })
    }

    pub fn node(&self, node_id: &str) -> Option<&GraphNode> {
        self.nodes
            .binary_search_by(|n| n.node_id.as_str().cmp(node_id))
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn edge(&self, edge_id: &str) -> Option<&GraphEdge> {
        self.edges
            .binary_search_by(|e| e.edge_id.as_str().cmp(edge_id))
            .ok()
            .map(|i| &self.edges[i])
    }

    pub fn profile(&self, canonical_name: &str) -> Option<&CharacterProfile> {
        self.profiles.iter().find(|p| p.canonical_name == canonical_name)
    }

    pub fn events(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Event)
    }

    /// Human-readable value text of an edge, as handed to a generator.
    pub fn edge_text(&self, edge: &GraphEdge) -> String {
        let name = |id: &str| self.node(id).map(|n| n.name.as_str()).unwrap_or(id).to_string();
        format!("{} -> {}: {}", name(&edge.subject_id), name(&edge.object_id), edge.description)
    }

    /// Every facet of `node_id` and every incident edge anchored at or before
    /// `t_star`, ordered by anchor then id.
    pub fn facts_at(&self, node_id: &str, t_star: Ordinal) -> Result<Vec<AnchoredFact>, GraphError> {
        let node = self.node(node_id).ok_or_else(|| GraphError::UnknownNode(node_id.to_string()))?;
        let mut out: Vec<AnchoredFact> = node
            .facets
            .iter()
            .filter(|f| f.anchor <= t_star)
            .map(|f| AnchoredFact {
                id: f.facet_id.clone(),
                kind: FactKind::Facet,
                anchor: f.anchor,
                text: f.embedding_key.clone(),
            })
            .collect();
        out.extend(
            self.edges
                .iter()
                .filter(|e| (e.subject_id == node_id || e.object_id == node_id) && e.anchor <= t_star)
                .map(|e| AnchoredFact {
                    id: e.edge_id.clone(),
                    kind: FactKind::Edge,
                    anchor: e.anchor,
                    text: self.edge_text(e),
                }),
        );
        out.sort_by(|a, b| a.anchor.cmp(&b.anchor).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    /// Referential integrity and anchoring invariants.
    pub fn check_integrity(&self) -> Result<(), GraphError> {
        let t = self.timeline.len();
        let bad = |msg: String| Err(GraphError::Integrity(msg));
        for (i, st) in self.timeline.iter().enumerate() {
            if st.ordinal as usize != i {
                return bad(format!("timeline ordinal {} at position {i}", st.ordinal));
            }
        }
        if self.nodes.windows(2).any(|w| w[0].node_id >= w[1].node_id) {
            return bad("node ids are not unique and sorted".into());
        }
        if self.edges.windows(2).any(|w| w[0].edge_id >= w[1].edge_id) {
            return bad("edge ids are not unique and sorted".into());
        }
        for n in &self.nodes {
            match (n.kind, n.anchor) {
                (NodeKind::Temporal, None) => {}
                (NodeKind::Temporal, Some(_)) => return bad(format!("temporal node {} has an anchor", n.node_id)),
                (_, None) => return bad(format!("node {} has no anchor", n.node_id)),
                (_, Some(a)) => {
                    if n.facets.is_empty() || n.facets[0].anchor != a {
                        return bad(format!("node {} primary facet does not carry its anchor", n.node_id));
                    }
                    if let Some(f) = n.facets.iter().find(|f| f.anchor as usize >= t) {
                        return bad(format!("facet {} anchored at {} beyond timeline", f.facet_id, f.anchor));
                    }
                }
            }
        }
        for e in &self.edges {
            if e.anchor as usize >= t {
                return bad(format!("edge {} anchored at {} beyond timeline", e.edge_id, e.anchor));
            }
            if e.subject_id == e.object_id {
                return bad(format!("edge {} is reflexive", e.edge_id));
            }
            for id in [&e.subject_id, &e.object_id] {
                match self.node(id) {
                    Some(n) if n.kind != NodeKind::Temporal => {}
                    _ => return bad(format!("edge {} endpoint {id} does not resolve", e.edge_id)),
                }
            }
        }
        for id in &self.background_ids {
            if self.node(id).map(|n| n.kind) != Some(NodeKind::Background) {
                return bad(format!("background id {id} does not resolve"));
            }
        }
        Ok(())
    }

    /// Canonical serialization: sorted keys, pretty-printed, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("graph serializes");
        let mut text = serde_json::to_string_pretty(&sorted(value)).expect("value serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let value: Value = serde_json::from_str(text).map_err(|e| GraphError::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        let version = value
            .get("version")
            .and_then(Value::as_str)
            .ok_or_else(|| GraphError::Parse { offset: 0, message: "missing string field `version`".into() })?;
        let major: Option<u64> = version.split('.').next().and_then(|m| m.parse().ok());
        if major != Some(SUPPORTED_MAJOR) {
            return Err(GraphError::Version { found: version.to_string(), supported: SUPPORTED_MAJOR });
        }
        let graph: DiegeticGraph = serde_json::from_value(value)
            .map_err(|e| GraphError::Parse { offset: 0, message: e.to_string() })?;
        graph.check_integrity()?;
        Ok(graph)
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        fs::write(path, self.to_canonical_json())
            .map_err(|source| GraphError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let text = fs::read_to_string(path)
            .map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }
}

pub fn save_graph(graph: &DiegeticGraph, path: &Path) -> Result<(), GraphError> {
    graph.save(path)
}

pub fn load_graph(path: &Path) -> Result<DiegeticGraph, GraphError> {
    DiegeticGraph::load(path)
}

fn sorted(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let ordered: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sorted(v))).collect();
            Value::Object(ordered.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

/// serde_json reports 1-based line and byte column; convert to a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{EntityRecord, EventRecord, RelationRecord, Span};

    fn span(id: &str) -> Span {
        Span { span_id: id.into(), chapter_index: 0, text: "x".into(), char_range: (0, 1) }
    }

    fn entity(name: &str, t: Ordinal, desc: &str) -> EntityRecord {
        EntityRecord { name: name.into(), kind: EntityKind::Character, description: desc.into(), span_id: "s".into(), story_time: t }
    }

    fn relation(s: &str, o: &str, t: Ordinal) -> RelationRecord {
        RelationRecord { subject: s.into(), object: o.into(), description: format!("{s} meets {o}"), span_id: "s".into(), story_time: t, extra_arguments: vec![] }
    }

    fn bundle() -> ExtractionBundle {
        ExtractionBundle {
            spans: vec![span("s")],
            entities: vec![entity("Captain Nemo", 0, "commander"), entity("Professor Aronnax", 1, "naturalist")],
            relations: vec![relation("Captain Nemo", "Professor Aronnax", 1)],
            timeline: (0..3).map(|i| StoryTime::new(i, format!("T{i}"))).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn three_times_two_entities_one_edge() {
        let g = build_graph(&bundle()).unwrap();
        let temporal = g.nodes.iter().filter(|n| n.kind == NodeKind::Temporal).count();
        let entities = g.nodes.iter().filter(|n| n.kind == NodeKind::Entity).count();
        assert_eq!((temporal, entities, g.edges.len()), (3, 2, 1));
        assert!(g.nodes.iter().filter(|n| n.kind != NodeKind::Temporal).all(|n| n.anchor.is_some()));
        assert_eq!(g.node("entity:professor-aronnax").unwrap().anchor, Some(1));
        assert_eq!(g.edges[0].anchor, 1);
    }

    #[test]
    fn no_relations_no_edges() {
        let mut b = bundle();
        b.relations.clear();
        assert!(build_graph(&b).unwrap().edges.is_empty());
    }

    #[test]
    fn dangling_relation_fails() {
        let mut b = bundle();
        b.relations.push(relation("Captain Nemo", "Ned Land", 2));
        let err = build_graph(&b).unwrap_err();
        assert!(err.to_string().contains("relations[1]"), "{err}");
    }

    #[test]
    fn duplicate_timeline_ordinal_fails() {
        let mut b = bundle();
        b.timeline.push(StoryTime::new(2, "again"));
        assert!(matches!(build_graph(&b), Err(GraphError::InvalidBundle(_))));
    }

    #[test]
    fn later_mentions_become_facets() {
        let mut b = bundle();
        b.entities.push(entity("Captain Nemo", 2, "avenger of his family"));
        b.entities.push(entity("Captain Nemo", 0, "commander"));
        let g = build_graph(&b).unwrap();
        let nemo = g.node("entity:captain-nemo").unwrap();
        assert_eq!(nemo.facets.len(), 2);
        assert_eq!(nemo.anchor, Some(0));
        assert_eq!(nemo.facets[1].anchor, 2);

        let at1 = g.facts_at("entity:captain-nemo", 1).unwrap();
        let facets: Vec<&str> = at1.iter().filter(|f| f.kind == FactKind::Facet).map(|f| f.id.as_str()).collect();
        assert_eq!(facets, vec!["entity:captain-nemo#0"]);
        let all = g.facts_at("entity:captain-nemo", 2).unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn events_link_participants() {
        let mut b = bundle();
        b.events.push(EventRecord {
            title: "The dinner".into(),
            summary: "Nemo hosts the professor".into(),
            participants: vec!["Captain Nemo".into(), "Professor Aronnax".into()],
            story_time: 2,
            span_id: "s".into(),
        });
        let g = build_graph(&b).unwrap();
        assert_eq!(g.edges.len(), 3);
        assert!(g.edges.iter().filter(|e| e.object_id == "event:the-dinner").all(|e| e.anchor == 2));
    }

    #[test]
    fn entity_kind_is_the_majority_vote() {
        use EntityKind::*;
        assert_eq!(majority_kind(&[Location, Object, Object]), Some(Object));
        assert_eq!(majority_kind(&[Location, Object]), Some(Location));
        assert_eq!(majority_kind(&[]), None);
    }

    #[test]
    fn unknown_node_is_an_error() {
        let g = build_graph(&bundle()).unwrap();
        assert!(matches!(g.facts_at("entity:gandalf", 0), Err(GraphError::UnknownNode(_))));
    }

    #[test]
    fn slug_collisions_get_suffixes() {
        let mut b = bundle();
        b.entities.push(entity("Captain  Nemo", 0, "typo"));
        let g = build_graph(&b).unwrap();
        assert!(g.node("entity:captain-nemo-2").is_some());
    }

    #[test]
    fn byte_offsets() {
        assert_eq!(byte_offset("ab\ncd", 2, 2), 4);
        let err = DiegeticGraph::from_json("{\"version\": \"1.0\",\n  \"nodes\": [").unwrap_err();
        match err {
            GraphError::Parse { offset, .. } => assert!(offset >= 29, "offset {offset}"),
            other => panic!("{other:?}"),
        }
    }
}
