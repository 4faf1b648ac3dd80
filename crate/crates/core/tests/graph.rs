mod common;

use std::collections::BTreeSet;
use std::fs;

use living_novel::graph::{build_graph, load_graph, save_graph, DiegeticGraph, FactKind, GraphError, NodeKind};
use living_novel::ingest::{EntityKind, ExtractionBundle, RelationRecord};
use proptest::prelude::*;

fn nemo_edges_at(g: &DiegeticGraph, t: u32) -> Vec<String> {
    // oracle: linear scan over the raw edge list
    g.edges
        .iter()
        .filter(|e| (e.subject_id == "entity:captain-nemo" || e.object_id == "entity:captain-nemo") && e.anchor <= t)
        .map(|e| e.edge_id.clone())
        .collect()
}

#[test]
fn small_fixture_shape() {
    let g = common::small_graph();
    let count = |k: NodeKind| g.nodes.iter().filter(|n| n.kind == k).count();
    assert_eq!(count(NodeKind::Temporal), 3);
    assert_eq!(count(NodeKind::Entity), 5);
    assert_eq!(count(NodeKind::Event), 1);
    assert_eq!(count(NodeKind::Background), 1);
    // three relations plus two participation edges
    assert_eq!(g.edges.len(), 5);
    assert_eq!(g.background_ids, vec!["background:the-sea".to_string()]);

    let temporal = g.node("time:00001").unwrap();
    assert_eq!(temporal.name, "The Torres Strait");
    assert_eq!(temporal.anchor, None);

    let nemo = g.node("entity:captain-nemo").unwrap();
    assert_eq!(nemo.anchor, Some(0));
    assert_eq!(nemo.entity_kind, Some(EntityKind::Character));
    let anchors: Vec<u32> = nemo.facets.iter().map(|f| f.anchor).collect();
    assert_eq!(anchors, vec![0, 2]);
    assert_eq!(g.node("background:the-sea").unwrap().anchor, Some(0));
}

#[test]
fn nemo_facts_at_one() {
    let g = common::small_graph();
    let facts = g.facts_at("entity:captain-nemo", 1).unwrap();
    let edges: Vec<String> = facts.iter().filter(|f| f.kind == FactKind::Edge).map(|f| f.id.clone()).collect();
    assert_eq!(edges.len(), 2);
    assert_eq!(edges, nemo_edges_at(&g, 1));
    // the t=2 facet is a spoiler at t=1
    let facets: Vec<&str> = facts.iter().filter(|f| f.kind == FactKind::Facet).map(|f| f.id.as_str()).collect();
    assert_eq!(facets, vec!["entity:captain-nemo#0"]);
}

#[test]
fn facts_at_last_ordinal_is_everything() {
    let g = common::small_graph();
    let nemo = g.node("entity:captain-nemo").unwrap();
    let facts = g.facts_at(&nemo.node_id, 2).unwrap();
    assert_eq!(facts.len(), nemo.facets.len() + nemo_edges_at(&g, 2).len());
    assert!(matches!(g.facts_at("entity:nobody", 2), Err(GraphError::UnknownNode(_))));
}

#[test]
fn zero_relations_build_without_edges() {
    let mut b = common::small_bundle();
    b.relations.clear();
    b.events.clear();
    let g = build_graph(&b).unwrap();
    assert!(g.edges.is_empty());
}

#[test]
fn dangling_relation_is_rejected() {
    let mut b = common::small_bundle();
    b.relations.push(RelationRecord {
        subject: "Captain Nemo".into(),
        object: "Captain Ahab".into(),
        description: "rivals".into(),
        span_id: "s0".into(),
        story_time: 0,
        extra_arguments: Vec::new(),
    });
    assert!(matches!(build_graph(&b), Err(GraphError::InvalidBundle(_))));
}

#[test]
fn duplicate_timeline_ordinal_is_rejected() {
    let mut b = common::small_bundle();
    b.timeline[2].ordinal = 1;
    assert!(build_graph(&b).is_err());
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let g = common::small_graph();
    save_graph(&g, &path).unwrap();
    assert_eq!(load_graph(&path).unwrap(), g);
}

#[test]
fn truncated_file_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let text = common::small_graph().to_canonical_json();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    match load_graph(&path) {
        Err(GraphError::Parse { offset, .. }) => assert!(offset <= text.len() / 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn future_major_version_is_rejected() {
    let mut value: serde_json::Value = serde_json::from_str(&common::small_graph().to_canonical_json()).unwrap();
    value["version"] = "99".into();
    match DiegeticGraph::from_json(&value.to_string()) {
        Err(GraphError::Version { found, supported }) => {
            assert_eq!(found, "99");
            assert_eq!(supported, 1);
        }
        other => panic!("expected a version error, got {other:?}"),
    }
    value["version"] = "1.7".into();
    assert!(DiegeticGraph::from_json(&value.to_string()).is_ok());
}

#[test]
fn broken_reference_on_load_is_rejected() {
    let mut value: serde_json::Value = serde_json::from_str(&common::small_graph().to_canonical_json()).unwrap();
    value["edges"][0]["object_id"] = "entity:ghost".into();
    assert!(matches!(DiegeticGraph::from_json(&value.to_string()), Err(GraphError::Integrity(_))));
}

#[test]
fn reparsed_bundle_builds_identical_bytes() {
    let b = common::small_bundle();
    let json = b.to_json();
    let again = ExtractionBundle::from_json(&json).unwrap();
    assert_eq!(build_graph(&b).unwrap().to_canonical_json(), build_graph(&again).unwrap().to_canonical_json());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn every_item_is_anchored_inside_the_timeline(seed in any::<u64>()) {
        let g = common::random_graph(seed, 10);
        let t = g.timeline.len() as u32;
        for n in &g.nodes {
            if n.kind == NodeKind::Temporal {
                prop_assert!(n.anchor.is_none());
                prop_assert!(n.facets.is_empty());
            } else {
                let a = n.anchor.unwrap();
                prop_assert!(a < t);
                prop_assert_eq!(n.facets[0].anchor, a);
                prop_assert!(n.facets.windows(2).all(|w| w[0].anchor <= w[1].anchor));
                prop_assert!(n.facets.iter().all(|f| f.anchor < t));
            }
        }
        prop_assert!(g.edges.iter().all(|e| e.anchor < t && e.subject_id != e.object_id));
        prop_assert!(g.check_integrity().is_ok());
    }

    #[test]
    fn facts_at_is_monotone(seed in any::<u64>()) {
        let g = common::random_graph(seed, 10);
        let t_len = g.timeline.len() as u32;
        for n in g.nodes.iter().filter(|n| n.kind != NodeKind::Temporal) {
            let mut previous: BTreeSet<String> = BTreeSet::new();
            for t in 0..t_len {
                let now: BTreeSet<String> = g.facts_at(&n.node_id, t).unwrap().into_iter().map(|f| f.id).collect();
                prop_assert!(previous.is_subset(&now));
                previous = now;
            }
        }
    }

    #[test]
    fn facts_at_matches_a_linear_scan(seed in any::<u64>(), t in 0u32..10) {
        let g = common::random_graph(seed, 10);
        let t = t.min(g.timeline.len() as u32 - 1);
        for n in g.nodes.iter().filter(|n| n.kind != NodeKind::Temporal) {
            let got: Vec<(u32, String)> = g.facts_at(&n.node_id, t).unwrap().into_iter().map(|f| (f.anchor, f.id)).collect();
            let mut want: Vec<(u32, String)> = n.facets.iter().filter(|f| f.anchor <= t).map(|f| (f.anchor, f.facet_id.clone())).collect();
            for e in &g.edges {
                if (e.subject_id == n.node_id || e.object_id == n.node_id) && e.anchor <= t {
                    want.push((e.anchor, e.edge_id.clone()));
                }
            }
            want.sort();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn build_is_deterministic(seed in any::<u64>()) {
        let b = common::random_bundle(seed, 8);
        prop_assert_eq!(build_graph(&b).unwrap().to_canonical_json(), build_graph(&b.clone()).unwrap().to_canonical_json());
    }

    #[test]
    fn persistence_is_the_identity(seed in any::<u64>()) {
        let g = common::random_graph(seed, 8);
        let back = DiegeticGraph::from_json(&g.to_canonical_json()).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_canonical_json(), g.to_canonical_json());
    }
}
