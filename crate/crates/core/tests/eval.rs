mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use living_novel::alignment::refusal_phrases;
use living_novel::embed::HashEmbedder;
use living_novel::eval::{
    gate_audit, gate_audit_with, make_rt_suite, make_tt_suite, run_suite, ChatSystem, EvalError, EvalItem,
    EvalSuite, RuleJudge, SuiteKind,
};
use living_novel::graph::DiegeticGraph;
use living_novel::llm::ClientError;
use living_novel::retrieval::{HeuristicAnalyzer, Retriever, ScoredItem};
use living_novel::StoryTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn retriever(g: &DiegeticGraph) -> Retriever {
    Retriever::new(Arc::new(g.clone()), Arc::new(HashEmbedder::default())).unwrap()
}

/// A gate that lets everything through.
fn no_gate(items: Vec<ScoredItem>, _: u32) -> Vec<ScoredItem> {
    items
}

/// A gate off by one in the spoiler direction.
fn off_by_one(items: Vec<ScoredItem>, t: u32) -> Vec<ScoredItem> {
    items.into_iter().filter(|i| i.anchor <= t + 1).collect()
}

fn nautilus_tt(n: usize, seed: u64) -> (DiegeticGraph, EvalSuite) {
    let g = common::nautilus_graph();
    let suite = make_tt_suite(&g, 2, n, seed).unwrap();
    (g, suite)
}

/// `n` random (graph, query, t, k) instances, one single-item suite each.
fn random_instances(n: u64) -> Vec<(DiegeticGraph, EvalSuite, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..n)
        .map(|case| {
            let g = common::random_graph(case, 10);
            let t = rng.random_range(0..g.timeline.len() as u32);
            let k = rng.random_range(0..24);
            let item = EvalItem {
                id: format!("r{case}"),
                question: common::random_query(case),
                t: g.timeline[t as usize].clone(),
                target_anchor: None,
                target_event_id: None,
                target_keywords: Vec::new(),
            };
            (g, EvalSuite { kind: SuiteKind::Rt, items: vec![item] }, k)
        })
        .collect()
}

#[test]
fn tt_suite_has_one_hundred_future_questions() {
    let (g, suite) = nautilus_tt(100, 1);
    assert_eq!(suite.size(), 100);
    suite.validate().unwrap();
    for item in &suite.items {
        assert_eq!(item.t.ordinal, 2);
        let event = g.node(item.target_event_id.as_deref().unwrap()).unwrap();
        assert_eq!(event.anchor, item.target_anchor);
        assert!(event.anchor.unwrap() > 2);
        assert!(item.question.contains(event.name.trim_end_matches(['.', '!', '?'])));
        // keywords come from the event and add something the question lacks
        let description = event.facets.iter().map(|f| f.description.to_lowercase()).collect::<Vec<_>>().join(" ");
        let question = item.question.to_lowercase();
        for k in &item.target_keywords {
            assert!(description.contains(k.as_str()), "{k}");
            assert!(!question.split(|c: char| !c.is_alphanumeric()).any(|w| w == k), "{k}");
        }
    }
    let ids: std::collections::BTreeSet<&str> = suite.items.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(ids.len(), 100);
    assert!(suite.items.iter().filter(|i| !i.target_keywords.is_empty()).count() > 90);
    assert_eq!(make_tt_suite(&g, 2, 100, 1).unwrap(), suite);
}

#[test]
fn tt_suite_needs_future_events() {
    let g = common::small_graph();
    assert!(matches!(make_tt_suite(&g, 2, 10, 0), Err(EvalError::NoFutureEvents(2))));
    assert!(matches!(make_tt_suite(&g, 0, 0, 0), Err(EvalError::EmptySuite)));
    assert!(make_tt_suite(&g, 5, 10, 0).is_err());
}

#[test]
fn gate_audit_finds_no_leaks_on_random_instances_and_the_tt_suite() {
    let mut checked = 0;
    let mut retrieved = 0;
    for (g, suite, k) in random_instances(1000) {
        let report = gate_audit(&retriever(&g), &suite, k, &HeuristicAnalyzer::for_graph(&g)).unwrap();
        assert!(report.violations.is_empty(), "{:?}", report.violations);
        checked += report.items_checked;
        retrieved += report.items_retrieved;
    }
    let (g, suite) = nautilus_tt(100, 3);
    let report = gate_audit(&retriever(&g), &suite, 8, &HeuristicAnalyzer::for_graph(&g)).unwrap();
    assert_eq!(report.items_checked, 100);
    assert!(report.violations.is_empty(), "{:?}", report.violations);
    checked += report.items_checked;
    retrieved += report.items_retrieved;
    assert_eq!(checked, 1100);
    assert!(retrieved > 1000, "the audit must look at real retrievals, saw {retrieved}");
}

#[test]
fn broken_gates_are_caught() {
    let (g, suite) = nautilus_tt(100, 3);
    let r = retriever(&g);
    let analyzer = HeuristicAnalyzer::for_graph(&g);
    let open = gate_audit_with(&r, &suite, 8, &analyzer, no_gate).unwrap();
    assert!(!open.violations.is_empty());
    assert!(open.violations.iter().all(|v| v.anchor > v.t));
    let leaky = gate_audit_with(&r, &suite, 32, &analyzer, off_by_one).unwrap();
    assert!(!leaky.violations.is_empty());
    assert!(leaky.violations.iter().all(|v| v.anchor == v.t + 1));
}

/// Fails, refuses or leaks depending on a hash of the question.
struct Alternating {
    calls: AtomicUsize,
}

impl ChatSystem for Alternating {
    fn label(&self) -> String {
        "alternating".into()
    }
    fn ask(&self, _: &str, _: &StoryTime, question: &str) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let h = question.bytes().fold(0usize, |a, b| a.wrapping_mul(31).wrapping_add(b as usize));
        if h % 3 == 0 {
            return Err(ClientError::Other("backend down".into()));
        }
        Ok(if h % 2 == 0 { refusal_phrases()[0].to_string() } else { format!("Yes, of course. {question}") })
    }
}

#[test]
fn run_suite_is_reproducible_and_aggregates_verdicts() {
    let (_, suite) = nautilus_tt(100, 5);
    let system = Alternating { calls: AtomicUsize::new(0) };
    let a = run_suite(&suite, &system, "Professor Aronnax", &RuleJudge, 4).unwrap();
    let b = run_suite(&suite, &system, "Professor Aronnax", &RuleJudge, 1).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(system.calls.load(Ordering::SeqCst), 200);

    assert_eq!(a.size, 100);
    assert_eq!(a.verdicts.len(), 100);
    let sum: usize = a.verdicts.iter().map(|v| v.verdict as usize).sum();
    assert_eq!(a.correct, sum);
    assert!((a.score - sum as f64).abs() < 1e-12);
    assert!(a.correct > 0 && a.correct < 100);
    let order: Vec<&str> = a.verdicts.iter().map(|v| v.item_id.as_str()).collect();
    let want: Vec<&str> = suite.items.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(order, want);
    // failures from the system are scored 0 with a reason
    for v in a.verdicts.iter().filter(|v| v.rationale.starts_with("system_error")) {
        assert_eq!(v.verdict, 0);
        assert!(v.answer.is_empty());
    }
    assert!(a.verdicts.iter().any(|v| v.rationale.starts_with("system_error")));
}

#[test]
fn rt_suite_round_trips_through_a_file() {
    let suite = make_rt_suite(StoryTime::new(1, "T1"), 100, 9).unwrap();
    suite.validate().unwrap();
    assert!(suite.items.iter().all(|i| i.t.ordinal == 1));
    assert!(suite.items.iter().any(|i| i.question.contains("quicksort")));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rt.json");
    suite.save(&path).unwrap();
    assert_eq!(EvalSuite::load(&path).unwrap(), suite);
}

#[test]
fn tt_items_must_point_to_the_future() {
    let (_, mut suite) = nautilus_tt(3, 0);
    suite.items[1].target_anchor = Some(2);
    assert!(matches!(suite.validate(), Err(EvalError::InvalidSuite(_))));
}
