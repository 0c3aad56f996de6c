use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use serde_json::{json, Map, Value};

use eaa_core::analysis::{render_image_plot, Extent, Grid2D};
use eaa_core::beamline::{Scenario, VirtualBeamline};
use eaa_core::context::{Clock, Role, ToolCall};
use eaa_core::engine::{
    parse_offset, run_focusing, spawn_feature_tracking, FocusingParams, FocusingPolicy, LoopConfig, LoopStatus,
    SequenceGuard, Session, FOCUSING_SEQUENCE,
};
use eaa_core::model::{ModelResponse, ScriptedModel};
use eaa_core::runtime::{ParamDecl, Tool, ToolError, ToolOutput, ToolSpec};
use eaa_core::tools::{share, ImageSink};

#[derive(Debug, Clone)]
enum Step {
    Plain,
    Terminate,
    NeedHuman,
    Calls { n: usize, unknown: bool },
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        3 => Just(Step::Plain),
        1 => Just(Step::Terminate),
        1 => Just(Step::NeedHuman),
        4 => (1usize..=2, any::<bool>()).prop_map(|(n, unknown)| Step::Calls { n, unknown }),
    ]
}

fn to_response(i: usize, s: &Step) -> ModelResponse {
    match s {
        Step::Plain => ModelResponse::text(format!("thinking {i}")),
        Step::Terminate => ModelResponse::text(format!("done {i}. TERMINATE")),
        Step::NeedHuman => ModelResponse::text("NEED HUMAN"),
        Step::Calls { n, unknown } => ModelResponse::with_calls(
            format!("calling {i}"),
            (0..*n)
                .map(|j| {
                    let name = if *unknown && j == 0 { "missing" } else { "echo" };
                    ToolCall::new(format!("c{i}_{j}"), name, json!({"text": format!("{i}/{j}")}))
                })
                .collect(),
        ),
    }
}

/// Counts its invocations per tool name.
struct Counter {
    name: String,
    counts: Arc<Mutex<BTreeMap<String, usize>>>,
}

impl Tool for Counter {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new(&self.name, "counts calls", vec![ParamDecl::string("text", "anything").optional()])
    }

    fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
        *self.counts.lock().unwrap().entry(self.name.clone()).or_default() += 1;
        Ok(ToolOutput::text(args.get("text").and_then(Value::as_str).unwrap_or("ok")))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn loop_bounds_and_every_response_recorded_once(steps in prop::collection::vec(step(), 0..16), max_rounds in 1usize..12) {
        let script: Vec<ModelResponse> = steps.iter().enumerate().map(|(i, s)| to_response(i, s)).collect();
        let counts = Arc::new(Mutex::new(BTreeMap::new()));
        let mut session = Session::new("p", Arc::new(ScriptedModel::new(script.clone()))).with_clock(Clock::logical());
        session.registry.register(Box::new(Counter { name: "echo".into(), counts })).unwrap();
        let mut config = LoopConfig::with_prompt("go");
        config.system_prompt = Some("system".into());
        config.max_rounds = max_rounds;
        let out = session.run_loop(&mut config);

        prop_assert!(out.rounds <= max_rounds);
        prop_assert!(out.transcript.len() <= 4 * max_rounds + 2, "{} messages", out.transcript.len());

        let assistants: Vec<_> = out.transcript.messages.iter().filter(|m| m.role == Role::Assistant).collect();
        let completed = out.rounds - usize::from(out.status == LoopStatus::Error);
        prop_assert_eq!(assistants.len(), completed);
        for (m, r) in assistants.iter().zip(&script) {
            prop_assert_eq!(m.text(), r.text.clone());
            prop_assert_eq!(&m.tool_calls, &r.tool_calls);
        }
        // Each call gets exactly one tool message, in call order.
        let calls: Vec<&str> = assistants.iter().flat_map(|m| m.tool_calls.iter().map(|c| c.id.as_str())).collect();
        let results: Vec<&str> = out
            .transcript
            .messages
            .iter()
            .filter_map(|m| m.tool_result.as_ref().map(|r| r.call_id.as_str()))
            .collect();
        prop_assert_eq!(calls, results);
        prop_assert!(out.transcript.messages.windows(2).all(|w| w[0].seq < w[1].seq));
    }

    #[test]
    fn sequence_warnings_never_block_execution(picks in prop::collection::vec(0usize..3, 1..15)) {
        let counts = Arc::new(Mutex::new(BTreeMap::new()));
        let mut script: Vec<ModelResponse> = picks
            .iter()
            .enumerate()
            .map(|(i, &p)| ModelResponse::with_calls("", vec![ToolCall::new(format!("c{i}"), FOCUSING_SEQUENCE[p], json!({}))]))
            .collect();
        script.push(ModelResponse::text("TERMINATE"));
        let mut session = Session::new("g", Arc::new(ScriptedModel::new(script))).with_clock(Clock::logical());
        for name in FOCUSING_SEQUENCE {
            session.registry.register(Box::new(Counter { name: name.into(), counts: counts.clone() })).unwrap();
        }
        let mut config = LoopConfig::with_prompt("go");
        config.expected_sequence = Some(SequenceGuard::new(&FOCUSING_SEQUENCE));
        let out = session.run_loop(&mut config);
        prop_assert_eq!(out.status, LoopStatus::Terminated);

        let mut expected = BTreeMap::new();
        for &p in &picks {
            *expected.entry(FOCUSING_SEQUENCE[p].to_string()).or_insert(0usize) += 1;
        }
        prop_assert_eq!(&*counts.lock().unwrap(), &expected);
        let results: Vec<_> = out.transcript.messages.iter().filter_map(|m| m.tool_result.as_ref()).collect();
        prop_assert_eq!(results.len(), picks.len());
        prop_assert!(results.iter().all(|r| !r.is_error));
    }
}

fn reference_png(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("reference.png");
    let grid = Grid2D::from_fn(16, 16, |x, y| ((x * 7 + y * 3) % 5) as f64);
    render_image_plot(&grid, &Extent::new(0.0, 8.0, 0.0, 8.0), None, "reference", &path).unwrap();
    path
}

#[test]
fn ten_tracking_children_each_add_one_parent_message() {
    let dir = tempfile::tempdir().unwrap();
    let reference = reference_png(dir.path());
    let script: Vec<ModelResponse> = (0..10)
        .map(|i| ModelResponse::text(format!("offset: dx={i}.000, dy=-{i}.000 TERMINATE")))
        .collect();
    let beamline = share(VirtualBeamline::desk());
    let sink = ImageSink::new(dir.path().join("images"));
    let mut parent = Session::new("parent", Arc::new(ScriptedModel::new(script))).with_clock(Clock::logical());
    parent.post_user("start", &[]).unwrap();

    let mut child_seqs = BTreeSet::new();
    let mut child_ids = BTreeSet::new();
    for i in 0..10 {
        let before = parent.context.clone();
        let out = spawn_feature_tracking(&mut parent, &beamline, &sink, reference.clone(), "x_min: 0").unwrap();
        assert_eq!(parent.context.len(), before.len() + 1);
        assert_eq!(&parent.context.messages[..before.len()], &before.messages[..]);
        let summary = parent.context.last().unwrap();
        assert_eq!(summary.seq, out.summary_seq);
        assert_eq!(parse_offset(&summary.text()), Some((i as f64, -(i as f64))));

        let child = &out.outcome.transcript;
        assert!(child_ids.insert(child.session_id.clone()));
        assert_ne!(child.session_id, "parent");
        assert_eq!(out.outcome.status, LoopStatus::Terminated);
        // The child starts from nothing but its own prompt.
        assert_eq!(child.messages[0].role, Role::User);
        assert_eq!(child.messages[0].image_paths().count(), 1);
        for m in &child.messages {
            assert!(child_seqs.insert(m.seq), "seq {} reused", m.seq);
        }
    }
    for m in &parent.context.messages {
        assert!(!child_seqs.contains(&m.seq));
    }
}

fn focusing_transcript(dir: &Path) -> (String, eaa_core::engine::FocusingReport) {
    let scenario = Scenario::desk();
    let beamline = share(VirtualBeamline::new(scenario.clone()).unwrap());
    let sink = ImageSink::new(dir.join("images"));
    let path = dir.join("focusing.jsonl");
    let mut session = Session::new("focus", Arc::new(FocusingPolicy::new(scenario.focusing.clone())))
        .with_clock(Clock::logical())
        .with_transcript(&path);
    let report = run_focusing(&mut session, &beamline, &sink, &FocusingParams::from_scenario(&scenario));
    let text = std::fs::read_to_string(&path).unwrap().replace(&dir.display().to_string(), "<work>");
    (text, report)
}

#[test]
fn focusing_with_a_deterministic_model_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ta, ra) = focusing_transcript(a.path());
    let (tb, rb) = focusing_transcript(b.path());
    assert_eq!(ra, rb);
    assert_eq!(ta, tb);
    let z = ra.final_point.unwrap().z;
    assert!((z + 193.5).abs() <= 0.25, "final z {z}");
}
