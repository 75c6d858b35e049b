use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::model::IbeKind;

const CODE: &str = "def choose_action(s, last_action, s_pre):\n    return 0\n";
const SEEDS: [u64; 5] = [100, 101, 102, 103, 104];

fn stub() -> LoopbackEvaluator {
    LoopbackEvaluator::new(Box::new(StubEvaluator::new(40)))
}

fn request(code: &str) -> EvalRequest {
    EvalRequest::evaluate(1, TaskKind::LunarLander, code, &SEEDS, &[IbeKind::FrameStackImage], Limits::default())
}

/// Replies with a fixed line, counting calls.
struct Canned {
    line: String,
    calls: Arc<AtomicUsize>,
    handshake: Handshake,
}

impl Canned {
    fn new(line: impl Into<String>) -> Self {
        Canned {
            line: line.into(),
            calls: Arc::new(AtomicUsize::new(0)),
            handshake: StubEvaluator::default().handshake(),
        }
    }
}

impl EvaluatorHandle for Canned {
    fn handshake(&self) -> &Handshake {
        &self.handshake
    }
    fn exchange(&mut self, _: &EvalRequest, _: Duration) -> Result<String, HandleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.line.clone())
    }
}

#[test]
fn stub_evaluation_counts_resets() {
    let budget = BudgetLedger::new(10, 100);
    let response = evaluate_policy(&mut stub(), &request(CODE), &budget).unwrap();
    assert_eq!(response.status, ResponseStatus::Ok);
    let report = response.report.unwrap();
    assert_eq!(report.per_instance.len(), 5);
    let expected = StubEvaluator::new(40).score(CODE);
    assert!((report.aggregate_score - expected).abs() < 1e-12);
    assert_eq!(response.ibe_payloads.len(), 5);
    assert_eq!(budget.snapshot().resets_used, 5);
}

#[test]
fn policy_error_still_costs_resets() {
    let budget = BudgetLedger::new(10, 100);
    let code = "def choose_action(s, last_action, s_pre):\n    raise ValueError(3)\n";
    let response = evaluate_policy(&mut stub(), &request(code), &budget).unwrap();
    assert_eq!(response.status, ResponseStatus::PolicyError);
    assert!(response.report.is_none());
    assert_eq!(budget.snapshot().resets_used, 5);
}

#[test]
fn insufficient_resets_fail_before_dispatch() {
    let budget = BudgetLedger::new(10, 3);
    let mut canned = Canned::new("");
    let calls = canned.calls.clone();
    let err = evaluate_policy(&mut canned, &request(CODE), &budget).unwrap_err();
    assert!(matches!(err, EvalError::BudgetExhausted(_)));
    assert_eq!(calls.load(Ordering::SeqCst), 0);
    assert_eq!(budget.snapshot().resets_used, 0);
}

#[test]
fn lying_aggregate_is_rejected() {
    let mut honest = stub();
    let line = honest.exchange(&request(CODE), Duration::from_secs(1)).unwrap();
    let mut frame = Frame::from_line(&line).unwrap();
    if let Frame::Response(r) = &mut frame {
        r.report.as_mut().unwrap().aggregate_score += 0.01;
    }
    let budget = BudgetLedger::new(10, 100);
    let err = evaluate_policy(&mut Canned::new(frame.to_line()), &request(CODE), &budget).unwrap_err();
    assert!(matches!(err, EvalError::AggregateMismatch { .. }));
    assert_eq!(budget.snapshot().resets_used, 5);
}

#[test]
fn inconsistent_responses_become_protocol_errors() {
    let mut honest = stub();
    let line = honest.exchange(&request(CODE), Duration::from_secs(1)).unwrap();
    let Frame::Response(good) = Frame::from_line(&line).unwrap() else { panic!() };

    let mut missing = good.clone();
    missing.report = None;
    let mut wrong_id = good.clone();
    wrong_id.request_id = 99;
    let mut short = good.clone();
    short.report.as_mut().unwrap().per_instance.pop();

    for bad in [missing, wrong_id, short] {
        let budget = BudgetLedger::new(10, 100);
        let r = evaluate_policy(&mut Canned::new(Frame::Response(bad).to_line()), &request(CODE), &budget).unwrap();
        assert_eq!(r.status, ResponseStatus::ProtocolError);
    }
}

proptest! {
    #[test]
    fn arbitrary_bytes_yield_protocol_error(line in ".*") {
        let budget = BudgetLedger::new(10, 100);
        let r = evaluate_policy(&mut Canned::new(line), &request(CODE), &budget).unwrap();
        prop_assert_eq!(r.status, ResponseStatus::ProtocolError);
        prop_assert_eq!(budget.snapshot().resets_used, 5);
    }
}

#[test]
fn ensemble_of_one_matches_single() {
    let budget = BudgetLedger::new(10, 100);
    let single = evaluate_policy(&mut stub(), &request(CODE), &budget).unwrap().report.unwrap();
    let ens = ensemble_evaluate(
        &mut stub(),
        TaskKind::LunarLander,
        vec![CODE.to_string()],
        &SEEDS,
        Limits::default(),
        &budget,
    )
    .unwrap();
    assert_eq!(ens.aggregate_score, single.aggregate_score);
    for (s, m) in ens.per_seed.iter().zip(&single.per_instance) {
        assert_eq!(s.metrics, *m);
    }
    let mean = ens.per_seed.iter().map(|s| s.score).sum::<f64>() / ens.per_seed.len() as f64;
    assert_eq!(ens.mean, mean);
}

#[test]
fn ensemble_needs_capability() {
    let mut h = LoopbackEvaluator::new(Box::new(StubEvaluator::default().without_ensemble()));
    let budget = BudgetLedger::new(10, 100);
    let err = ensemble_evaluate(&mut h, TaskKind::CarRacing, vec![CODE.into()], &[0], Limits::default(), &budget)
        .unwrap_err();
    assert_eq!(err, EvalError::Unsupported(CAP_ENSEMBLE.into()));
    assert_eq!(budget.snapshot().resets_used, 0);
}

#[test]
fn serve_speaks_line_protocol() {
    let mut input = Frame::Request(request(CODE)).to_line();
    input.push_str("not json\n");
    input.push_str(&Frame::Request(EvalRequest::shutdown(2)).to_line());
    input.push_str(&Frame::Request(request(CODE)).to_line());
    let mut out = Vec::new();
    serve(&mut StubEvaluator::new(40), input.as_bytes(), &mut out).unwrap();
    let lines: Vec<_> = String::from_utf8(out).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3, "handshake, one answer, one protocol error, then stop");
    assert!(matches!(Frame::from_line(&lines[0]).unwrap(), Frame::Handshake(h) if h.protocol == PROTOCOL));
    assert!(matches!(Frame::from_line(&lines[1]).unwrap(), Frame::Response(r) if r.status == ResponseStatus::Ok));
    assert!(
        matches!(Frame::from_line(&lines[2]).unwrap(), Frame::Response(r) if r.status == ResponseStatus::ProtocolError)
    );
}

#[test]
fn payloads_land_in_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let budget = BudgetLedger::new(10, 100);
    let mut req = request(CODE);
    req.ibe_kinds = vec![IbeKind::TextStateTrace, IbeKind::FrameStackImage];
    let r = evaluate_policy(&mut stub(), &req, &budget).unwrap();
    let refs = store_payloads(&store, &r.ibe_payloads).unwrap();
    assert_eq!(refs.len(), 10);
    assert_eq!(refs[0].instance_id, "100");
    assert_eq!(refs[0].kind, IbeKind::FrameStackImage);
    assert!(refs.iter().all(|r| store.contains(&r.content_ref)));
}

#[test]
fn registry_builds_stub_and_rejects_unknown() {
    let reg = EvaluatorRegistry::standard();
    let cfg = EvaluatorConfig {
        backend: "stub".into(),
        ..EvaluatorConfig::default()
    };
    assert!(reg.open(&cfg).unwrap().handshake().supports(CAP_EVALUATE));
    let cfg = EvaluatorConfig {
        backend: "nope".into(),
        ..EvaluatorConfig::default()
    };
    assert!(reg.open(&cfg).is_err());
    let cfg = EvaluatorConfig {
        command: vec!["/nonexistent/evaluator".into()],
        ..EvaluatorConfig::default()
    };
    assert!(matches!(reg.open(&cfg), Err(HandleError::Spawn(_))));
}
