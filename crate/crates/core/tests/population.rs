mod common;

use common::{engine, offline};
use mles_core::eval::StubEvaluator;
use mles_core::model::EventBody;
use mles_core::orchestrator::{Engine, RunError};
use mles_core::operators::TaskSpec;
use mles_core::{IndividualId, TaskKind};

fn template() -> String {
    TaskSpec::builtin(TaskKind::LunarLander).code_template
}

fn padded(extra: usize) -> String {
    format!("{}# {}\n", template(), "p".repeat(extra))
}

fn seeded(seeds: Vec<String>, admit_failed: bool, dir: &std::path::Path) -> Result<Engine, RunError> {
    let mut config = offline(TaskKind::LunarLander, 16);
    config.task.seed_policies = seeds;
    config.evaluator.admit_failed = admit_failed;
    let mut e = engine(config, dir);
    e.initialize_population().map(|_| e)
}

#[test]
fn template_seed_alone() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(offline(TaskKind::LunarLander, 16), dir.path());
    e.initialize_population().unwrap();
    let pool = &e.state().pool;
    assert_eq!(pool.len(), 1);
    let seed = &pool.members()[0];
    assert_eq!(seed.origin.generation, 0);
    assert!(seed.origin.parent_ids.is_empty());
    assert_eq!(seed.code, template());
    assert_eq!(e.state().generation, 0);
    assert_eq!(e.state().seed_resets, 5);
    assert_eq!(e.state().budget.resets_used, 0);
}

#[test]
fn crashing_seed_is_floor_scored_or_dropped() {
    let crasher = template().replace("    return", "    raise ValueError()\n    return");
    let seeds = vec![padded(10), crasher, padded(20)];

    let dir = tempfile::tempdir().unwrap();
    let e = seeded(seeds.clone(), true, dir.path()).unwrap();
    let pool = &e.state().pool;
    assert_eq!(pool.len(), 3);
    let last = pool.members().last().unwrap();
    assert_eq!(last.id, IndividualId::new(0, 1));
    assert!(last.failed());
    assert_eq!(last.score(), TaskKind::LunarLander.default_failure_score());

    let dir = tempfile::tempdir().unwrap();
    let e = seeded(seeds, false, dir.path()).unwrap();
    assert_eq!(e.state().pool.ids(), [IndividualId::new(0, 2), IndividualId::new(0, 0)]);
}

#[test]
fn twenty_seeds_keep_the_best_sixteen() {
    let seeds: Vec<String> = (0..20).map(|i| padded(37 * i % 101)).collect();
    let dir = tempfile::tempdir().unwrap();
    let e = seeded(seeds.clone(), true, dir.path()).unwrap();

    // Oracle: score each seed directly, stable sort, slice.
    let stub = StubEvaluator::default();
    let mut ranked: Vec<(usize, f64)> = seeds.iter().map(|c| stub.score(c)).enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let expected: Vec<_> = ranked[..16].iter().map(|(i, _)| IndividualId::new(0, *i as u32)).collect();
    assert_eq!(e.state().pool.ids(), expected);
}

#[test]
fn every_seed_failing_is_an_error() {
    let crasher = template().replace("    return", "    raise ValueError()\n    return");
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(seeded(vec![crasher], true, dir.path()), Err(RunError::AllSeedsFailed)));
}

#[test]
fn seed_without_entry_point_is_rejected_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let e = seeded(vec!["x = 1\n".into(), template()], true, dir.path()).unwrap();
    assert_eq!(e.state().pool.ids(), [IndividualId::new(0, 1)]);
    assert!(e
        .ledger()
        .events()
        .iter()
        .any(|ev| matches!(ev.body, EventBody::SeedRejected { index: 0, .. })));
}

#[test]
fn discovered_policies_seed_and_parse() {
    use mles_core::operators::parse_response;
    use mles_core::OperatorKind;

    let fixtures = [
        (TaskKind::LunarLander, include_str!("../resources/fixtures/lunar_lander_discovered.py")),
        (TaskKind::CarRacing, include_str!("../resources/fixtures/car_racing_discovered.py")),
    ];
    for (task, code) in fixtures {
        let reply = format!("'It drifts.' [Gains too low.] {{Stronger corrections.}}\n```python\n{code}```\n");
        let parsed = parse_response(OperatorKind::M1M, &reply, "choose_action").unwrap();
        assert_eq!(parsed.code.trim_end(), code.trim_end(), "{task}");

        let dir = tempfile::tempdir().unwrap();
        let mut config = offline(task, 16);
        config.task.seed_policies = vec![TaskSpec::builtin(task).code_template, code.to_string()];
        let mut e = engine(config, dir.path());
        e.initialize_population().unwrap();
        assert_eq!(e.state().pool.len(), 2, "{task}");
    }
}
