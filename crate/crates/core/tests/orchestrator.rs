mod common;

use common::{backends, engine, full_run, garbage_first, offline};
use mles_core::model::{EventBody, RunLedger};
use mles_core::orchestrator::{
    replay, Checkpoint, CheckpointError, Engine, HaltReason, RunError,
};
use mles_core::{OperatorKind, TaskKind};

#[test]
fn one_generation_issues_sixteen_queries() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(offline(TaskKind::LunarLander, 2000), dir.path());
    let s = e.run_generation().unwrap();
    let t = s.total();
    assert_eq!(t.requested, 16);
    assert_eq!(s.queries_used, 16);
    assert_eq!((t.parsed, t.evaluated), (16, 16));
    assert_eq!(s.resets_used, 16 * 5);
    assert!(t.requested >= t.parsed && t.parsed >= t.evaluated && t.evaluated >= t.admitted);
    let order: Vec<_> = s.operators.iter().map(|c| c.operator.unwrap()).collect();
    assert_eq!(order, [OperatorKind::E1, OperatorKind::E2, OperatorKind::M1M, OperatorKind::M2M]);
    assert!(s.operators.iter().all(|c| c.requested == 4));
}

#[test]
fn parse_failures_cost_queries_but_not_resets() {
    let dir = tempfile::tempdir().unwrap();
    let (config, b) = garbage_first(TaskKind::LunarLander, 2000, 2);
    let mut e = Engine::create(config, dir.path(), b).unwrap();
    let s = e.run_generation().unwrap();
    let t = s.total();
    assert_eq!(t.requested, 16);
    assert_eq!(t.parse_failures, 2);
    assert_eq!(t.evaluated, t.requested - 2);
    assert_eq!(s.queries_used, 16);
    assert_eq!(s.resets_used, 14 * 5);
    let failures = e
        .ledger()
        .events()
        .iter()
        .filter(|ev| matches!(ev.body, EventBody::ParseFailure { .. }))
        .count();
    assert_eq!(failures, 2);
}

#[test]
fn short_query_budget_stops_mid_generation() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(offline(TaskKind::LunarLander, 19), dir.path());
    assert_eq!(e.run_generation().unwrap().total().requested, 16);
    assert!(e.state().halted.is_none());
    let s = e.run_generation().unwrap();
    assert_eq!(s.total().requested, 3);
    assert_eq!(s.total().evaluated, 3);
    assert_eq!(e.state().halted, Some(HaltReason::QueryBudgetExhausted));
    assert_eq!(e.state().budget.queries_used, 19);
    assert!(matches!(e.run_generation(), Err(RunError::BudgetExhausted(_))));
}

#[test]
fn reset_budget_can_halt_first() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = offline(TaskKind::CarRacing, 2000);
    config.budgets.resets = Some(4 * 10);
    let mut e = engine(config, dir.path());
    let s = e.run_generation().unwrap();
    assert_eq!(s.total().evaluated, 10);
    assert_eq!(e.state().budget.resets_used, 40);
    assert_eq!(e.state().halted, Some(HaltReason::ResetBudgetExhausted));
    // Offspring that could not be evaluated still consumed their query.
    assert_eq!(e.state().budget.queries_used, 16);
}

#[test]
fn sixty_four_queries_make_four_generations() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(offline(TaskKind::LunarLander, 64), dir.path());
    let state = e.run_search().unwrap();
    assert_eq!(state.generation, 4);
    assert_eq!(state.budget.queries_used, 64);
    for g in 0..=4 {
        assert!(Checkpoint::path(dir.path(), g).exists(), "gen {g}");
    }
}

#[test]
fn identical_configs_give_identical_ledgers() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let la = full_run(offline(TaskKind::CarRacing, 48), a.path());
    let lb = full_run(offline(TaskKind::CarRacing, 48), b.path());
    assert_eq!(la, lb);

    let mut other = offline(TaskKind::CarRacing, 48);
    other.run.seed = 1;
    let c = tempfile::tempdir().unwrap();
    assert_ne!(full_run(other, c.path()), la);
}

#[test]
fn resume_mid_run_matches_uninterrupted() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = offline(TaskKind::LunarLander, 64);
    let uninterrupted = full_run(config.clone(), a.path());

    full_run(config.clone(), b.path());
    let cp = Checkpoint::path(b.path(), 2);
    let mut e = Engine::resume(b.path(), Some(&cp), backends(&config)).unwrap();
    assert_eq!(e.state().generation, 2);
    let final_pool = e.run_search().unwrap().pool.clone();
    drop(e);
    assert_eq!(std::fs::read_to_string(b.path().join("ledger.jsonl")).unwrap(), uninterrupted);

    let ledger = RunLedger::load(&a.path().join("ledger.jsonl")).unwrap();
    assert_eq!(replay(&ledger, &config).unwrap().pool, final_pool);
}

#[test]
fn resume_with_nothing_left_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let config = offline(TaskKind::LunarLander, 32);
    let ledger = full_run(config.clone(), dir.path());
    let cp = Checkpoint::load(&Checkpoint::latest(dir.path()).unwrap()).unwrap();
    let mut e = Engine::resume(dir.path(), None, backends(&config)).unwrap();
    let state = e.run_search().unwrap().clone();
    assert_eq!(state.generation, cp.generation);
    assert_eq!(state.pool, cp.pool);
    assert_eq!(state.budget, cp.budget);
    assert_eq!(state.halted, cp.halted);
    drop(e);
    assert_eq!(std::fs::read_to_string(dir.path().join("ledger.jsonl")).unwrap(), ledger);
}

#[test]
fn tampered_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = offline(TaskKind::LunarLander, 32);
    full_run(config.clone(), dir.path());
    let path = Checkpoint::path(dir.path(), 1);
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\"queries_used\": 16", "\"queries_used\": 15", 1);
    assert_ne!(tampered, text);
    std::fs::write(&path, tampered).unwrap();
    let err = Engine::resume(dir.path(), Some(&path), backends(&config)).unwrap_err();
    assert!(matches!(err, RunError::Checkpoint(CheckpointError::CorruptCheckpoint(_))), "{err}");
}

#[test]
fn edited_ledger_fails_replay_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = offline(TaskKind::LunarLander, 32);
    full_run(config.clone(), dir.path());
    let ledger_path = dir.path().join("ledger.jsonl");
    let text = std::fs::read_to_string(&ledger_path).unwrap();
    let edited = text.replacen("\"resets\":5", "\"resets\":4", 1);
    assert_ne!(edited, text);
    std::fs::write(&ledger_path, edited).unwrap();
    assert!(Engine::resume(dir.path(), None, backends(&config)).is_err());
}

#[test]
fn budgets_hold_at_every_event_and_parents_were_members() {
    let dir = tempfile::tempdir().unwrap();
    let config = offline(TaskKind::LunarLander, 96);
    full_run(config.clone(), dir.path());
    let ledger = RunLedger::load(&dir.path().join("ledger.jsonl")).unwrap();
    // Replay checks caps after every event and parent membership at selection.
    let replayed = replay(&ledger, &config).unwrap();
    assert_eq!(replayed.budget.queries_used, 96);

    let mut best = f64::NEG_INFINITY;
    for ev in ledger.events() {
        if let EventBody::GenerationCompleted { summary } = &ev.body {
            let b = summary.best_score.unwrap();
            assert!(b >= best);
            best = b;
        }
    }
}

#[test]
fn run_dir_with_a_ledger_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = offline(TaskKind::LunarLander, 16);
    full_run(config.clone(), dir.path());
    let err = Engine::create(config.clone(), dir.path(), backends(&config)).unwrap_err();
    assert!(matches!(err, RunError::RunDirInUse(_)));
}

#[test]
fn two_stage_operator_budgets_descriptions() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = offline(TaskKind::LunarLander, 2000);
    config.operators.enabled = vec![OperatorKind::M1MTwoStage, OperatorKind::M1T];
    config.operators.offspring_per_operator = 2;
    config.operators.ibe_max_images = Some(2);
    let mut e = engine(config, dir.path());
    let s = e.run_generation().unwrap();
    assert_eq!(s.describe_queries, 2 * 2);
    assert_eq!(s.total().requested, 4);
    assert_eq!(s.queries_used, 4 + 4);
    let described = e
        .ledger()
        .events()
        .iter()
        .filter(|ev| matches!(ev.body, EventBody::EvidenceDescribed { queries: 2, .. }))
        .count();
    assert_eq!(described, 2);
}
