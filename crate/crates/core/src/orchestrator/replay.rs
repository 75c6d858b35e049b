//! Rebuilds run state from the ledger alone.

use std::collections::BTreeSet;

use thiserror::Error;

use super::{HaltReason, RunConfig};
use crate::gateway::BudgetCounters;
use crate::model::{EventBody, IndividualId, PolicyIndividual, RunLedger};
use crate::pool::{PolicyPool, PoolError};

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("event #{seq}: ledger belongs to config {found}, not {expected}")]
    ConfigMismatch { seq: u64, expected: String, found: String },
    #[error("event #{seq}: admission replay gives {replayed:?}, ledger says {recorded:?}")]
    AdmissionMismatch {
        seq: u64,
        replayed: Vec<IndividualId>,
        recorded: Vec<IndividualId>,
    },
    #[error("event #{seq}: parent {parent} was not in the pool")]
    UnknownParent { seq: u64, parent: IndividualId },
    #[error("event #{seq}: {what} {used} exceeds budget {cap}")]
    OverBudget { seq: u64, what: &'static str, used: u64, cap: u64 },
    #[error("event #{seq}: summary counters disagree with the ledger")]
    SummaryMismatch { seq: u64 },
    #[error("event #{seq}: {source}")]
    Pool { seq: u64, source: PoolError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replayed {
    pub pool: PolicyPool,
    pub budget: BudgetCounters,
    pub seed_resets: u64,
    pub generation: u32,
    pub halted: Option<HaltReason>,
}

/// Re-runs every admission recorded in `ledger` and checks it reproduces
/// the recorded pool, that parents were pool members when selected and that
/// budgets were never exceeded.
pub fn replay(ledger: &RunLedger, config: &RunConfig) -> Result<Replayed, ReplayError> {
    let expected_hash = config.hash();
    let mut pool = PolicyPool::new(config.pool.capacity).map_err(|source| ReplayError::Pool { seq: 0, source })?;
    let mut budget = BudgetCounters::new(config.budgets.queries, config.reset_budget());
    let mut seed_resets = 0;
    let mut generation = 0;
    let mut halted = None;
    let mut pending: Vec<PolicyIndividual> = Vec::new();
    let mut members: BTreeSet<IndividualId> = BTreeSet::new();

    for event in ledger.events() {
        let seq = event.seq;
        match &event.body {
            EventBody::RunStarted { config_hash, .. } => {
                if *config_hash != expected_hash {
                    return Err(ReplayError::ConfigMismatch {
                        seq,
                        expected: expected_hash.clone(),
                        found: config_hash.clone(),
                    });
                }
            }
            EventBody::SeedEvaluated { individual } => {
                seed_resets += individual.metrics.as_ref().map_or(0, |m| m.resets_used);
                pending.push(individual.clone());
            }
            EventBody::GenerationStarted { .. } => pending.clear(),
            EventBody::EvidenceDescribed { queries, .. } | EventBody::GatewayFailure { queries, .. } => {
                budget.queries_used += queries;
            }
            EventBody::LlmResponse { queries, parent_ids, .. } => {
                budget.queries_used += queries;
                if let Some(p) = parent_ids.iter().find(|p| !members.contains(*p)) {
                    return Err(ReplayError::UnknownParent { seq, parent: p.clone() });
                }
            }
            EventBody::CandidateEvaluated { individual, resets, .. } => {
                budget.resets_used += resets;
                pending.push(individual.clone());
            }
            EventBody::EvaluationFailed { resets, .. } => budget.resets_used += resets,
            EventBody::Admission { pool_ids, candidate_ids, .. } => {
                let ids: Vec<_> = pending.iter().map(|c| c.id.clone()).collect();
                if ids != *candidate_ids {
                    return Err(ReplayError::AdmissionMismatch {
                        seq,
                        replayed: ids,
                        recorded: candidate_ids.clone(),
                    });
                }
                pool.admit(std::mem::take(&mut pending), config.evaluator.admit_failed)
                    .map_err(|source| ReplayError::Pool { seq, source })?;
                if pool.ids() != *pool_ids {
                    return Err(ReplayError::AdmissionMismatch {
                        seq,
                        replayed: pool.ids(),
                        recorded: pool_ids.clone(),
                    });
                }
                members = pool_ids.iter().cloned().collect();
            }
            EventBody::GenerationCompleted { summary } => {
                if summary.queries_used != budget.queries_used
                    || summary.resets_used != budget.resets_used
                    || summary.best_score != pool.best_score()
                {
                    return Err(ReplayError::SummaryMismatch { seq });
                }
                generation = summary.generation;
            }
            EventBody::Halted { reason } => halted = Some(reason.clone()),
            EventBody::SeedRejected { .. }
            | EventBody::InvocationSkipped { .. }
            | EventBody::ParseFailure { .. }
            | EventBody::DuplicateDiscarded { .. } => {}
        }
        if budget.queries_used > budget.query_budget {
            return Err(ReplayError::OverBudget {
                seq,
                what: "queries",
                used: budget.queries_used,
                cap: budget.query_budget,
            });
        }
        if budget.resets_used > budget.reset_budget {
            return Err(ReplayError::OverBudget {
                seq,
                what: "resets",
                used: budget.resets_used,
                cap: budget.reset_budget,
            });
        }
    }
    Ok(Replayed {
        pool,
        budget,
        seed_resets,
        generation,
        halted,
    })
}
