use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BudgetError {
    #[error("{resource} budget exhausted: requested {requested}, remaining {remaining}")]
    Exhausted {
        resource: &'static str,
        requested: u64,
        remaining: u64,
    },
}

/// Monotone usage counters and their caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCounters {
    pub queries_used: u64,
    pub resets_used: u64,
    pub query_budget: u64,
    pub reset_budget: u64,
}

impl BudgetCounters {
    pub fn new(query_budget: u64, reset_budget: u64) -> Self {
        BudgetCounters {
            queries_used: 0,
            resets_used: 0,
            query_budget,
            reset_budget,
        }
    }

    pub fn remaining_queries(&self) -> u64 {
        self.query_budget.saturating_sub(self.queries_used)
    }

    pub fn remaining_resets(&self) -> u64 {
        self.reset_budget.saturating_sub(self.resets_used)
    }
}

#[derive(Debug)]
struct State {
    counters: BudgetCounters,
    resets_pending: u64,
}

/// Shared reservation point for LLM queries and environment resets.
///
/// Queries are consumed at reservation. Resets are held at reservation and
/// settled with the number actually performed.
#[derive(Debug)]
pub struct BudgetLedger {
    state: Mutex<State>,
}

/// `count` queries starting at global query index `first`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryReservation {
    pub first: u64,
    pub count: u64,
}

impl QueryReservation {
    pub fn query_index(&self, slot: u64) -> u64 {
        debug_assert!(slot < self.count);
        self.first + slot
    }
}

#[derive(Debug, PartialEq, Eq)]
#[must_use = "reset reservations must be settled"]
pub struct ResetReservation {
    held: u64,
}

impl ResetReservation {
    pub fn held(&self) -> u64 {
        self.held
    }
}

impl BudgetLedger {
    pub fn new(query_budget: u64, reset_budget: u64) -> Self {
        Self::from_counters(BudgetCounters::new(query_budget, reset_budget))
    }

    pub fn from_counters(counters: BudgetCounters) -> Self {
        BudgetLedger {
            state: Mutex::new(State {
                counters,
                resets_pending: 0,
            }),
        }
    }

    pub fn snapshot(&self) -> BudgetCounters {
        self.lock().counters
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn reserve_queries(&self, k: u64) -> Result<QueryReservation, BudgetError> {
        let mut state = self.lock();
        let remaining = state.counters.remaining_queries();
        if k > remaining {
            return Err(BudgetError::Exhausted {
                resource: "query",
                requested: k,
                remaining,
            });
        }
        let first = state.counters.queries_used;
        state.counters.queries_used += k;
        Ok(QueryReservation { first, count: k })
    }

    pub fn reserve_resets(&self, n: u64) -> Result<ResetReservation, BudgetError> {
        let mut state = self.lock();
        let remaining = state
            .counters
            .remaining_resets()
            .saturating_sub(state.resets_pending);
        if n > remaining {
            return Err(BudgetError::Exhausted {
                resource: "reset",
                requested: n,
                remaining,
            });
        }
        state.resets_pending += n;
        Ok(ResetReservation { held: n })
    }

    /// Credits `performed` resets (capped at the reservation) and releases
    /// the rest. Returns the credited amount.
    pub fn settle_resets(&self, reservation: ResetReservation, performed: u64) -> u64 {
        let credited = performed.min(reservation.held);
        let mut state = self.lock();
        state.resets_pending -= reservation.held;
        state.counters.resets_used += credited;
        credited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_reservation_consumes() {
        let b = BudgetLedger::new(5, 10);
        let r = b.reserve_queries(3).unwrap();
        assert_eq!((r.first, r.count), (0, 3));
        assert_eq!(b.snapshot().queries_used, 3);
        let err = b.reserve_queries(3).unwrap_err();
        assert_eq!(
            err,
            BudgetError::Exhausted { resource: "query", requested: 3, remaining: 2 }
        );
        assert_eq!(b.snapshot().queries_used, 3);
        assert_eq!(b.reserve_queries(2).unwrap().first, 3);
    }

    #[test]
    fn resets_held_until_settled() {
        let b = BudgetLedger::new(5, 10);
        let a = b.reserve_resets(5).unwrap();
        let c = b.reserve_resets(5).unwrap();
        assert!(b.reserve_resets(1).is_err());
        assert_eq!(b.settle_resets(a, 2), 2);
        assert_eq!(b.settle_resets(c, 9), 5);
        let s = b.snapshot();
        assert_eq!(s.resets_used, 7);
        assert_eq!(s.remaining_resets(), 3);
    }
}
