//! Append-only run ledger. One JSON object per line in `ledger.jsonl`.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Fingerprint, IndividualId, OperatorKind, PolicyIndividual};
use crate::orchestrator::{GenerationSummary, HaltReason};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger sequence gap: expected event #{expected}, got #{got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("ledger line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("ledger io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Everything the engine does that affects pool or budget state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventBody {
    RunStarted {
        config_hash: String,
        root_seed: u64,
    },
    /// A seed policy of the initial population was evaluated. Seed
    /// evaluation resets are tracked apart from the search reset budget.
    SeedEvaluated {
        individual: PolicyIndividual,
    },
    SeedRejected {
        index: usize,
        error: String,
    },
    GenerationStarted {
        generation: u32,
    },
    /// Two-stage operators: one description query per evidence image.
    EvidenceDescribed {
        generation: u32,
        invocation: u32,
        operator: OperatorKind,
        queries: u64,
        description_hashes: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    LlmResponse {
        generation: u32,
        invocation: u32,
        operator: OperatorKind,
        parent_ids: Vec<IndividualId>,
        queries: u64,
        response_hash: String,
    },
    GatewayFailure {
        generation: u32,
        invocation: u32,
        operator: OperatorKind,
        queries: u64,
        error: String,
    },
    InvocationSkipped {
        generation: u32,
        invocation: u32,
        operator: OperatorKind,
        reason: String,
    },
    ParseFailure {
        generation: u32,
        invocation: u32,
        operator: OperatorKind,
        error: String,
    },
    CandidateEvaluated {
        invocation: u32,
        individual: PolicyIndividual,
        resets: u64,
    },
    EvaluationFailed {
        generation: u32,
        invocation: u32,
        operator: OperatorKind,
        error: String,
        resets: u64,
    },
    DuplicateDiscarded {
        id: IndividualId,
        fingerprint: Fingerprint,
        thought: String,
    },
    /// One batch admission. Replaying `admit_offspring` over `candidate_ids`
    /// must yield `pool_ids`.
    Admission {
        generation: u32,
        candidate_ids: Vec<IndividualId>,
        pool_ids: Vec<IndividualId>,
    },
    GenerationCompleted {
        summary: GenerationSummary,
    },
    Halted {
        reason: HaltReason,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLedger {
    events: Vec<LedgerEvent>,
}

impl RunLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn next_seq(&self) -> u64 {
        self.events.len() as u64
    }

    /// Appends `event`, whose sequence number must equal the ledger length.
    pub fn append(&mut self, event: LedgerEvent) -> Result<&LedgerEvent, LedgerError> {
        let expected = self.next_seq();
        if event.seq != expected {
            return Err(LedgerError::SequenceGap {
                expected,
                got: event.seq,
            });
        }
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }

    /// Numbers `body` and appends it.
    pub fn record(&mut self, body: EventBody) -> &LedgerEvent {
        let seq = self.next_seq();
        self.append(LedgerEvent { seq, body })
            .expect("sequence assigned from ledger length")
    }

    pub fn truncate(&mut self, len: usize) {
        self.events.truncate(len);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("ledger events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, LedgerError> {
        let reader = BufReader::new(File::open(path)?);
        let mut ledger = RunLedger::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: LedgerEvent =
                serde_json::from_str(&line).map_err(|source| LedgerError::Malformed {
                    line: i + 1,
                    source,
                })?;
            ledger.append(event)?;
        }
        Ok(ledger)
    }
}

/// Mirrors ledger appends to `ledger.jsonl`, one flushed line per event.
#[derive(Debug)]
pub struct LedgerFile {
    file: File,
}

impl LedgerFile {
    pub fn create(path: &Path) -> Result<Self, LedgerError> {
        let file = File::create(path)?;
        Ok(LedgerFile { file })
    }

    /// Rewrites `path` so it holds exactly `ledger`, then appends from there.
    pub fn rewrite(path: &Path, ledger: &RunLedger) -> Result<Self, LedgerError> {
        let mut file = File::create(path)?;
        file.write_all(ledger.to_jsonl().as_bytes())?;
        file.flush()?;
        drop(file);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(LedgerFile { file })
    }

    pub fn write(&mut self, event: &LedgerEvent) -> Result<(), LedgerError> {
        let mut line = serde_json::to_string(event).expect("ledger events serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn started(seq: u64) -> LedgerEvent {
        LedgerEvent {
            seq,
            body: EventBody::GenerationStarted { generation: seq as u32 },
        }
    }

    #[test]
    fn append_to_empty() {
        let mut ledger = RunLedger::new();
        ledger.append(started(0)).unwrap();
        assert_eq!(ledger.len(), 1);
    }

    #[test]
    fn gap_rejected() {
        let mut ledger = RunLedger::new();
        for i in 0..3 {
            ledger.append(started(i)).unwrap();
        }
        let err = ledger.append(started(5)).unwrap_err();
        assert!(matches!(err, LedgerError::SequenceGap { expected: 3, got: 5 }));
        assert_eq!(ledger.len(), 3);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let mut ledger = RunLedger::new();
        let mut file = LedgerFile::create(&path).unwrap();
        for i in 0..4 {
            let ev = ledger.record(EventBody::GenerationStarted { generation: i }).clone();
            file.write(&ev).unwrap();
        }
        let loaded = RunLedger::load(&path).unwrap();
        assert_eq!(loaded, ledger);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), ledger.to_jsonl());
    }

    #[test]
    fn load_rejects_out_of_order_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let lines = [started(0), started(2)]
            .iter()
            .map(|e| serde_json::to_string(e).unwrap())
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(&path, lines).unwrap();
        assert!(matches!(
            RunLedger::load(&path),
            Err(LedgerError::SequenceGap { expected: 1, got: 2 })
        ));
    }
}
