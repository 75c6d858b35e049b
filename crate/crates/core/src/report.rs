//! Reports derived from the ledger alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{EventBody, IndividualId, OperatorKind, PolicyIndividual, RunLedger};
use crate::orchestrator::HaltReason;

pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const LINEAGE_DOT_FILE: &str = "lineage.dot";
pub const LINEAGE_JSON_FILE: &str = "lineage.json";
pub const SUMMARY_FILE: &str = "summary.json";

const EXCERPT_CHARS: usize = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub generation: u32,
    pub cumulative_resets: u64,
    pub best_score: f64,
}

/// Best score after each generation against cumulative resets. Generations
/// that spent no resets add no point.
pub fn convergence(ledger: &RunLedger) -> Vec<ConvergencePoint> {
    let mut points: Vec<ConvergencePoint> = Vec::new();
    for event in ledger.events() {
        if let EventBody::GenerationCompleted { summary } = &event.body {
            let Some(best) = summary.best_score else { continue };
            if points.last().is_some_and(|p| summary.resets_used <= p.cumulative_resets) {
                continue;
            }
            points.push(ConvergencePoint {
                generation: summary.generation,
                cumulative_resets: summary.resets_used,
                best_score: best,
            });
        }
    }
    points
}

pub fn convergence_csv(points: &[ConvergencePoint]) -> String {
    let mut out = String::from("generation,cumulative_resets,best_score\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.generation, p.cumulative_resets, p.best_score);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageNode {
    pub id: IndividualId,
    pub generation: u32,
    pub score: f64,
    pub thought: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub parent: IndividualId,
    pub child: IndividualId,
    pub operator: OperatorKind,
}

/// Ancestry of every individual that was ever admitted to the pool.
/// Candidates that never made it in are left out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LineageExport {
    pub nodes: Vec<LineageNode>,
    pub edges: Vec<LineageEdge>,
}

fn excerpt(text: &str) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= EXCERPT_CHARS {
        flat
    } else {
        flat.chars().take(EXCERPT_CHARS).collect()
    }
}

fn individuals(ledger: &RunLedger) -> BTreeMap<IndividualId, &PolicyIndividual> {
    ledger
        .events()
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::SeedEvaluated { individual } | EventBody::CandidateEvaluated { individual, .. } => {
                Some((individual.id.clone(), individual))
            }
            _ => None,
        })
        .collect()
}

fn final_pool(ledger: &RunLedger) -> Option<&[IndividualId]> {
    ledger.events().iter().rev().find_map(|e| match &e.body {
        EventBody::Admission { pool_ids, .. } => Some(pool_ids.as_slice()),
        _ => None,
    })
}

pub fn lineage(ledger: &RunLedger) -> LineageExport {
    let all = individuals(ledger);
    let admitted: BTreeSet<&IndividualId> = ledger
        .events()
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::Admission { pool_ids, .. } => Some(pool_ids.iter()),
            _ => None,
        })
        .flatten()
        .collect();
    let mut export = LineageExport::default();
    for (id, ind) in &all {
        if !admitted.contains(id) {
            continue;
        }
        export.nodes.push(LineageNode {
            id: id.clone(),
            generation: ind.origin.generation,
            score: ind.score(),
            thought: excerpt(&ind.thought),
        });
        if let Some(op) = ind.origin.operator {
            for parent in &ind.origin.parent_ids {
                export.edges.push(LineageEdge {
                    parent: parent.clone(),
                    child: id.clone(),
                    operator: op,
                });
            }
        }
    }
    export
}

impl LineageExport {
    /// Ancestors of `id`, nearest first (breadth-first).
    pub fn ancestors(&self, id: &IndividualId) -> Vec<IndividualId> {
        let mut seen = BTreeSet::new();
        let mut order = Vec::new();
        let mut frontier = vec![id.clone()];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for child in &frontier {
                for e in self.edges.iter().filter(|e| &e.child == child) {
                    if seen.insert(e.parent.clone()) {
                        order.push(e.parent.clone());
                        next.push(e.parent.clone());
                    }
                }
            }
            frontier = next;
        }
        order
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph lineage {\n  rankdir=LR;\n  node [shape=box, fontsize=10];\n");
        for n in &self.nodes {
            let label = format!("{}\\ngen {} | score {:.4}\\n{}", n.id, n.generation, n.score, n.thought);
            let _ = writeln!(out, "  \"{}\" [label=\"{}\"];", n.id, label.replace('"', "\\\""));
        }
        for e in &self.edges {
            let _ = writeln!(out, "  \"{}\" -> \"{}\" [label=\"{}\"];", e.parent, e.child, e.operator);
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPolicy {
    pub id: IndividualId,
    pub score: f64,
    pub thought: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub generations: u32,
    pub queries_used: u64,
    pub resets_used: u64,
    pub seed_resets: u64,
    pub pool_ids: Vec<IndividualId>,
    pub best: Option<BestPolicy>,
    pub halted: Option<HaltReason>,
}

pub fn summary(ledger: &RunLedger) -> RunSummary {
    let all = individuals(ledger);
    let pool_ids = final_pool(ledger).map(<[_]>::to_vec).unwrap_or_default();
    let best = pool_ids.first().and_then(|id| all.get(id)).map(|b| BestPolicy {
        id: b.id.clone(),
        score: b.score(),
        thought: b.thought.clone(),
        code: b.code.clone(),
    });
    let mut s = RunSummary {
        generations: 0,
        queries_used: 0,
        resets_used: 0,
        seed_resets: 0,
        pool_ids,
        best,
        halted: None,
    };
    for event in ledger.events() {
        match &event.body {
            EventBody::GenerationCompleted { summary } => {
                s.generations = summary.generation;
                s.queries_used = summary.queries_used;
                s.resets_used = summary.resets_used;
            }
            EventBody::SeedEvaluated { individual } => {
                s.seed_resets += individual.metrics.as_ref().map_or(0, |m| m.resets_used);
            }
            EventBody::Halted { reason } => s.halted = Some(reason.clone()),
            _ => {}
        }
    }
    s
}

/// Writes every report into `dir`.
pub fn write_reports(dir: &Path, ledger: &RunLedger) -> std::io::Result<()> {
    std::fs::write(dir.join(CONVERGENCE_FILE), convergence_csv(&convergence(ledger)))?;
    let lineage = lineage(ledger);
    std::fs::write(dir.join(LINEAGE_DOT_FILE), lineage.to_dot())?;
    let mut json = serde_json::to_string_pretty(&lineage).expect("lineage serializes");
    json.push('\n');
    std::fs::write(dir.join(LINEAGE_JSON_FILE), json)?;
    let mut json = serde_json::to_string_pretty(&summary(ledger)).expect("summary serializes");
    json.push('\n');
    std::fs::write(dir.join(SUMMARY_FILE), json)
}
