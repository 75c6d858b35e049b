//! Evolutionary operators: prompt rendering, response parsing and the
//! operator registry.

mod parse;
mod task;
pub mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use parse::{parse_response, ParseError, ParsedCandidate};
pub use task::{ActionSpace, TaskSpec};

use crate::gateway::{BudgetLedger, Gateway, GatewayError};
use crate::model::{EvidenceUse, IbeArtifactRef, OperatorKind, PolicyIndividual};
use template::{Fill, Template};

#[derive(Debug, Error, PartialEq)]
pub enum OperatorError {
    #[error("{operator} expects {expected} parents, got {got}")]
    ArityMismatch {
        operator: OperatorKind,
        expected: usize,
        got: usize,
    },
    #[error("{0} requires behavioral evidence but none was supplied")]
    MissingIbe(OperatorKind),
    #[error("{operator} cannot use the supplied evidence: {detail}")]
    EvidenceMismatch {
        operator: OperatorKind,
        detail: String,
    },
    #[error("operator `{0}` is not registered")]
    Unknown(String),
    #[error(transparent)]
    Template(#[from] template::TemplateError),
}

/// Operator name plus its configured parent count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorId {
    pub kind: OperatorKind,
    pub arity: usize,
}

impl OperatorId {
    /// `m` is the configured number of parents for multi-parent operators.
    pub fn new(kind: OperatorKind, m: usize) -> Self {
        OperatorId {
            kind,
            arity: kind.arity(m),
        }
    }
}

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Text(String),
    Image(IbeArtifactRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundlePurpose {
    /// Ask for an offspring policy.
    Generate,
    /// First stage of a two-stage operator: describe one evidence image.
    Describe,
}

/// Data that travels with a bundle but is never sent to a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub entry_point: String,
    pub parent_codes: Vec<String>,
    pub code_template: String,
}

/// One multimodal few-shot prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub operator: OperatorKind,
    pub purpose: BundlePurpose,
    pub segments: Vec<Segment>,
    pub context: PromptContext,
}

impl PromptBundle {
    /// Concatenated text segments.
    pub fn text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(t.as_str()),
                Segment::Image(_) => None,
            })
            .collect()
    }

    pub fn images(&self) -> impl Iterator<Item = &IbeArtifactRef> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Image(r) => Some(r),
            Segment::Text(_) => None,
        })
    }

    pub fn has_images(&self) -> bool {
        self.images().next().is_some()
    }

    /// Hash over what a model would see: purpose, operator and segments.
    /// Image segments contribute their content-addressed reference.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}|{}|", self.purpose, self.operator.name()));
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => {
                    h.update(format!("T{}:", t.len()));
                    h.update(t.as_bytes());
                }
                Segment::Image(r) => {
                    h.update(format!("I{}:", r.content_ref.len()));
                    h.update(r.content_ref.as_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Behavioral evidence handed to a modification operator.
#[derive(Debug, Clone, PartialEq)]
pub enum Evidence {
    Image(IbeArtifactRef),
    /// A text trace, or the first-stage description of an image.
    Text {
        source: IbeArtifactRef,
        body: String,
    },
}

impl Evidence {
    pub fn source(&self) -> &IbeArtifactRef {
        match self {
            Evidence::Image(r) => r,
            Evidence::Text { source, .. } => source,
        }
    }
}

fn with_newline(code: &str) -> String {
    if code.ends_with('\n') {
        code.to_string()
    } else {
        format!("{code}\n")
    }
}

fn check_evidence(op: OperatorKind, evidence: &[Evidence]) -> Result<(), OperatorError> {
    let mismatch = |detail: &str| OperatorError::EvidenceMismatch {
        operator: op,
        detail: detail.to_string(),
    };
    match op.uses_ibe() {
        EvidenceUse::None if !evidence.is_empty() => Err(mismatch("operator takes no evidence")),
        EvidenceUse::None => Ok(()),
        _ if evidence.is_empty() => Err(OperatorError::MissingIbe(op)),
        EvidenceUse::Image if op.two_stage() => {
            if evidence.iter().all(|e| matches!(e, Evidence::Text { .. })) {
                Ok(())
            } else {
                Err(mismatch("two-stage prompts carry image descriptions, not images"))
            }
        }
        EvidenceUse::Image => {
            if evidence.iter().all(|e| matches!(e, Evidence::Image(r) if r.kind.is_image())) {
                Ok(())
            } else {
                Err(mismatch("expected image evidence"))
            }
        }
        EvidenceUse::Text => {
            if evidence.iter().all(|e| matches!(e, Evidence::Text { .. })) {
                Ok(())
            } else {
                Err(mismatch("expected text evidence"))
            }
        }
    }
}

fn evidence_fill(evidence: &[Evidence]) -> Fill {
    if evidence.iter().all(|e| matches!(e, Evidence::Image(_))) {
        Fill::Images(evidence.iter().map(|e| e.source().clone()).collect())
    } else {
        let mut text = String::new();
        for e in evidence {
            if let Evidence::Text { source, body } = e {
                text.push_str(&format!("Instance {}:\n", source.instance_id));
                text.push_str(&with_newline(body));
            }
        }
        Fill::Text(text)
    }
}

/// Instantiates the operator's prompt template for `parents` and
/// `evidence`. Parent code is embedded verbatim.
pub fn render_prompt(
    op: OperatorId,
    task: &TaskSpec,
    parents: &[&PolicyIndividual],
    evidence: &[Evidence],
) -> Result<PromptBundle, OperatorError> {
    if parents.len() != op.arity {
        return Err(OperatorError::ArityMismatch {
            operator: op.kind,
            expected: op.arity,
            got: parents.len(),
        });
    }
    check_evidence(op.kind, evidence)?;

    let text = |s: &str| Fill::Text(s.to_string());
    let mut values: BTreeMap<&str, Fill> = BTreeMap::new();
    values.insert("task_description", text(&task.description));
    values.insert("code_template", text(task.code_template.trim_end()));

    let source = match op.kind {
        OperatorKind::E1 | OperatorKind::E2 => {
            let parent = Template::parse(template::PARENT)?;
            let mut block = String::new();
            for (i, p) in parents.iter().enumerate() {
                let index = (i + 1).to_string();
                block.push_str(&parent.render_text(&BTreeMap::from([
                    ("index", text(&index)),
                    ("thought", text(&p.thought)),
                    ("code", Fill::Text(with_newline(&p.code))),
                ]))?);
            }
            values.insert("parent_count", text(&parents.len().to_string()));
            values.insert("parents", Fill::Text(block));
            if op.kind == OperatorKind::E1 {
                template::E1
            } else {
                template::E2
            }
        }
        kind => {
            let parent = parents[0];
            values.insert("thought", text(&parent.thought));
            values.insert("code", Fill::Text(with_newline(&parent.code)));
            let lead = if kind.instructs_analysis() {
                template::ANALYSIS_LEAD
            } else {
                template::PLAIN_LEAD
            };
            values.insert("analysis_lead", text(lead));
            values.insert("evidence", evidence_fill(evidence));
            values.insert("evidence_block", text(""));
            if kind == OperatorKind::M2M {
                template::M2_M
            } else {
                template::M1_M
            }
        }
    };

    let rendered = if op.kind.is_exploration() || op.kind.uses_ibe() == EvidenceUse::None {
        Template::parse(source)?.render(&values)?
    } else {
        // Expanded in place so image segments land right after the sentence
        // that introduces them.
        let expanded = source.replace("{{evidence_block}}", template::EVIDENCE_BLOCK);
        Template::parse(&expanded)?.render(&values)?
    };

    Ok(PromptBundle {
        operator: op.kind,
        purpose: BundlePurpose::Generate,
        segments: rendered,
        context: PromptContext {
            entry_point: task.entry_point.clone(),
            parent_codes: parents.iter().map(|p| p.code.clone()).collect(),
            code_template: task.code_template.clone(),
        },
    })
}

/// Bundle asking a model to describe one evidence image.
pub fn describe_bundle(op: OperatorKind, image: &IbeArtifactRef, task: &TaskSpec) -> PromptBundle {
    PromptBundle {
        operator: op,
        purpose: BundlePurpose::Describe,
        segments: vec![
            Segment::Text(template::DESCRIBE.to_string()),
            Segment::Image(image.clone()),
        ],
        context: PromptContext {
            entry_point: task.entry_point.clone(),
            parent_codes: Vec::new(),
            code_template: String::new(),
        },
    }
}

#[derive(Debug, Error)]
pub enum DescribeError {
    #[error("{0} requires behavioral evidence but none was supplied")]
    MissingIbe(OperatorKind),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// First stage of a two-stage operator: one description query per image,
/// each budgeted as a full query. Returns text evidence to embed in place
/// of the images.
pub fn stage_one_describe(
    gateway: &Gateway,
    budget: &BudgetLedger,
    op: OperatorKind,
    task: &TaskSpec,
    images: &[IbeArtifactRef],
) -> Result<Vec<Evidence>, DescribeError> {
    if images.is_empty() {
        return Err(DescribeError::MissingIbe(op));
    }
    let reservation = budget.reserve_queries(images.len() as u64).map_err(GatewayError::from)?;
    let mut evidence = Vec::with_capacity(images.len());
    for (i, image) in images.iter().enumerate() {
        let bundle = describe_bundle(op, image, task);
        let body = gateway.complete_reserved(&bundle, reservation.query_index(i as u64), 0)?;
        evidence.push(Evidence::Text {
            source: image.clone(),
            body,
        });
    }
    Ok(evidence)
}

/// A named, interchangeable variation operator.
pub trait EvolutionOperator: Send + Sync {
    fn id(&self) -> OperatorId;

    fn name(&self) -> &'static str {
        self.id().kind.name()
    }

    fn render(
        &self,
        task: &TaskSpec,
        parents: &[&PolicyIndividual],
        evidence: &[Evidence],
    ) -> Result<PromptBundle, OperatorError>;

    fn parse(&self, raw: &str, task: &TaskSpec) -> Result<ParsedCandidate, ParseError> {
        parse_response(self.id().kind, raw, &task.entry_point)
    }
}

/// E1/E2: multi-parent, evidence-free exploration.
#[derive(Debug, Clone)]
pub struct ExplorationOperator {
    id: OperatorId,
}

impl ExplorationOperator {
    pub fn new(kind: OperatorKind, m: usize) -> Self {
        assert!(kind.is_exploration(), "{kind} is not an exploration operator");
        ExplorationOperator {
            id: OperatorId::new(kind, m),
        }
    }
}

impl EvolutionOperator for ExplorationOperator {
    fn id(&self) -> OperatorId {
        self.id
    }

    fn render(
        &self,
        task: &TaskSpec,
        parents: &[&PolicyIndividual],
        evidence: &[Evidence],
    ) -> Result<PromptBundle, OperatorError> {
        render_prompt(self.id, task, parents, evidence)
    }
}

/// The M family: single-parent modification, optionally evidence-driven.
#[derive(Debug, Clone)]
pub struct ModificationOperator {
    id: OperatorId,
}

impl ModificationOperator {
    pub fn new(kind: OperatorKind) -> Self {
        assert!(!kind.is_exploration(), "{kind} is not a modification operator");
        ModificationOperator {
            id: OperatorId::new(kind, 1),
        }
    }
}

impl EvolutionOperator for ModificationOperator {
    fn id(&self) -> OperatorId {
        self.id
    }

    fn render(
        &self,
        task: &TaskSpec,
        parents: &[&PolicyIndividual],
        evidence: &[Evidence],
    ) -> Result<PromptBundle, OperatorError> {
        render_prompt(self.id, task, parents, evidence)
    }
}

/// Operators by name.
#[derive(Clone, Default)]
pub struct OperatorRegistry {
    operators: BTreeMap<String, Arc<dyn EvolutionOperator>>,
}

impl OperatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every built-in operator, with `m` parents for E1/E2.
    pub fn standard(m: usize) -> Self {
        let mut registry = Self::new();
        for kind in OperatorKind::ALL {
            if kind.is_exploration() {
                registry.register(Arc::new(ExplorationOperator::new(kind, m)));
            } else {
                registry.register(Arc::new(ModificationOperator::new(kind)));
            }
        }
        registry
    }

    /// Registers `op` under its name, replacing any previous entry.
    pub fn register(&mut self, op: Arc<dyn EvolutionOperator>) {
        self.operators.insert(op.name().to_string(), op);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn EvolutionOperator>> {
        self.operators.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.operators.keys().map(String::as_str)
    }

    /// Resolves `kinds` in order.
    pub fn resolve(&self, kinds: &[OperatorKind]) -> Result<Vec<Arc<dyn EvolutionOperator>>, OperatorError> {
        kinds
            .iter()
            .map(|k| self.get(k.name()).ok_or_else(|| OperatorError::Unknown(k.name().to_string())))
            .collect()
    }
}

impl fmt::Debug for OperatorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.operators.keys()).finish()
    }
}
