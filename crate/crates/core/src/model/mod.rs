//! Domain types shared across the engine.

mod artifact;
mod fingerprint;
pub mod ledger;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use artifact::{content_hash_of, ArtifactError, ArtifactStore};
pub use fingerprint::{fingerprint, normalize_code, Fingerprint};
pub use ledger::{EventBody, LedgerError, LedgerEvent, RunLedger};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("policy code is empty")]
    EmptyCode,
    #[error("policy code must define `{entry_point}` exactly once, found {found} definitions")]
    EntryPoint { entry_point: String, found: usize },
    #[error("evolved individual {0} has no parents")]
    MissingParents(IndividualId),
    #[error("seed individual {0} must not have parents")]
    UnexpectedParents(IndividualId),
}

/// Control task an individual is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LunarLander,
    CarRacing,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::LunarLander => "lunar_lander",
            TaskKind::CarRacing => "car_racing",
        }
    }

    /// Score given to policies that crash or time out.
    pub fn default_failure_score(self) -> f64 {
        match self {
            TaskKind::LunarLander => -1.0,
            TaskKind::CarRacing => 0.0,
        }
    }

    /// The image evidence kind the evaluator produces for this task.
    pub fn image_evidence(self) -> IbeKind {
        match self {
            TaskKind::LunarLander => IbeKind::FrameStackImage,
            TaskKind::CarRacing => IbeKind::TrajectoryMapImage,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lunar_lander" => Ok(TaskKind::LunarLander),
            "car_racing" => Ok(TaskKind::CarRacing),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// Name of an evolutionary operator.
///
/// E1/E2 explore from several parents without evidence. The M family
/// modifies a single parent; the variants differ in which behavioral
/// evidence they attach and whether the prompt asks for an explicit
/// description of that evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    E1,
    E2,
    M1,
    #[serde(rename = "M1_M")]
    M1M,
    #[serde(rename = "M1_M_NOINSTR")]
    M1MNoInstr,
    #[serde(rename = "M1_T")]
    M1T,
    #[serde(rename = "M1_M_TWOSTAGE")]
    M1MTwoStage,
    #[serde(rename = "M2_M")]
    M2M,
}

/// Which kind of behavioral evidence an operator consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceUse {
    None,
    Image,
    Text,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 8] = [
        OperatorKind::E1,
        OperatorKind::E2,
        OperatorKind::M1,
        OperatorKind::M1M,
        OperatorKind::M1MNoInstr,
        OperatorKind::M1T,
        OperatorKind::M1MTwoStage,
        OperatorKind::M2M,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::E1 => "E1",
            OperatorKind::E2 => "E2",
            OperatorKind::M1 => "M1",
            OperatorKind::M1M => "M1_M",
            OperatorKind::M1MNoInstr => "M1_M_NOINSTR",
            OperatorKind::M1T => "M1_T",
            OperatorKind::M1MTwoStage => "M1_M_TWOSTAGE",
            OperatorKind::M2M => "M2_M",
        }
    }

    pub fn is_exploration(self) -> bool {
        matches!(self, OperatorKind::E1 | OperatorKind::E2)
    }

    /// Parent count given the configured number of parents `m`.
    pub fn arity(self, m: usize) -> usize {
        if self.is_exploration() {
            m
        } else {
            1
        }
    }

    pub fn uses_ibe(self) -> EvidenceUse {
        match self {
            OperatorKind::E1 | OperatorKind::E2 | OperatorKind::M1 => EvidenceUse::None,
            OperatorKind::M1T => EvidenceUse::Text,
            OperatorKind::M1M
            | OperatorKind::M1MNoInstr
            | OperatorKind::M1MTwoStage
            | OperatorKind::M2M => EvidenceUse::Image,
        }
    }

    /// Whether the prompt asks for a quoted description and analysis of the
    /// execution result.
    pub fn instructs_analysis(self) -> bool {
        matches!(
            self,
            OperatorKind::M1M | OperatorKind::M1T | OperatorKind::M1MTwoStage | OperatorKind::M2M
        )
    }

    pub fn two_stage(self) -> bool {
        self == OperatorKind::M1MTwoStage
    }

    /// Responses must carry a `'...'` description span.
    pub fn requires_description(self) -> bool {
        self.instructs_analysis()
    }

    /// Responses must carry a `[...]` analysis span (every M-family template
    /// asks for one in its first step).
    pub fn requires_analysis(self) -> bool {
        !self.is_exploration()
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OperatorKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| format!("unknown operator `{s}`"))
    }
}

/// Content-independent identifier: generation plus a per-generation counter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndividualId(String);

impl IndividualId {
    pub fn new(generation: u32, counter: u32) -> Self {
        IndividualId(format!("g{generation:04}-{counter:04}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for IndividualId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskOutcome {
    LunarLander {
        /// Engine usage, non-negative.
        fuel: f64,
        success: bool,
    },
    CarRacing {
        /// Percent of track tiles visited, in [0, 100].
        completion: f64,
    },
}

impl TaskOutcome {
    pub fn task(&self) -> TaskKind {
        match self {
            TaskOutcome::LunarLander { .. } => TaskKind::LunarLander,
            TaskOutcome::CarRacing { .. } => TaskKind::CarRacing,
        }
    }
}

/// Outcome of one episode on one evaluation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub instance_id: String,
    pub episode_reward: f64,
    pub steps: u64,
    #[serde(flatten)]
    pub outcome: TaskOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantitativeMetrics {
    pub aggregate_score: f64,
    pub per_instance: Vec<InstanceMetrics>,
    pub resets_used: u64,
    /// Set when the policy errored or timed out; the score is then the
    /// configured failure floor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IbeKind {
    FrameStackImage,
    TrajectoryMapImage,
    TextStateTrace,
}

impl IbeKind {
    pub fn media_type(self) -> MediaType {
        match self {
            IbeKind::TextStateTrace => MediaType::TextPlain,
            _ => MediaType::ImagePng,
        }
    }

    pub fn is_image(self) -> bool {
        self.media_type() == MediaType::ImagePng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MediaType {
    #[serde(rename = "image/png")]
    ImagePng,
    #[serde(rename = "text/plain")]
    TextPlain,
}

impl MediaType {
    pub fn extension(self) -> &'static str {
        match self {
            MediaType::ImagePng => "png",
            MediaType::TextPlain => "txt",
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            MediaType::ImagePng => "image/png",
            MediaType::TextPlain => "text/plain",
        }
    }
}

/// Reference to a stored behavioral-evidence artifact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IbeArtifactRef {
    pub kind: IbeKind,
    pub instance_id: String,
    /// Run-directory relative path, e.g. `artifacts/<sha256>.png`.
    pub content_ref: String,
    pub media_type: MediaType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub parent_ids: Vec<IndividualId>,
    /// `None` for seeded (initial population) individuals.
    pub operator: Option<OperatorKind>,
    pub generation: u32,
    pub llm_response_hash: Option<String>,
}

impl LineageRecord {
    pub fn seed() -> Self {
        LineageRecord {
            parent_ids: Vec::new(),
            operator: None,
            generation: 0,
            llm_response_hash: None,
        }
    }
}

/// The evolved unit: code, rationale, metrics and behavioral evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyIndividual {
    pub id: IndividualId,
    pub code: String,
    pub thought: String,
    pub metrics: Option<QuantitativeMetrics>,
    pub ibe: Vec<IbeArtifactRef>,
    pub origin: LineageRecord,
    pub fingerprint: Fingerprint,
}

impl PolicyIndividual {
    /// Builds an unevaluated individual, checking the code defines
    /// `entry_point` exactly once and the lineage is consistent.
    pub fn new(
        id: IndividualId,
        code: impl Into<String>,
        thought: impl Into<String>,
        origin: LineageRecord,
        entry_point: &str,
    ) -> Result<Self, ModelError> {
        let code = code.into();
        let found = count_definitions(&code, entry_point);
        if found != 1 {
            return Err(ModelError::EntryPoint {
                entry_point: entry_point.to_string(),
                found,
            });
        }
        match (origin.operator, origin.parent_ids.is_empty()) {
            (Some(_), true) => return Err(ModelError::MissingParents(id)),
            (None, false) => return Err(ModelError::UnexpectedParents(id)),
            _ => {}
        }
        let fingerprint = fingerprint(&code)?;
        Ok(PolicyIndividual {
            id,
            code,
            thought: thought.into(),
            metrics: None,
            ibe: Vec::new(),
            origin,
            fingerprint,
        })
    }

    pub fn with_evaluation(mut self, metrics: QuantitativeMetrics, ibe: Vec<IbeArtifactRef>) -> Self {
        self.metrics = Some(metrics);
        self.ibe = ibe;
        self
    }

    pub fn is_evaluated(&self) -> bool {
        self.metrics.is_some()
    }

    /// Aggregate score, or negative infinity when unevaluated or NaN.
    pub fn score(&self) -> f64 {
        match &self.metrics {
            Some(m) if !m.aggregate_score.is_nan() => m.aggregate_score,
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn failed(&self) -> bool {
        self.metrics.as_ref().is_some_and(|m| m.failure.is_some())
    }
}

/// Number of top-level or nested `def <entry_point>(` lines in `code`.
pub fn count_definitions(code: &str, entry_point: &str) -> usize {
    let blank = |c: char| c == ' ' || c == '\t';
    code.split('\n')
        .filter(|line| {
            let Some(rest) = line.trim_start_matches(blank).strip_prefix("def") else {
                return false;
            };
            let name = rest.trim_start_matches(blank);
            name.len() < rest.len()
                && name
                    .strip_prefix(entry_point)
                    .is_some_and(|tail| tail.trim_start_matches(blank).starts_with('('))
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CODE: &str = "def choose_action(s, last_action, s_pre):\n    return 0\n";

    #[test]
    fn operator_table() {
        use OperatorKind::*;
        for op in [E1, E2] {
            assert_eq!(op.arity(2), 2);
            assert_eq!(op.arity(3), 3);
            assert_eq!(op.uses_ibe(), EvidenceUse::None);
        }
        for op in [M1, M1M, M1MNoInstr, M1T, M1MTwoStage, M2M] {
            assert_eq!(op.arity(2), 1);
        }
        assert!(M1M.instructs_analysis() && M1M.uses_ibe() == EvidenceUse::Image);
        assert!(!M1MNoInstr.instructs_analysis() && M1MNoInstr.uses_ibe() == EvidenceUse::Image);
        assert!(M1T.instructs_analysis() && M1T.uses_ibe() == EvidenceUse::Text);
        assert!(M1MTwoStage.two_stage());
        assert_eq!(M1.uses_ibe(), EvidenceUse::None);
        assert!(!M1.instructs_analysis());
    }

    #[test]
    fn operator_names_round_trip() {
        for op in OperatorKind::ALL {
            assert_eq!(op.name().parse::<OperatorKind>().unwrap(), op);
            let json = serde_json::to_string(&op).unwrap();
            assert_eq!(json, format!("\"{}\"", op.name()));
        }
        assert!("M3".parse::<OperatorKind>().is_err());
    }

    #[test]
    fn individual_requires_single_entry_point() {
        let id = IndividualId::new(0, 0);
        assert!(PolicyIndividual::new(id.clone(), CODE, "t", LineageRecord::seed(), "choose_action").is_ok());
        let twice = format!("{CODE}{CODE}");
        assert_eq!(
            PolicyIndividual::new(id.clone(), twice, "t", LineageRecord::seed(), "choose_action").unwrap_err(),
            ModelError::EntryPoint { entry_point: "choose_action".into(), found: 2 }
        );
        let none = "def other():\n    return 0\n";
        assert!(PolicyIndividual::new(id, none, "t", LineageRecord::seed(), "choose_action").is_err());
    }

    #[test]
    fn lineage_consistency() {
        let id = IndividualId::new(1, 0);
        let orphan = LineageRecord {
            parent_ids: vec![],
            operator: Some(OperatorKind::E1),
            generation: 1,
            llm_response_hash: None,
        };
        assert_eq!(
            PolicyIndividual::new(id.clone(), CODE, "t", orphan, "choose_action").unwrap_err(),
            ModelError::MissingParents(id)
        );
    }

    #[test]
    fn instance_metrics_serialize_flat() {
        let m = InstanceMetrics {
            instance_id: "seed-3".into(),
            episode_reward: 12.5,
            steps: 400,
            outcome: TaskOutcome::LunarLander { fuel: 20.0, success: true },
        };
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["task"], "lunar_lander");
        assert_eq!(v["fuel"], 20.0);
        let back: InstanceMetrics = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ids_sort_by_generation() {
        assert!(IndividualId::new(2, 0) > IndividualId::new(1, 15));
        assert_eq!(IndividualId::new(3, 7).as_str(), "g0003-0007");
    }
}
