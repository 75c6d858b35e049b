//! `mles-eval/1`: newline-delimited JSON frames between the engine and an
//! evaluator process.
//!
//! The evaluator writes a handshake frame on startup, then answers each
//! request frame with exactly one response frame. A shutdown request gets
//! no response; the evaluator exits.

use serde::{Deserialize, Serialize};

use crate::model::{IbeKind, InstanceMetrics, MediaType, TaskKind};

pub const PROTOCOL: &str = "mles-eval/1";
pub const CAP_EVALUATE: &str = "evaluate";
pub const CAP_ENSEMBLE: &str = "ensemble_evaluate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Handshake(Handshake),
    Request(EvalRequest),
    Response(EvalResponse),
}

impl Frame {
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("frames serialize");
        line.push('\n');
        line
    }

    pub fn from_line(line: &str) -> Result<Frame, serde_json::Error> {
        serde_json::from_str(line.trim_end())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub tasks: Vec<TaskKind>,
    pub ibe_kinds: Vec<IbeKind>,
    pub capabilities: Vec<String>,
    /// Environment name to version, informational.
    #[serde(default)]
    pub environments: Vec<(String, String)>,
}

impl Handshake {
    pub fn supports(&self, capability: &str) -> bool {
        self.capabilities.iter().any(|c| c == capability)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Evaluate,
    EnsembleEvaluate,
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_steps_per_episode: u64,
    pub wall_clock_seconds: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_steps_per_episode: 1000,
            wall_clock_seconds: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub request_id: u64,
    pub kind: RequestKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub codes: Vec<String>,
    #[serde(default)]
    pub instance_ids: Vec<String>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ibe_kinds: Vec<IbeKind>,
    #[serde(default)]
    pub limits: Limits,
}

impl EvalRequest {
    pub fn evaluate(request_id: u64, task: TaskKind, code: &str, seeds: &[u64], ibe_kinds: &[IbeKind], limits: Limits) -> Self {
        EvalRequest {
            request_id,
            kind: RequestKind::Evaluate,
            task: Some(task),
            code: Some(code.to_string()),
            codes: Vec::new(),
            instance_ids: seeds.iter().map(u64::to_string).collect(),
            seeds: seeds.to_vec(),
            ibe_kinds: ibe_kinds.to_vec(),
            limits,
        }
    }

    pub fn ensemble(request_id: u64, task: TaskKind, codes: Vec<String>, seeds: &[u64], limits: Limits) -> Self {
        EvalRequest {
            request_id,
            kind: RequestKind::EnsembleEvaluate,
            task: Some(task),
            code: None,
            codes,
            instance_ids: seeds.iter().map(u64::to_string).collect(),
            seeds: seeds.to_vec(),
            ibe_kinds: Vec::new(),
            limits,
        }
    }

    pub fn shutdown(request_id: u64) -> Self {
        EvalRequest {
            request_id,
            kind: RequestKind::Shutdown,
            task: None,
            code: None,
            codes: Vec::new(),
            instance_ids: Vec::new(),
            seeds: Vec::new(),
            ibe_kinds: Vec::new(),
            limits: Limits::default(),
        }
    }

    /// Structural checks shared by both ends.
    pub fn validate(&self) -> Result<(), String> {
        if self.kind == RequestKind::Shutdown {
            return Ok(());
        }
        if self.task.is_none() {
            return Err("missing task".into());
        }
        if self.instance_ids.is_empty() {
            return Err("instance_ids is empty".into());
        }
        if self.seeds.len() != self.instance_ids.len() {
            return Err(format!(
                "{} seeds for {} instances",
                self.seeds.len(),
                self.instance_ids.len()
            ));
        }
        if self.limits.max_steps_per_episode == 0 || self.limits.wall_clock_seconds.is_nan() || self.limits.wall_clock_seconds <= 0.0 {
            return Err("limits must be positive".into());
        }
        match self.kind {
            RequestKind::Evaluate if self.code.is_none() => Err("evaluate request without code".into()),
            RequestKind::EnsembleEvaluate if self.codes.is_empty() => {
                Err("ensemble request without codes".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    PolicyError,
    Timeout,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_instance: Vec<InstanceMetrics>,
    pub aggregate_score: f64,
    pub resets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbePayload {
    pub kind: IbeKind,
    pub instance_id: String,
    pub media_type: MediaType,
    pub content_base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub request_id: u64,
    pub status: ResponseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvaluationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_detail: Option<String>,
    #[serde(default)]
    pub resets_performed: u64,
    #[serde(default)]
    pub ibe_payloads: Vec<IbePayload>,
}

impl EvalResponse {
    pub fn failure(request_id: u64, status: ResponseStatus, detail: impl Into<String>, resets: u64) -> Self {
        EvalResponse {
            request_id,
            status,
            report: None,
            error_detail: Some(detail.into()),
            resets_performed: resets,
            ibe_payloads: Vec::new(),
        }
    }
}
