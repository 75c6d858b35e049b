//! Engine side of policy evaluation: protocol, evaluator handles, metric
//! aggregation and reset accounting.

mod handle;
pub mod metrics;
pub mod protocol;
mod stub;

use std::collections::BTreeMap;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use handle::{serve, EvalServer, EvaluatorHandle, HandleError, LoopbackEvaluator, SubprocessEvaluator};
pub use metrics::{
    aggregate, aggregate_lander, aggregate_racing, compute_nws, completion_from_tiles, instance_score,
    MetricsError,
};
pub use protocol::{
    EvalRequest, EvalResponse, EvaluationReport, Frame, Handshake, IbePayload, Limits, RequestKind,
    ResponseStatus, CAP_ENSEMBLE, CAP_EVALUATE, PROTOCOL,
};
pub use stub::{StubEvaluator, DEFAULT_TARGET_LEN};

use crate::gateway::{BudgetError, BudgetLedger};
use crate::model::{ArtifactError, ArtifactStore, IbeArtifactRef, InstanceMetrics, TaskKind};

/// Allowance on top of the per-episode wall clock before an evaluator is
/// declared hung.
const GRACE: Duration = Duration::from_secs(10);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    BudgetExhausted(#[from] BudgetError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("evaluator does not support {0}")]
    Unsupported(String),
    #[error("evaluator crashed: {0}")]
    EvaluatorCrashed(String),
    #[error("evaluator timed out after {0:?}")]
    Timeout(Duration),
    #[error("evaluator reported aggregate {reported}, per-instance metrics give {recomputed}")]
    AggregateMismatch { reported: f64, recomputed: f64 },
    #[error("evaluator unavailable: {0}")]
    Unavailable(String),
}

impl From<HandleError> for EvalError {
    fn from(e: HandleError) -> Self {
        match e {
            HandleError::Timeout(d) => EvalError::Timeout(d),
            HandleError::Crashed(s) => EvalError::EvaluatorCrashed(s),
            other => EvalError::Unavailable(other.to_string()),
        }
    }
}

fn deadline(request: &EvalRequest) -> Duration {
    let episodes = request.instance_ids.len().max(1) as f64;
    Duration::from_secs_f64(request.limits.wall_clock_seconds * episodes) + GRACE
}

fn verify(request: &EvalRequest, response: &EvalResponse) -> Result<(), String> {
    if response.request_id != request.request_id {
        return Err(format!(
            "response to request {} answers {}",
            request.request_id, response.request_id
        ));
    }
    let n = request.instance_ids.len() as u64;
    match (response.status, &response.report) {
        (ResponseStatus::Ok, None) => Err("ok response without report".into()),
        (ResponseStatus::Ok, Some(report)) => {
            let ids: Vec<&str> = report.per_instance.iter().map(|m| m.instance_id.as_str()).collect();
            let expected: Vec<&str> = request.instance_ids.iter().map(String::as_str).collect();
            if ids != expected {
                return Err(format!("report covers instances {ids:?}, requested {expected:?}"));
            }
            if report.resets != n || response.resets_performed != n {
                return Err(format!(
                    "report claims {} resets ({} performed) for {n} instances",
                    report.resets, response.resets_performed
                ));
            }
            let task = request.task.expect("validated");
            if report.per_instance.iter().any(|m| m.outcome.task() != task) {
                return Err("report mixes tasks".into());
            }
            Ok(())
        }
        (_, Some(_)) => Err("failed response carries a report".into()),
        (_, None) => Ok(()),
    }
}

/// Sends `request`, checks the response and credits the resets it
/// performed. Malformed or inconsistent responses come back as
/// `protocol_error`, charged the full reservation.
pub fn evaluate_policy(
    handle: &mut dyn EvaluatorHandle,
    request: &EvalRequest,
    budget: &BudgetLedger,
) -> Result<EvalResponse, EvalError> {
    request.validate().map_err(EvalError::InvalidRequest)?;
    let task = request.task.expect("validated");
    if !handle.handshake().tasks.contains(&task) {
        return Err(EvalError::Unsupported(format!("task {task}")));
    }
    let capability = match request.kind {
        RequestKind::Evaluate => CAP_EVALUATE,
        RequestKind::EnsembleEvaluate => CAP_ENSEMBLE,
        RequestKind::Shutdown => return Err(EvalError::InvalidRequest("shutdown is not an evaluation".into())),
    };
    if !handle.handshake().supports(capability) {
        return Err(EvalError::Unsupported(capability.into()));
    }

    let n = request.instance_ids.len() as u64;
    let reservation = budget.reserve_resets(n)?;
    let raw = match handle.exchange(request, deadline(request)) {
        Ok(raw) => raw,
        Err(e) => {
            // The evaluator may have run any number of episodes; charge them all.
            budget.settle_resets(reservation, n);
            return Err(e.into());
        }
    };
    let response = match Frame::from_line(&raw) {
        Ok(Frame::Response(r)) => match verify(request, &r) {
            Ok(()) => r,
            Err(detail) => EvalResponse::failure(request.request_id, ResponseStatus::ProtocolError, detail, n),
        },
        Ok(_) => EvalResponse::failure(
            request.request_id,
            ResponseStatus::ProtocolError,
            "expected a response frame",
            n,
        ),
        Err(e) => EvalResponse::failure(
            request.request_id,
            ResponseStatus::ProtocolError,
            format!("malformed response: {e}"),
            n,
        ),
    };
    let performed = match response.status {
        ResponseStatus::ProtocolError => n,
        _ => response.resets_performed,
    };
    budget.settle_resets(reservation, performed);

    if let Some(report) = &response.report {
        let recomputed = aggregate(task, &report.per_instance)
            .map_err(|e| EvalError::InvalidRequest(e.to_string()))?
            .aggregate_score;
        let same = recomputed == report.aggregate_score || (recomputed - report.aggregate_score).abs() <= 1e-9;
        if !same {
            return Err(EvalError::AggregateMismatch {
                reported: report.aggregate_score,
                recomputed,
            });
        }
    }
    Ok(response)
}

/// Scores of a population ensemble on each instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleScores {
    pub task: TaskKind,
    pub policies: usize,
    pub per_seed: Vec<SeedScore>,
    /// Mean of the per-seed scores.
    pub mean: f64,
    /// Task aggregate over all instances.
    pub aggregate_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub score: f64,
    pub metrics: InstanceMetrics,
}

/// Per-seed scores from an ensemble (or, with one code, single-policy)
/// evaluation response.
pub fn ensemble_scores(
    task: TaskKind,
    policies: usize,
    seeds: &[u64],
    report: &EvaluationReport,
) -> Result<EnsembleScores, MetricsError> {
    let per_seed = seeds
        .iter()
        .zip(&report.per_instance)
        .map(|(&seed, m)| {
            Ok(SeedScore {
                seed,
                score: instance_score(m)?,
                metrics: m.clone(),
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let mean = per_seed.iter().map(|s| s.score).sum::<f64>() / per_seed.len().max(1) as f64;
    Ok(EnsembleScores {
        task,
        policies,
        per_seed,
        mean,
        aggregate_score: report.aggregate_score,
    })
}

/// Evaluates the fused population `codes` on `seeds`.
pub fn ensemble_evaluate(
    handle: &mut dyn EvaluatorHandle,
    task: TaskKind,
    codes: Vec<String>,
    seeds: &[u64],
    limits: Limits,
    budget: &BudgetLedger,
) -> Result<EnsembleScores, EvalError> {
    if !handle.handshake().supports(CAP_ENSEMBLE) {
        return Err(EvalError::Unsupported(CAP_ENSEMBLE.into()));
    }
    let policies = codes.len();
    let request = EvalRequest::ensemble(0, task, codes, seeds, limits);
    let response = evaluate_policy(handle, &request, budget)?;
    match response.report {
        Some(report) => ensemble_scores(task, policies, seeds, &report)
            .map_err(|e| EvalError::InvalidRequest(e.to_string())),
        None => Err(EvalError::EvaluatorCrashed(format!(
            "{:?}: {}",
            response.status,
            response.error_detail.unwrap_or_default()
        ))),
    }
}

/// Decodes IBE payloads into the artifact store, sorted by instance then
/// kind.
pub fn store_payloads(store: &ArtifactStore, payloads: &[IbePayload]) -> Result<Vec<IbeArtifactRef>, String> {
    let engine = base64::engine::general_purpose::STANDARD;
    let mut refs = Vec::with_capacity(payloads.len());
    for p in payloads {
        if p.media_type != p.kind.media_type() {
            return Err(format!("{:?} payload with media type {}", p.kind, p.media_type.mime()));
        }
        let bytes = engine
            .decode(&p.content_base64)
            .map_err(|e| format!("IBE payload for {}: {e}", p.instance_id))?;
        let content_ref = store
            .put(&bytes, p.media_type)
            .map_err(|e: ArtifactError| e.to_string())?;
        refs.push(IbeArtifactRef {
            kind: p.kind,
            instance_id: p.instance_id.clone(),
            content_ref,
            media_type: p.media_type,
        });
    }
    refs.sort_by(|a, b| (&a.instance_id, a.kind).cmp(&(&b.instance_id, b.kind)));
    Ok(refs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluatorConfig {
    /// Registered evaluator backend: `subprocess` or `stub`.
    pub backend: String,
    /// Command line for the `subprocess` backend.
    pub command: Vec<String>,
    pub parallelism: usize,
    /// Training instance seeds; one episode each per evaluation.
    pub training_seeds: Option<Vec<u64>>,
    pub max_steps_per_episode: u64,
    pub wall_clock_seconds: f64,
    pub startup_timeout_seconds: u64,
    /// Score given to policies that error or time out.
    pub failure_score: Option<f64>,
    /// Whether floor-scored policies may enter the pool.
    pub admit_failed: bool,
    /// Code length the `stub` backend rewards.
    pub stub_target_len: usize,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig {
            backend: "subprocess".into(),
            command: Vec::new(),
            parallelism: 4,
            training_seeds: None,
            max_steps_per_episode: 1000,
            wall_clock_seconds: 60.0,
            startup_timeout_seconds: 60,
            failure_score: None,
            admit_failed: true,
            stub_target_len: DEFAULT_TARGET_LEN,
        }
    }
}

impl EvaluatorConfig {
    pub fn limits(&self) -> Limits {
        Limits {
            max_steps_per_episode: self.max_steps_per_episode,
            wall_clock_seconds: self.wall_clock_seconds,
        }
    }

    pub fn training_seeds(&self, task: TaskKind) -> Vec<u64> {
        self.training_seeds.clone().unwrap_or_else(|| default_training_seeds(task))
    }

    pub fn failure_score(&self, task: TaskKind) -> f64 {
        self.failure_score.unwrap_or(task.default_failure_score())
    }
}

/// Fixed training instances: five for Lunar Lander, four tracks for Car
/// Racing, disjoint from the test seeds 0-9.
pub fn default_training_seeds(task: TaskKind) -> Vec<u64> {
    match task {
        TaskKind::LunarLander => vec![100, 101, 102, 103, 104],
        TaskKind::CarRacing => vec![100, 101, 102, 103],
    }
}

type EvaluatorFactory = Box<dyn Fn(&EvaluatorConfig) -> Result<Box<dyn EvaluatorHandle>, HandleError> + Send + Sync>;

/// Evaluator backends by name.
pub struct EvaluatorRegistry {
    factories: BTreeMap<String, EvaluatorFactory>,
}

impl EvaluatorRegistry {
    pub fn empty() -> Self {
        EvaluatorRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register("subprocess", |cfg| {
            let handle = SubprocessEvaluator::spawn(&cfg.command, Duration::from_secs(cfg.startup_timeout_seconds))?;
            Ok(Box::new(handle) as Box<dyn EvaluatorHandle>)
        });
        r.register("stub", |cfg| {
            Ok(Box::new(LoopbackEvaluator::new(Box::new(StubEvaluator::new(cfg.stub_target_len))))
                as Box<dyn EvaluatorHandle>)
        });
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&EvaluatorConfig) -> Result<Box<dyn EvaluatorHandle>, HandleError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn open(&self, config: &EvaluatorConfig) -> Result<Box<dyn EvaluatorHandle>, HandleError> {
        let factory = self
            .factories
            .get(&config.backend)
            .ok_or_else(|| HandleError::Spawn(format!("unknown evaluator backend `{}`", config.backend)))?;
        factory(config)
    }
}

#[cfg(test)]
mod tests;
