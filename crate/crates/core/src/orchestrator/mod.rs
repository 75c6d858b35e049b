//! The generational search loop.

mod checkpoint;
mod config;
mod replay;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, RngState, SCHEMA as CHECKPOINT_SCHEMA};
pub use config::{BudgetSection, ConfigError, OperatorSection, PoolSection, RunConfig, RunSection, TaskSection};
pub use replay::{replay, ReplayError, Replayed};

use crate::eval::{
    evaluate_policy, store_payloads, EvalError, EvalRequest, EvalResponse, EvaluatorHandle, EvaluatorRegistry,
    ResponseStatus,
};
use crate::gateway::{BackendRegistry, BudgetCounters, BudgetLedger, Gateway, GatewayError};
use crate::model::ledger::LedgerFile;
use crate::model::{
    ArtifactStore, EventBody, EvidenceUse, IbeArtifactRef, IbeKind, IndividualId, LedgerError, LineageRecord,
    OperatorKind, PolicyIndividual, QuantitativeMetrics, RunLedger,
};
use crate::operators::{
    stage_one_describe, DescribeError, Evidence, EvolutionOperator, OperatorRegistry, PromptBundle, TaskSpec,
};
use crate::pool::{PolicyPool, PoolError};
use crate::report;

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const CONFIG_FILE: &str = "run.toml";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("evaluator unavailable: {0}")]
    EvaluatorUnavailable(String),
    #[error("budget exhausted: {0}")]
    BudgetExhausted(String),
    #[error("every seed policy failed evaluation")]
    AllSeedsFailed,
    #[error("run directory {0} already holds a run")]
    RunDirInUse(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("ledger replay: {0}")]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    QueryBudgetExhausted,
    ResetBudgetExhausted,
    /// A generation consumed no budget, so the next would too.
    Stalled,
    EvaluatorLost(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorCounts {
    pub operator: Option<OperatorKind>,
    pub requested: u64,
    pub parsed: u64,
    pub evaluated: u64,
    pub admitted: u64,
    pub parse_failures: u64,
    pub eval_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: u32,
    pub operators: Vec<OperatorCounts>,
    /// First-stage queries of two-stage operators.
    pub describe_queries: u64,
    pub best_score: Option<f64>,
    pub queries_used: u64,
    pub resets_used: u64,
}

impl GenerationSummary {
    pub fn total(&self) -> OperatorCounts {
        self.operators.iter().fold(OperatorCounts::default(), |mut t, c| {
            t.requested += c.requested;
            t.parsed += c.parsed;
            t.evaluated += c.evaluated;
            t.admitted += c.admitted;
            t.parse_failures += c.parse_failures;
            t.eval_failures += c.eval_failures;
            t
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Last completed generation; 0 once the initial population is in.
    pub generation: u32,
    pub pool: PolicyPool,
    pub budget: BudgetCounters,
    /// Resets spent evaluating seed policies, outside the search budget.
    pub seed_resets: u64,
    pub halted: Option<HaltReason>,
}

/// Pluggable pieces looked up by name from the config.
pub struct Backends {
    pub chat: BackendRegistry,
    pub evaluators: EvaluatorRegistry,
    pub operators: OperatorRegistry,
}

impl Backends {
    pub fn standard(parents: usize) -> Self {
        Backends {
            chat: BackendRegistry::standard(),
            evaluators: EvaluatorRegistry::standard(),
            operators: OperatorRegistry::standard(parents),
        }
    }
}

/// Random stream for one operator invocation, independent of execution
/// order.
pub fn invocation_rng(root_seed: u64, generation: u32, op_index: usize, invocation: u32) -> ChaCha8Rng {
    let digest = Sha256::new()
        .chain_update(b"mles/invocation")
        .chain_update(root_seed.to_le_bytes())
        .chain_update(generation.to_le_bytes())
        .chain_update((op_index as u64).to_le_bytes())
        .chain_update(invocation.to_le_bytes())
        .finalize();
    ChaCha8Rng::from_seed(digest.into())
}

/// Runs `f` over `items` on up to `workers` threads; results keep item
/// order. `f` gets the worker index too.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for w in 0..workers {
            let (next, results, f) = (&next, &results, &f);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(w, &items[i]);
                results.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

struct Planned {
    invocation: u32,
    op_slot: usize,
    operator: Arc<dyn EvolutionOperator>,
    parent_ids: Vec<IndividualId>,
    bundle: PromptBundle,
    query_index: u64,
}

struct Candidate {
    invocation: u32,
    op_slot: usize,
    individual: PolicyIndividual,
}

enum Evaluated {
    Scored(Box<PolicyIndividual>),
    Failed { error: String, resets: u64 },
}

/// A run bound to its directory, backends and ledger.
pub struct Engine {
    config: RunConfig,
    config_hash: String,
    task: TaskSpec,
    run_dir: PathBuf,
    store: ArtifactStore,
    gateway: Gateway,
    evaluator_registry: EvaluatorRegistry,
    evaluators: Vec<Mutex<Box<dyn EvaluatorHandle>>>,
    operators: Vec<Arc<dyn EvolutionOperator>>,
    budget: BudgetLedger,
    ledger: RunLedger,
    ledger_file: LedgerFile,
    state: RunState,
    initialized: bool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("run_dir", &self.run_dir)
            .field("generation", &self.state.generation)
            .field("budget", &self.state.budget)
            .finish_non_exhaustive()
    }
}

impl Engine {
    /// Starts a fresh run in `run_dir`, writing the effective config to
    /// `run.toml`.
    pub fn create(config: RunConfig, run_dir: &Path, backends: Backends) -> Result<Engine, RunError> {
        config.validate()?;
        let ledger_path = run_dir.join(LEDGER_FILE);
        if ledger_path.metadata().is_ok_and(|m| m.len() > 0) {
            return Err(RunError::RunDirInUse(run_dir.display().to_string()));
        }
        if config.budgets.queries == 0 {
            return Err(RunError::BudgetExhausted("query budget is zero".into()));
        }
        if config.reset_budget() < config.training_seeds().len() as u64 {
            return Err(RunError::BudgetExhausted(format!(
                "reset budget {} cannot cover one evaluation",
                config.reset_budget()
            )));
        }
        std::fs::create_dir_all(run_dir)?;
        std::fs::write(run_dir.join(CONFIG_FILE), config.to_toml())?;
        let mut engine = Self::assemble(
            config,
            run_dir,
            backends,
            RunLedger::new(),
            LedgerFile::create(&ledger_path)?,
        )?;
        engine.record(EventBody::RunStarted {
            config_hash: engine.config_hash.clone(),
            root_seed: engine.config.run.seed,
        })?;
        Ok(engine)
    }

    /// Reopens the run in `run_dir` at `checkpoint` (default: the latest),
    /// truncating the ledger to the checkpoint and verifying it by replay.
    pub fn resume(run_dir: &Path, checkpoint: Option<&Path>, backends: Backends) -> Result<Engine, RunError> {
        let config = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
        config.validate()?;
        let path = match checkpoint {
            Some(p) => p.to_path_buf(),
            None => Checkpoint::latest(run_dir)?,
        };
        let cp = Checkpoint::load(&path)?;
        if cp.config_hash != config.hash() {
            return Err(CheckpointError::CorruptCheckpoint(format!(
                "{} was written for a different run.toml",
                path.display()
            ))
            .into());
        }
        let ledger_path = run_dir.join(LEDGER_FILE);
        let mut ledger = RunLedger::load(&ledger_path)?;
        if (ledger.len() as u64) < cp.ledger_len {
            return Err(CheckpointError::CorruptCheckpoint(format!(
                "ledger has {} events, checkpoint expects {}",
                ledger.len(),
                cp.ledger_len
            ))
            .into());
        }
        ledger.truncate(cp.ledger_len as usize);
        let replayed = replay(&ledger, &config)?;
        if replayed.pool != cp.pool || replayed.budget != cp.budget || replayed.generation != cp.generation {
            return Err(CheckpointError::CorruptCheckpoint("ledger replay disagrees with checkpoint".into()).into());
        }
        let ledger_file = LedgerFile::rewrite(&ledger_path, &ledger)?;
        let mut engine = Self::assemble(config, run_dir, backends, ledger, ledger_file)?;
        engine.budget = BudgetLedger::from_counters(cp.budget);
        engine.state = RunState {
            generation: cp.generation,
            pool: cp.pool,
            budget: cp.budget,
            seed_resets: cp.seed_resets,
            halted: cp.halted,
        };
        engine.initialized = true;
        Ok(engine)
    }

    fn assemble(
        config: RunConfig,
        run_dir: &Path,
        backends: Backends,
        ledger: RunLedger,
        ledger_file: LedgerFile,
    ) -> Result<Engine, RunError> {
        let task = TaskSpec::builtin(config.task_kind());
        let store = ArtifactStore::open(run_dir).map_err(|e| RunError::Io(std::io::Error::other(e.to_string())))?;
        let gateway = Gateway::from_config(&config.gateway, &backends.chat, &store)?;
        let operators = backends
            .operators
            .resolve(&config.operators.enabled)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for op in &operators {
            if op.id().arity != op.id().kind.arity(config.pool.parents) {
                return Err(ConfigError::Invalid(format!(
                    "operator {} is registered with {} parents, config asks for {}",
                    op.name(),
                    op.id().arity,
                    config.pool.parents
                ))
                .into());
            }
        }
        let mut evaluators = Vec::with_capacity(config.evaluator.parallelism);
        for _ in 0..config.evaluator.parallelism {
            let handle = backends
                .evaluators
                .open(&config.evaluator)
                .map_err(|e| RunError::EvaluatorUnavailable(e.to_string()))?;
            if !handle.handshake().tasks.contains(&config.task_kind()) {
                return Err(RunError::EvaluatorUnavailable(format!(
                    "evaluator does not offer {}",
                    config.task_kind()
                )));
            }
            if let Some(kind) = config.ibe_kinds().into_iter().find(|k| !handle.handshake().ibe_kinds.contains(k)) {
                return Err(RunError::EvaluatorUnavailable(format!("evaluator cannot produce {kind:?}")));
            }
            evaluators.push(Mutex::new(handle));
        }
        let budget = BudgetLedger::new(config.budgets.queries, config.reset_budget());
        let state = RunState {
            generation: 0,
            pool: PolicyPool::new(config.pool.capacity)?,
            budget: budget.snapshot(),
            seed_resets: 0,
            halted: None,
        };
        Ok(Engine {
            config_hash: config.hash(),
            config,
            task,
            run_dir: run_dir.to_path_buf(),
            store,
            gateway,
            evaluator_registry: backends.evaluators,
            evaluators,
            operators,
            budget,
            ledger,
            ledger_file,
            state,
            initialized: false,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    fn record(&mut self, body: EventBody) -> Result<(), RunError> {
        let event = self.ledger.record(body);
        self.ledger_file.write(event)?;
        Ok(())
    }

    fn evaluation_request(&self, code: &str) -> EvalRequest {
        EvalRequest::evaluate(
            0,
            self.config.task_kind(),
            code,
            &self.config.training_seeds(),
            &self.config.ibe_kinds(),
            self.config.evaluator.limits(),
        )
    }

    /// Evaluates `codes` in parallel across the evaluator pool, replacing
    /// handles that crash.
    fn evaluate_all(&self, codes: &[String], budget: &BudgetLedger) -> Result<Vec<Result<EvalResponse, EvalError>>, RunError> {
        let requests: Vec<EvalRequest> = codes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut r = self.evaluation_request(c);
                r.request_id = i as u64;
                r
            })
            .collect();
        let lost: Mutex<Option<String>> = Mutex::new(None);
        let results = parallel_map(&requests, self.evaluators.len(), |w, req| {
            let mut handle = self.evaluators[w].lock().unwrap_or_else(|p| p.into_inner());
            let result = evaluate_policy(handle.as_mut(), req, budget);
            if matches!(result, Err(EvalError::EvaluatorCrashed(_) | EvalError::Timeout(_))) {
                match self.evaluator_registry.open(&self.config.evaluator) {
                    Ok(fresh) => *handle = fresh,
                    Err(e) => *lost.lock().unwrap_or_else(|p| p.into_inner()) = Some(e.to_string()),
                }
            }
            result
        });
        if let Some(e) = lost.into_inner().unwrap_or_else(|p| p.into_inner()) {
            return Err(RunError::EvaluatorUnavailable(e));
        }
        Ok(results)
    }

    fn to_individual(&self, individual: PolicyIndividual, response: EvalResponse) -> Evaluated {
        let task = self.config.task_kind();
        match response.status {
            ResponseStatus::Ok => {
                let report = response.report.expect("verified ok response");
                let ibe = match store_payloads(&self.store, &response.ibe_payloads) {
                    Ok(refs) => refs,
                    Err(error) => {
                        return Evaluated::Failed {
                            error,
                            resets: response.resets_performed,
                        }
                    }
                };
                let metrics = QuantitativeMetrics {
                    aggregate_score: report.aggregate_score,
                    resets_used: report.resets,
                    per_instance: report.per_instance,
                    failure: None,
                };
                Evaluated::Scored(Box::new(individual.with_evaluation(metrics, ibe)))
            }
            ResponseStatus::PolicyError | ResponseStatus::Timeout => {
                let detail = format!(
                    "{}: {}",
                    if response.status == ResponseStatus::Timeout { "timeout" } else { "policy_error" },
                    response.error_detail.unwrap_or_default()
                );
                let metrics = QuantitativeMetrics {
                    aggregate_score: self.config.evaluator.failure_score(task),
                    per_instance: Vec::new(),
                    resets_used: response.resets_performed,
                    failure: Some(detail),
                };
                Evaluated::Scored(Box::new(individual.with_evaluation(metrics, Vec::new())))
            }
            ResponseStatus::ProtocolError => Evaluated::Failed {
                error: format!("protocol_error: {}", response.error_detail.unwrap_or_default()),
                resets: response.resets_performed.max(self.config.training_seeds().len() as u64),
            },
        }
    }

    fn eval_error_resets(&self, e: &EvalError) -> u64 {
        match e {
            EvalError::EvaluatorCrashed(_) | EvalError::Timeout(_) | EvalError::AggregateMismatch { .. } => {
                self.config.training_seeds().len() as u64
            }
            _ => 0,
        }
    }

    /// Evaluates the seed policies and fills the pool (generation 0). Seed
    /// resets are counted apart from the search budget.
    pub fn initialize_population(&mut self) -> Result<(), RunError> {
        if self.initialized {
            return Ok(());
        }
        let sources = if self.config.task.seed_policies.is_empty() {
            vec![self.task.code_template.clone()]
        } else {
            self.config.task.seed_policies.clone()
        };
        let mut seeds = Vec::new();
        for (i, code) in sources.iter().enumerate() {
            let thought = if self.config.task.seed_policies.is_empty() {
                "Initial heuristic policy from the task code template.".to_string()
            } else {
                format!("Seed policy {i}.")
            };
            match PolicyIndividual::new(IndividualId::new(0, i as u32), code.clone(), thought, LineageRecord::seed(), &self.task.entry_point) {
                Ok(ind) => seeds.push((i, ind)),
                Err(e) => self.record(EventBody::SeedRejected {
                    index: i,
                    error: e.to_string(),
                })?,
            }
        }
        let seed_budget = BudgetLedger::new(0, u64::MAX);
        let codes: Vec<String> = seeds.iter().map(|(_, s)| s.code.clone()).collect();
        let results = self.evaluate_all(&codes, &seed_budget)?;
        let mut admitted = Vec::new();
        for ((index, ind), result) in seeds.into_iter().zip(results) {
            let evaluated = match result {
                Ok(response) => self.to_individual(ind, response),
                Err(e) => Evaluated::Failed {
                    error: e.to_string(),
                    resets: 0,
                },
            };
            match evaluated {
                Evaluated::Scored(ind) => {
                    let ind = *ind;
                    self.state.seed_resets += ind.metrics.as_ref().map_or(0, |m| m.resets_used);
                    self.record(EventBody::SeedEvaluated { individual: ind.clone() })?;
                    admitted.push(ind);
                }
                Evaluated::Failed { error, .. } => self.record(EventBody::SeedRejected { index, error })?,
            }
        }
        if admitted.is_empty() || admitted.iter().all(PolicyIndividual::failed) {
            return Err(RunError::AllSeedsFailed);
        }
        let candidate_ids: Vec<_> = admitted.iter().map(|c| c.id.clone()).collect();
        self.state.pool.admit(admitted, self.config.evaluator.admit_failed)?;
        self.record(EventBody::Admission {
            generation: 0,
            candidate_ids,
            pool_ids: self.state.pool.ids(),
        })?;
        self.initialized = true;
        self.checkpoint()?;
        Ok(())
    }

    fn evidence_for(&self, kind: OperatorKind, parent: &PolicyIndividual) -> Vec<IbeArtifactRef> {
        let wanted = match kind.uses_ibe() {
            EvidenceUse::None => return Vec::new(),
            EvidenceUse::Image => self.config.task_kind().image_evidence(),
            EvidenceUse::Text => IbeKind::TextStateTrace,
        };
        let mut refs: Vec<_> = parent.ibe.iter().filter(|r| r.kind == wanted).cloned().collect();
        refs.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        refs.truncate(self.config.ibe_max_images());
        refs
    }

    fn halt_for_budget(&self) -> Option<HaltReason> {
        let b = self.budget.snapshot();
        if b.remaining_queries() == 0 {
            Some(HaltReason::QueryBudgetExhausted)
        } else if b.remaining_resets() < self.config.training_seeds().len() as u64 {
            Some(HaltReason::ResetBudgetExhausted)
        } else {
            None
        }
    }

    /// One synchronous generation: plan and query every invocation, parse,
    /// evaluate, then admit all offspring in one batch.
    pub fn run_generation(&mut self) -> Result<GenerationSummary, RunError> {
        if !self.initialized {
            self.initialize_population()?;
        }
        if let Some(reason) = self.state.halted.clone().or_else(|| self.halt_for_budget()) {
            return Err(RunError::BudgetExhausted(format!("{reason:?}")));
        }
        let g = self.state.generation + 1;
        let before = self.budget.snapshot();
        self.record(EventBody::GenerationStarted { generation: g })?;

        let pool = self.state.pool.clone();
        let ops = self.operators.clone();
        let per_op = self.config.operators.offspring_per_operator;
        let total = ops.len() as u32 * per_op;
        let mut counts: Vec<OperatorCounts> = ops
            .iter()
            .map(|op| OperatorCounts {
                operator: Some(op.id().kind),
                ..OperatorCounts::default()
            })
            .collect();
        let mut describe_queries = 0;
        let mut halted = None;

        // Planning runs in invocation order so budget reservations, and
        // hence endpoint routing, are deterministic.
        let mut planned = Vec::new();
        for invocation in 0..total {
            let op_slot = (invocation as usize) % ops.len();
            let op = &ops[op_slot];
            let kind = op.id().kind;
            let mut rng = invocation_rng(self.config.run.seed, g, op_slot, invocation);
            let parents = pool.select_parents(op.id().arity, &mut rng)?;
            let parent_ids: Vec<_> = parents.iter().map(|p| p.id.clone()).collect();
            let skip = |reason: String| EventBody::InvocationSkipped {
                generation: g,
                invocation,
                operator: kind,
                reason,
            };

            let refs = self.evidence_for(kind, parents[0]);
            if kind.uses_ibe() != EvidenceUse::None && refs.is_empty() {
                self.record(skip(format!("parent {} carries no usable evidence", parent_ids[0])))?;
                continue;
            }
            let evidence = if kind.two_stage() {
                match stage_one_describe(&self.gateway, &self.budget, kind, &self.task, &refs) {
                    Ok(ev) => {
                        describe_queries += ev.len() as u64;
                        let hashes = ev
                            .iter()
                            .map(|e| match e {
                                Evidence::Text { body, .. } => sha256_hex(body),
                                Evidence::Image(r) => r.content_ref.clone(),
                            })
                            .collect();
                        self.record(EventBody::EvidenceDescribed {
                            generation: g,
                            invocation,
                            operator: kind,
                            queries: ev.len() as u64,
                            description_hashes: hashes,
                            error: None,
                        })?;
                        ev
                    }
                    Err(DescribeError::Gateway(GatewayError::BudgetExhausted(_))) => {
                        halted = Some(HaltReason::QueryBudgetExhausted);
                        break;
                    }
                    Err(e) => {
                        let queries = if matches!(e, DescribeError::Gateway(GatewayError::EndpointFailure { .. })) {
                            refs.len() as u64
                        } else {
                            0
                        };
                        describe_queries += queries;
                        self.record(EventBody::EvidenceDescribed {
                            generation: g,
                            invocation,
                            operator: kind,
                            queries,
                            description_hashes: Vec::new(),
                            error: Some(e.to_string()),
                        })?;
                        continue;
                    }
                }
            } else {
                let mut ev = Vec::with_capacity(refs.len());
                for r in refs {
                    if r.kind.is_image() {
                        ev.push(Evidence::Image(r));
                    } else {
                        match self.store.get(&r.content_ref) {
                            Ok(bytes) => ev.push(Evidence::Text {
                                body: String::from_utf8_lossy(&bytes).into_owned(),
                                source: r,
                            }),
                            Err(e) => {
                                self.record(skip(format!("evidence {}: {e}", r.content_ref)))?;
                                ev.clear();
                                break;
                            }
                        }
                    }
                }
                if ev.is_empty() && kind.uses_ibe() != EvidenceUse::None {
                    continue;
                }
                ev
            };

            let bundle = match op.render(&self.task, &parents, &evidence) {
                Ok(b) => b,
                Err(e) => {
                    self.record(skip(e.to_string()))?;
                    continue;
                }
            };
            if let Err(e) = self.gateway.can_serve(&bundle) {
                self.record(skip(e.to_string()))?;
                continue;
            }
            match self.budget.reserve_queries(1) {
                Ok(reservation) => planned.push(Planned {
                    invocation,
                    op_slot,
                    operator: op.clone(),
                    parent_ids,
                    bundle,
                    query_index: reservation.first,
                }),
                Err(_) => {
                    halted = Some(HaltReason::QueryBudgetExhausted);
                    break;
                }
            }
        }

        let responses = parallel_map(&planned, self.config.gateway.concurrency, |_, p| {
            self.gateway.complete_reserved(&p.bundle, p.query_index, 0)
        });

        let mut candidates = Vec::new();
        for (p, response) in planned.iter().zip(responses) {
            let kind = p.operator.id().kind;
            counts[p.op_slot].requested += 1;
            let raw = match response {
                Ok(raw) => raw,
                Err(e) => {
                    self.record(EventBody::GatewayFailure {
                        generation: g,
                        invocation: p.invocation,
                        operator: kind,
                        queries: 1,
                        error: e.to_string(),
                    })?;
                    continue;
                }
            };
            let response_hash = sha256_hex(&raw);
            self.record(EventBody::LlmResponse {
                generation: g,
                invocation: p.invocation,
                operator: kind,
                parent_ids: p.parent_ids.clone(),
                queries: 1,
                response_hash: response_hash.clone(),
            })?;
            let origin = LineageRecord {
                parent_ids: p.parent_ids.clone(),
                operator: Some(kind),
                generation: g,
                llm_response_hash: Some(response_hash),
            };
            let built = p
                .operator
                .parse(&raw, &self.task)
                .map_err(|e| e.to_string())
                .and_then(|c| {
                    PolicyIndividual::new(IndividualId::new(g, p.invocation), c.code, c.thought, origin, &self.task.entry_point)
                        .map_err(|e| e.to_string())
                });
            match built {
                Ok(individual) => {
                    counts[p.op_slot].parsed += 1;
                    candidates.push(Candidate {
                        invocation: p.invocation,
                        op_slot: p.op_slot,
                        individual,
                    });
                }
                Err(error) => {
                    counts[p.op_slot].parse_failures += 1;
                    self.record(EventBody::ParseFailure {
                        generation: g,
                        invocation: p.invocation,
                        operator: kind,
                        error,
                    })?;
                }
            }
        }

        // Only as many candidates as the reset budget covers, in order.
        let per_eval = self.config.training_seeds().len() as u64;
        let affordable = (self.budget.snapshot().remaining_resets() / per_eval) as usize;
        if candidates.len() > affordable {
            for c in candidates.drain(affordable..) {
                self.record(EventBody::InvocationSkipped {
                    generation: g,
                    invocation: c.invocation,
                    operator: c.individual.origin.operator.expect("offspring operator"),
                    reason: "reset budget exhausted".into(),
                })?;
            }
            halted = Some(HaltReason::ResetBudgetExhausted);
        }

        let codes: Vec<String> = candidates.iter().map(|c| c.individual.code.clone()).collect();
        let results = match self.evaluate_all(&codes, &self.budget) {
            Ok(r) => r,
            Err(e) => {
                self.state.budget = self.budget.snapshot();
                self.state.halted = Some(HaltReason::EvaluatorLost(e.to_string()));
                self.record(EventBody::Halted {
                    reason: self.state.halted.clone().expect("just set"),
                })?;
                return Err(e);
            }
        };

        let mut offspring = Vec::new();
        let mut slot_of = BTreeMap::new();
        for (c, result) in candidates.into_iter().zip(results) {
            let kind = c.individual.origin.operator.expect("offspring operator");
            let evaluated = match result {
                Ok(response) => self.to_individual(c.individual, response),
                Err(e) => Evaluated::Failed {
                    resets: self.eval_error_resets(&e),
                    error: e.to_string(),
                },
            };
            match evaluated {
                Evaluated::Scored(ind) => {
                    let ind = *ind;
                    counts[c.op_slot].evaluated += 1;
                    if ind.failed() {
                        counts[c.op_slot].eval_failures += 1;
                    }
                    self.record(EventBody::CandidateEvaluated {
                        invocation: c.invocation,
                        resets: ind.metrics.as_ref().map_or(0, |m| m.resets_used),
                        individual: ind.clone(),
                    })?;
                    slot_of.insert(ind.id.clone(), c.op_slot);
                    offspring.push(ind);
                }
                Evaluated::Failed { error, resets } => {
                    counts[c.op_slot].eval_failures += 1;
                    self.record(EventBody::EvaluationFailed {
                        generation: g,
                        invocation: c.invocation,
                        operator: kind,
                        error,
                        resets,
                    })?;
                }
            }
        }

        let by_id: BTreeMap<IndividualId, (String, crate::model::Fingerprint)> = offspring
            .iter()
            .map(|o| (o.id.clone(), (o.thought.clone(), o.fingerprint.clone())))
            .collect();
        let candidate_ids: Vec<_> = offspring.iter().map(|o| o.id.clone()).collect();
        let outcome = self.state.pool.admit(offspring, self.config.evaluator.admit_failed)?;
        for id in &outcome.duplicates {
            let (thought, fingerprint) = by_id[id].clone();
            self.record(EventBody::DuplicateDiscarded {
                id: id.clone(),
                fingerprint,
                thought,
            })?;
        }
        for id in &outcome.admitted {
            counts[slot_of[id]].admitted += 1;
        }
        self.record(EventBody::Admission {
            generation: g,
            candidate_ids,
            pool_ids: self.state.pool.ids(),
        })?;

        let after = self.budget.snapshot();
        self.state.budget = after;
        self.state.generation = g;
        let summary = GenerationSummary {
            generation: g,
            operators: counts,
            describe_queries,
            best_score: self.state.pool.best_score(),
            queries_used: after.queries_used,
            resets_used: after.resets_used,
        };
        self.record(EventBody::GenerationCompleted { summary: summary.clone() })?;

        let halted = halted.or_else(|| self.halt_for_budget()).or_else(|| {
            (after.queries_used == before.queries_used && after.resets_used == before.resets_used)
                .then_some(HaltReason::Stalled)
        });
        if let Some(reason) = halted {
            self.state.halted = Some(reason.clone());
            self.record(EventBody::Halted { reason })?;
        }
        if self.state.halted.is_some() || g.is_multiple_of(self.config.run.checkpoint_every) {
            self.checkpoint()?;
        }
        Ok(summary)
    }

    /// Generations until a budget runs out. Already halted runs return
    /// immediately.
    pub fn run_search(&mut self) -> Result<&RunState, RunError> {
        self.initialize_population()?;
        while self.state.halted.is_none() {
            if let Err(e) = self.run_generation() {
                let _ = self.checkpoint();
                return Err(e);
            }
        }
        Ok(&self.state)
    }

    /// Writes `checkpoints/gen-<k>.json` and refreshes the convergence
    /// report.
    pub fn checkpoint(&self) -> Result<PathBuf, RunError> {
        let cp = Checkpoint {
            schema: String::new(),
            config_hash: self.config_hash.clone(),
            generation: self.state.generation,
            pool: self.state.pool.clone(),
            budget: self.state.budget,
            seed_resets: self.state.seed_resets,
            rng: RngState {
                root_seed: self.config.run.seed,
            },
            ledger_len: self.ledger.len() as u64,
            halted: self.state.halted.clone(),
            content_hash: String::new(),
        }
        .seal();
        let path = cp.write(&self.run_dir)?;
        std::fs::write(
            self.run_dir.join(report::CONVERGENCE_FILE),
            report::convergence_csv(&report::convergence(&self.ledger)),
        )?;
        Ok(path)
    }

    /// Shuts evaluator processes down.
    pub fn close(&mut self) {
        for e in &self.evaluators {
            e.lock().unwrap_or_else(|p| p.into_inner()).shutdown();
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.close();
    }
}
