//! `run.toml`: everything that determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::EvaluatorConfig;
use crate::gateway::{GatewayConfig, DEFAULT_QUERY_BUDGET};
use crate::model::{EvidenceUse, IbeKind, OperatorKind, TaskKind};
use crate::pool::{DEFAULT_CAPACITY, DEFAULT_PARENTS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid run.toml: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: TaskKind,
    /// Initial population sources. Empty means the task's code template.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed_policies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub capacity: usize,
    pub parents: usize,
}

impl Default for PoolSection {
    fn default() -> Self {
        PoolSection {
            capacity: DEFAULT_CAPACITY,
            parents: DEFAULT_PARENTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSection {
    /// Run order within a generation cycles through this list.
    pub enabled: Vec<OperatorKind>,
    pub offspring_per_operator: u32,
    /// Evidence items per prompt; defaults to one per training instance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ibe_max_images: Option<usize>,
}

impl Default for OperatorSection {
    fn default() -> Self {
        OperatorSection {
            enabled: vec![OperatorKind::E1, OperatorKind::E2, OperatorKind::M1M, OperatorKind::M2M],
            offspring_per_operator: 4,
            ibe_max_images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub queries: u64,
    /// Defaults to five resets per query for Lunar Lander, four for Car
    /// Racing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resets: Option<u64>,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            queries: DEFAULT_QUERY_BUDGET,
            resets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub checkpoint_every: u32,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSection,
    #[serde(default)]
    pub pool: PoolSection,
    #[serde(default)]
    pub operators: OperatorSection,
    #[serde(default)]
    pub budgets: BudgetSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub evaluator: EvaluatorConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
}

impl RunConfig {
    pub fn new(task: TaskKind) -> Self {
        RunConfig {
            task: TaskSection {
                name: task,
                seed_policies: Vec::new(),
            },
            pool: PoolSection::default(),
            operators: OperatorSection::default(),
            budgets: BudgetSection::default(),
            run: RunSection::default(),
            evaluator: EvaluatorConfig::default(),
            gateway: GatewayConfig::default(),
        }
    }

    /// Both backends replaced by their deterministic stubs.
    pub fn offline(task: TaskKind) -> Self {
        let mut config = Self::new(task);
        config.gateway.stub = true;
        config.gateway.retry_backoff_ms = 0;
        config.evaluator.backend = "stub".into();
        config
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to toml")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task.name
    }

    pub fn training_seeds(&self) -> Vec<u64> {
        self.evaluator.training_seeds(self.task.name)
    }

    pub fn reset_budget(&self) -> u64 {
        self.budgets
            .resets
            .unwrap_or(self.budgets.queries * self.training_seeds().len() as u64)
    }

    pub fn ibe_max_images(&self) -> usize {
        self.operators
            .ibe_max_images
            .unwrap_or(self.training_seeds().len())
    }

    /// Evidence kinds the evaluator must return for the enabled operators.
    pub fn ibe_kinds(&self) -> Vec<IbeKind> {
        let mut kinds = Vec::new();
        let uses = |u: EvidenceUse| self.operators.enabled.iter().any(|op| op.uses_ibe() == u);
        if uses(EvidenceUse::Image) {
            kinds.push(self.task.name.image_evidence());
        }
        if uses(EvidenceUse::Text) {
            kinds.push(IbeKind::TextStateTrace);
        }
        kinds
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.pool.capacity == 0 {
            return invalid("pool.capacity must be positive");
        }
        if self.pool.parents == 0 {
            return invalid("pool.parents must be positive");
        }
        if self.operators.enabled.is_empty() {
            return invalid("operators.enabled is empty");
        }
        if self.operators.offspring_per_operator == 0 {
            return invalid("operators.offspring_per_operator must be positive");
        }
        if self.operators.ibe_max_images == Some(0) {
            return invalid("operators.ibe_max_images must be positive");
        }
        if self.run.checkpoint_every == 0 {
            return invalid("run.checkpoint_every must be positive");
        }
        if self.evaluator.parallelism == 0 {
            return invalid("evaluator.parallelism must be positive");
        }
        if self.training_seeds().is_empty() {
            return invalid("evaluator.training_seeds is empty");
        }
        if self.evaluator.max_steps_per_episode == 0 || self.evaluator.wall_clock_seconds.is_nan() || self.evaluator.wall_clock_seconds <= 0.0 {
            return invalid("evaluator limits must be positive");
        }
        if self.evaluator.backend == "subprocess" && self.evaluator.command.is_empty() {
            return invalid("evaluator.command is required for the subprocess backend");
        }
        if self.gateway.concurrency == 0 {
            return invalid("gateway.concurrency must be positive");
        }
        if !self.gateway.stub && self.gateway.endpoints.is_empty() {
            return invalid("gateway.endpoints is empty (use the stub for offline runs)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::new(TaskKind::LunarLander);
        assert_eq!((c.pool.capacity, c.pool.parents), (16, 2));
        assert_eq!(c.budgets.queries, 2000);
        assert_eq!(c.reset_budget(), 10_000);
        assert_eq!(RunConfig::new(TaskKind::CarRacing).reset_budget(), 8_000);
        assert_eq!(c.operators.enabled.len() * c.operators.offspring_per_operator as usize, 16);
        assert_eq!(c.ibe_kinds(), vec![IbeKind::FrameStackImage]);
        assert_eq!(c.ibe_max_images(), 5);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::offline(TaskKind::CarRacing);
        c.task.seed_policies = vec!["def choose_action():\n    return [0, 0, 0]\n".into()];
        c.gateway.endpoints.push(crate::gateway::EndpointConfig {
            provider: "openai".into(),
            base_url: "https://example.invalid/v1".into(),
            model_name: "m".into(),
            api_key_env_var: "KEY".into(),
            supports_images: false,
        });
        c.operators.enabled.push(OperatorKind::M1T);
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn minimal_file() {
        let c = RunConfig::from_toml(
            "[task]\nname = \"lunar_lander\"\n[operators]\nenabled = [\"M1_T\", \"E1\"]\n[evaluator]\nbackend = \"stub\"\n[gateway]\nstub = true\n",
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.operators.enabled, vec![OperatorKind::M1T, OperatorKind::E1]);
        assert_eq!(c.ibe_kinds(), vec![IbeKind::TextStateTrace]);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[task]\nname = \"pong\"\n").is_err());
        assert!(RunConfig::from_toml("[task]\nname = \"car_racing\"\n[pool]\nsize = 3\n").is_err());
        let mut c = RunConfig::offline(TaskKind::LunarLander);
        c.operators.enabled.clear();
        assert!(c.validate().is_err());
        let c = RunConfig::new(TaskKind::LunarLander);
        assert!(c.validate().is_err(), "no endpoints and no evaluator command");
    }
}
