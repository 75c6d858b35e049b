//! Chat-completion ensemble with budget enforcement and retries.

mod budget;
mod image_fit;
mod openai;
mod stub;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use budget::{BudgetCounters, BudgetError, BudgetLedger, QueryReservation, ResetReservation};
pub use image_fit::{fit_image, MAX_IMAGE_BYTES};
pub use openai::OpenAiCompatBackend;
pub use stub::{mutate_numeric_literal, StubBackend};

use crate::model::ArtifactStore;
use crate::operators::PromptBundle;

pub const DEFAULT_QUERY_BUDGET: u64 = 2000;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error(transparent)]
    BudgetExhausted(#[from] BudgetError),
    #[error("endpoint {endpoint} failed after {attempts} attempts: {detail}")]
    EndpointFailure {
        endpoint: String,
        attempts: u32,
        detail: String,
    },
    #[error("prompt carries images but no configured endpoint accepts them")]
    ImageUnsupported,
    #[error("gateway needs at least one endpoint")]
    NoEndpoints,
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingApiKey(String),
    #[error("unknown chat provider `{0}`")]
    UnknownProvider(String),
    #[error("gateway configuration: {0}")]
    Config(String),
}

/// Failure of one completion attempt.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Worth retrying: connection trouble, rate limiting, server errors.
    #[error("transport: {0}")]
    Transport(String),
    /// Not worth retrying: the provider refused the request.
    #[error("rejected: {0}")]
    Rejected(String),
}

pub struct CompletionRequest<'a> {
    pub bundle: &'a PromptBundle,
    /// Index of this completion among the k requested for one bundle.
    pub completion_index: u32,
    pub temperature: f64,
}

/// One chat-completion endpoint.
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn supports_images(&self) -> bool;
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    #[serde(default = "default_provider")]
    pub provider: String,
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub api_key_env_var: String,
    #[serde(default = "default_true")]
    pub supports_images: bool,
}

fn default_provider() -> String {
    "openai".into()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoints: Vec<EndpointConfig>,
    pub temperature: f64,
    pub max_retries: u32,
    pub request_timeout_secs: u64,
    pub retry_backoff_ms: u64,
    /// Concurrent in-flight requests per generation.
    pub concurrency: usize,
    /// Replace every endpoint with the deterministic stub backend.
    pub stub: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoints: Vec::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_retries: 3,
            request_timeout_secs: 120,
            retry_backoff_ms: 500,
            concurrency: 4,
            stub: false,
        }
    }
}

type BackendFactory =
    Box<dyn Fn(&EndpointConfig, &GatewayConfig, &ArtifactStore) -> Result<Arc<dyn ChatBackend>, GatewayError> + Send + Sync>;

/// Chat providers by name.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl BackendRegistry {
    pub fn empty() -> Self {
        BackendRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// `openai` (any OpenAI-compatible chat completions API) and `stub`.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register("openai", |endpoint, gateway, store| {
            Ok(Arc::new(OpenAiCompatBackend::from_config(endpoint, gateway, store.clone())?) as Arc<dyn ChatBackend>)
        });
        r.register("stub", |_, _, _| Ok(Arc::new(StubBackend::new()) as Arc<dyn ChatBackend>));
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&EndpointConfig, &GatewayConfig, &ArtifactStore) -> Result<Arc<dyn ChatBackend>, GatewayError>
            + Send
            + Sync
            + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn build(
        &self,
        endpoint: &EndpointConfig,
        gateway: &GatewayConfig,
        store: &ArtifactStore,
    ) -> Result<Arc<dyn ChatBackend>, GatewayError> {
        let factory = self
            .factories
            .get(&endpoint.provider)
            .ok_or_else(|| GatewayError::UnknownProvider(endpoint.provider.clone()))?;
        factory(endpoint, gateway, store)
    }
}

/// Round-robin ensemble over chat backends.
///
/// Query `q` of the run goes to eligible endpoint `q mod n`, so routing is a
/// function of the budget counter and survives resume.
pub struct Gateway {
    backends: Vec<Arc<dyn ChatBackend>>,
    temperature: f64,
    max_retries: u32,
    retry_backoff: Duration,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backends", &self.backends.iter().map(|b| b.name()).collect::<Vec<_>>())
            .field("temperature", &self.temperature)
            .field("max_retries", &self.max_retries)
            .finish()
    }
}

impl Gateway {
    pub fn new(backends: Vec<Arc<dyn ChatBackend>>, config: &GatewayConfig) -> Result<Self, GatewayError> {
        if backends.is_empty() {
            return Err(GatewayError::NoEndpoints);
        }
        Ok(Gateway {
            backends,
            temperature: config.temperature,
            max_retries: config.max_retries,
            retry_backoff: Duration::from_millis(config.retry_backoff_ms),
        })
    }

    /// A gateway backed only by the stub.
    pub fn stub() -> Self {
        Gateway::new(vec![Arc::new(StubBackend::new())], &GatewayConfig::default())
            .expect("one backend")
    }

    pub fn from_config(
        config: &GatewayConfig,
        registry: &BackendRegistry,
        store: &ArtifactStore,
    ) -> Result<Self, GatewayError> {
        if config.stub {
            return Gateway::new(vec![Arc::new(StubBackend::new())], config);
        }
        let backends = config
            .endpoints
            .iter()
            .map(|e| registry.build(e, config, store))
            .collect::<Result<Vec<_>, _>>()?;
        Gateway::new(backends, config)
    }

    pub fn supports_images(&self) -> bool {
        self.backends.iter().any(|b| b.supports_images())
    }

    fn eligible(&self, bundle: &PromptBundle) -> Result<Vec<&Arc<dyn ChatBackend>>, GatewayError> {
        let needs_images = bundle.has_images();
        let eligible: Vec<_> = self
            .backends
            .iter()
            .filter(|b| !needs_images || b.supports_images())
            .collect();
        if eligible.is_empty() {
            Err(GatewayError::ImageUnsupported)
        } else {
            Ok(eligible)
        }
    }

    /// Checks that some endpoint can take `bundle`.
    pub fn can_serve(&self, bundle: &PromptBundle) -> Result<(), GatewayError> {
        self.eligible(bundle).map(|_| ())
    }

    /// `k` independent completions. The budget is charged `k` queries up
    /// front; a slot whose endpoint keeps failing yields an error entry.
    pub fn generate(
        &self,
        bundle: &PromptBundle,
        k: u64,
        budget: &BudgetLedger,
    ) -> Result<Vec<Result<String, GatewayError>>, GatewayError> {
        self.can_serve(bundle)?;
        let reservation = budget.reserve_queries(k)?;
        Ok(self.generate_reserved(bundle, &reservation))
    }

    pub fn generate_reserved(
        &self,
        bundle: &PromptBundle,
        reservation: &QueryReservation,
    ) -> Vec<Result<String, GatewayError>> {
        (0..reservation.count)
            .map(|slot| self.complete_reserved(bundle, reservation.query_index(slot), slot as u32))
            .collect()
    }

    /// One completion for an already reserved query, retrying transport
    /// failures up to `max_retries` times. Retries do not consume budget.
    pub fn complete_reserved(
        &self,
        bundle: &PromptBundle,
        query_index: u64,
        completion_index: u32,
    ) -> Result<String, GatewayError> {
        let eligible = self.eligible(bundle)?;
        let backend = eligible[(query_index % eligible.len() as u64) as usize];
        let request = CompletionRequest {
            bundle,
            completion_index,
            temperature: self.temperature,
        };
        let mut attempts = 0;
        loop {
            attempts += 1;
            match backend.complete(&request) {
                Ok(text) => return Ok(text),
                Err(BackendError::Transport(detail)) if attempts <= self.max_retries => {
                    log::warn!("{}: attempt {attempts} failed: {detail}", backend.name());
                    if !self.retry_backoff.is_zero() {
                        std::thread::sleep(self.retry_backoff * attempts);
                    }
                }
                Err(e) => {
                    return Err(GatewayError::EndpointFailure {
                        endpoint: backend.name().to_string(),
                        attempts,
                        detail: e.to_string(),
                    })
                }
            }
        }
    }
}
