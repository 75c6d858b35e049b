#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use mles_core::gateway::{
    BackendError, ChatBackend, CompletionRequest, EndpointConfig, GatewayError, StubBackend,
};
use mles_core::orchestrator::{Backends, Engine, RunConfig};
use mles_core::TaskKind;

pub fn offline(task: TaskKind, queries: u64) -> RunConfig {
    let mut config = RunConfig::offline(task);
    config.budgets.queries = queries;
    config
}

pub fn backends(config: &RunConfig) -> Backends {
    Backends::standard(config.pool.parents)
}

pub fn engine(config: RunConfig, dir: &Path) -> Engine {
    let b = backends(&config);
    Engine::create(config, dir, b).expect("engine starts")
}

/// Runs a fresh search to completion and returns the ledger bytes.
pub fn full_run(config: RunConfig, dir: &Path) -> String {
    let mut e = engine(config, dir);
    e.run_search().expect("search completes");
    drop(e);
    std::fs::read_to_string(dir.join("ledger.jsonl")).unwrap()
}

/// The stub backend, except that the first `garbage` replies carry no code.
pub struct GarbageFirst {
    left: AtomicUsize,
    inner: StubBackend,
}

impl ChatBackend for GarbageFirst {
    fn name(&self) -> &str {
        "garbage-first"
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let take = self
            .left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if take {
            return Ok("I would rather not write code today.".into());
        }
        self.inner.complete(request)
    }
}

/// A config routed to a `garbage-first` provider that fails `garbage`
/// parses before behaving like the stub.
pub fn garbage_first(task: TaskKind, queries: u64, garbage: usize) -> (RunConfig, Backends) {
    let mut config = offline(task, queries);
    config.gateway.stub = false;
    config.gateway.endpoints = vec![EndpointConfig {
        provider: "garbage-first".into(),
        base_url: String::new(),
        model_name: "scripted".into(),
        api_key_env_var: String::new(),
        supports_images: true,
    }];
    let mut b = backends(&config);
    b.chat.register("garbage-first", move |_, _, _| {
        Ok::<_, GatewayError>(Arc::new(GarbageFirst {
            left: AtomicUsize::new(garbage),
            inner: StubBackend::new(),
        }) as Arc<dyn ChatBackend>)
    });
    (config, b)
}
