//! Evolutionary discovery of programmatic control policies with multimodal
//! language-model variation operators.
//!
//! The engine keeps a pool of evaluated policy individuals, renders
//! operator-specific few-shot prompts (optionally carrying behavioral
//! evidence images or traces of the parents), asks a chat-completion
//! ensemble for offspring, evaluates them out of process and admits the
//! survivors. Every step is recorded in an append-only ledger so runs can be
//! replayed, resumed and reported on.
//!
//! Interchangeable pieces (evolutionary operators, chat backends, evaluator
//! backends) sit behind traits and are looked up by name at run time.

pub mod eval;
pub mod gateway;
pub mod model;
pub mod operators;
pub mod orchestrator;
pub mod pool;
pub mod report;

pub use model::{
    IbeArtifactRef, IbeKind, IndividualId, InstanceMetrics, LineageRecord, MediaType,
    OperatorKind, PolicyIndividual, QuantitativeMetrics, TaskKind, TaskOutcome,
};
pub use pool::PolicyPool;
