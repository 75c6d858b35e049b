//! Deterministic stand-in evaluator that never runs policy code.

use std::io::Cursor;

use base64::Engine;
use image::{ImageFormat, Rgb, RgbImage};
use sha2::{Digest, Sha256};

use super::handle::EvalServer;
use super::metrics::aggregate;
use super::protocol::{
    EvalRequest, EvalResponse, EvaluationReport, Handshake, IbePayload, RequestKind, ResponseStatus,
    CAP_ENSEMBLE, CAP_EVALUATE, PROTOCOL,
};
use crate::model::{IbeKind, InstanceMetrics, TaskKind, TaskOutcome};

pub const DEFAULT_TARGET_LEN: usize = 4000;

/// Scores code by length: `1 / (1 + |len - target|)`, identical on every
/// instance. Code containing `raise ` is reported as a policy error.
///
/// Lunar Lander instances report reward `score / 0.003`, full fuel use and
/// no landing, so the aggregate equals the score. Car Racing instances
/// report `100 * score` completion.
#[derive(Debug, Clone)]
pub struct StubEvaluator {
    target_len: usize,
    ensemble: bool,
}

impl Default for StubEvaluator {
    fn default() -> Self {
        Self::new(DEFAULT_TARGET_LEN)
    }
}

impl StubEvaluator {
    pub fn new(target_len: usize) -> Self {
        StubEvaluator {
            target_len,
            ensemble: true,
        }
    }

    pub fn without_ensemble(mut self) -> Self {
        self.ensemble = false;
        self
    }

    pub fn score(&self, code: &str) -> f64 {
        let len = code.chars().count();
        1.0 / (1.0 + len.abs_diff(self.target_len) as f64)
    }

    fn instance(&self, task: TaskKind, instance_id: &str, score: f64) -> InstanceMetrics {
        match task {
            TaskKind::LunarLander => InstanceMetrics {
                instance_id: instance_id.to_string(),
                episode_reward: score / 0.003,
                steps: 200,
                outcome: TaskOutcome::LunarLander {
                    fuel: 100.0,
                    success: false,
                },
            },
            TaskKind::CarRacing => InstanceMetrics {
                instance_id: instance_id.to_string(),
                episode_reward: 1000.0 * score,
                steps: 1000,
                outcome: TaskOutcome::CarRacing {
                    completion: 100.0 * score,
                },
            },
        }
    }

    fn report(&self, request: &EvalRequest, score: f64) -> Result<EvaluationReport, String> {
        let task = request.task.ok_or("missing task")?;
        let per_instance: Vec<_> = request
            .instance_ids
            .iter()
            .map(|id| self.instance(task, id, score))
            .collect();
        let agg = aggregate(task, &per_instance).map_err(|e| e.to_string())?;
        Ok(EvaluationReport {
            aggregate_score: agg.aggregate_score,
            resets: per_instance.len() as u64,
            per_instance,
        })
    }
}

fn evidence_png(digest: &[u8]) -> Vec<u8> {
    let img = RgbImage::from_fn(8, 8, |x, y| {
        let i = ((y * 8 + x) as usize * 3) % digest.len();
        Rgb([digest[i], digest[(i + 1) % digest.len()], digest[(i + 2) % digest.len()]])
    });
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .expect("in-memory png encode");
    out
}

fn evidence_trace(digest: &[u8]) -> Vec<u8> {
    let mut out = String::from("step x y\n");
    for (step, pair) in digest.chunks(2).take(4).enumerate() {
        out.push_str(&format!(
            "{} {:.4} {:.4}\n",
            step * 30,
            pair[0] as f64 / 255.0,
            pair[1] as f64 / 255.0
        ));
    }
    out.into_bytes()
}

fn payloads(request: &EvalRequest, code: &str) -> Vec<IbePayload> {
    let engine = base64::engine::general_purpose::STANDARD;
    let mut out = Vec::new();
    for id in &request.instance_ids {
        for &kind in &request.ibe_kinds {
            let digest = Sha256::new()
                .chain_update(code.as_bytes())
                .chain_update(id.as_bytes())
                .chain_update([kind as u8])
                .finalize();
            let bytes = if kind == IbeKind::TextStateTrace {
                evidence_trace(&digest)
            } else {
                evidence_png(&digest)
            };
            out.push(IbePayload {
                kind,
                instance_id: id.clone(),
                media_type: kind.media_type(),
                content_base64: engine.encode(bytes),
            });
        }
    }
    out
}

impl EvalServer for StubEvaluator {
    fn handshake(&self) -> Handshake {
        let mut capabilities = vec![CAP_EVALUATE.to_string()];
        if self.ensemble {
            capabilities.push(CAP_ENSEMBLE.to_string());
        }
        Handshake {
            protocol: PROTOCOL.to_string(),
            tasks: vec![TaskKind::LunarLander, TaskKind::CarRacing],
            ibe_kinds: vec![
                IbeKind::FrameStackImage,
                IbeKind::TrajectoryMapImage,
                IbeKind::TextStateTrace,
            ],
            capabilities,
            environments: vec![("stub".into(), env!("CARGO_PKG_VERSION").into())],
        }
    }

    fn handle(&mut self, request: &EvalRequest) -> EvalResponse {
        let id = request.request_id;
        let n = request.instance_ids.len() as u64;
        let protocol_error = |detail: String| EvalResponse::failure(id, ResponseStatus::ProtocolError, detail, 0);
        if let Err(e) = request.validate() {
            return protocol_error(e);
        }
        let (score, code) = match request.kind {
            RequestKind::Evaluate => {
                let code = request.code.as_deref().unwrap_or_default();
                if code.contains("raise ") {
                    return EvalResponse::failure(
                        id,
                        ResponseStatus::PolicyError,
                        "policy raised an exception",
                        n,
                    );
                }
                (self.score(code), code.to_string())
            }
            RequestKind::EnsembleEvaluate => {
                if !self.ensemble {
                    return protocol_error("ensemble evaluation not supported".into());
                }
                let total: f64 = request.codes.iter().map(|c| self.score(c)).sum();
                (total / request.codes.len() as f64, request.codes.join("\n"))
            }
            RequestKind::Shutdown => return protocol_error("shutdown has no response".into()),
        };
        match self.report(request, score) {
            Ok(report) => EvalResponse {
                request_id: id,
                status: ResponseStatus::Ok,
                report: Some(report),
                error_detail: None,
                resets_performed: n,
                ibe_payloads: payloads(request, &code),
            },
            Err(e) => protocol_error(e),
        }
    }
}
