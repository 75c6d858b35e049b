//! Aggregate scores over evaluation instances.

use thiserror::Error;

use crate::model::{InstanceMetrics, QuantitativeMetrics, TaskKind, TaskOutcome};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric argument out of domain: {0}")]
    Domain(String),
    #[error("per-instance metrics mix tasks")]
    MixedTask,
    #[error("no per-instance metrics")]
    Empty,
}

/// Lunar Lander normalized weight score from mean reward `r`, mean fuel
/// `c` and success rate `s`. The reward term is not clamped.
pub fn compute_nws(r: f64, c: f64, s: f64) -> Result<f64, MetricsError> {
    if c.is_nan() || c < 0.0 {
        return Err(MetricsError::Domain(format!("fuel {c} is negative")));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(MetricsError::Domain(format!("success rate {s} outside [0, 1]")));
    }
    Ok(r / 200.0 * 0.6 + (1.0 - (c / 100.0).min(1.0)) * 0.2 + s * 0.2)
}

/// Percent of track tiles visited.
pub fn completion_from_tiles(visited: u64, total: u64) -> Result<f64, MetricsError> {
    if total == 0 || visited > total {
        return Err(MetricsError::Domain(format!("{visited} of {total} tiles")));
    }
    Ok(visited as f64 / total as f64 * 100.0)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn metrics(per_instance: &[InstanceMetrics], aggregate_score: f64) -> QuantitativeMetrics {
    QuantitativeMetrics {
        aggregate_score,
        per_instance: per_instance.to_vec(),
        resets_used: per_instance.len() as u64,
        failure: None,
    }
}

pub fn aggregate_lander(per_instance: &[InstanceMetrics]) -> Result<QuantitativeMetrics, MetricsError> {
    if per_instance.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut fuel = Vec::with_capacity(per_instance.len());
    let mut success = Vec::with_capacity(per_instance.len());
    for m in per_instance {
        match m.outcome {
            TaskOutcome::LunarLander { fuel: f, success: s } => {
                fuel.push(f);
                success.push(if s { 1.0 } else { 0.0 });
            }
            _ => return Err(MetricsError::MixedTask),
        }
    }
    let r = mean(per_instance.iter().map(|m| m.episode_reward));
    let score = compute_nws(r, mean(fuel.into_iter()), mean(success.into_iter()))?;
    Ok(metrics(per_instance, score))
}

pub fn aggregate_racing(per_instance: &[InstanceMetrics]) -> Result<QuantitativeMetrics, MetricsError> {
    if per_instance.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut completions = Vec::with_capacity(per_instance.len());
    for m in per_instance {
        match m.outcome {
            TaskOutcome::CarRacing { completion } => completions.push(completion),
            _ => return Err(MetricsError::MixedTask),
        }
    }
    Ok(metrics(per_instance, mean(completions.into_iter())))
}

pub fn aggregate(task: TaskKind, per_instance: &[InstanceMetrics]) -> Result<QuantitativeMetrics, MetricsError> {
    match task {
        TaskKind::LunarLander => aggregate_lander(per_instance),
        TaskKind::CarRacing => aggregate_racing(per_instance),
    }
}

/// Score of a single instance on the task's aggregate scale.
pub fn instance_score(m: &InstanceMetrics) -> Result<f64, MetricsError> {
    match m.outcome {
        TaskOutcome::LunarLander { fuel, success } => {
            compute_nws(m.episode_reward, fuel, if success { 1.0 } else { 0.0 })
        }
        TaskOutcome::CarRacing { completion } => Ok(completion),
    }
}
