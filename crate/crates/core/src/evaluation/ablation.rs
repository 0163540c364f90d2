//! Restoration scores of the running embedding, with and without the
//! parameter phases.

use serde::{Deserialize, Serialize};

use super::metrics::{column_seed, AttackInput, EvalModel, Evaluator};
use crate::conditioning::ConceptWorld;
use crate::diffusion::NoiseSchedule;
use crate::model::DenoiserModel;
use crate::par;
use crate::restoration::{adversarial_search, AsConfig, CandidateSet};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub epoch: usize,
    /// Per-model argmax accuracy.
    pub accuracy: Vec<f64>,
    /// Per-model mean classifier probability of the target.
    pub mean_prob: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTrace {
    pub models: Vec<String>,
    pub record_every: usize,
    pub with_search: Vec<TracePoint>,
    pub without_search: Vec<TracePoint>,
}

/// Per-model mean accuracy over the last quarter of the records (at least
/// one record).
pub fn end_mean(trace: &[TracePoint]) -> Vec<f64> {
    let Some(first) = trace.first() else {
        return Vec::new();
    };
    let k = trace.len().div_ceil(4).max(1);
    let tail = &trace[trace.len() - k..];
    (0..first.accuracy.len())
        .map(|m| tail.iter().map(|p| p.accuracy[m]).sum::<f64>() / k as f64)
        .collect()
}

/// Epochs `0, r, 2r, … < E`.
pub fn record_epochs(epochs: usize, record_every: usize) -> Vec<usize> {
    (0..epochs).step_by(record_every.max(1)).collect()
}

/// Scores the snapshots of `set` taken at every multiple of `record_every`.
pub fn score_trace(
    set: &CandidateSet,
    eval: &Evaluator<'_>,
    models: &[EvalModel<'_>],
    record_every: usize,
    seed: u64,
) -> Result<Vec<TracePoint>> {
    if record_every == 0 {
        return Err(Error::Config("record_every must be at least 1".into()));
    }
    let epochs = record_epochs(set.len(), record_every);
    let jobs: Vec<(usize, usize)> = epochs
        .iter()
        .flat_map(|&e| (0..models.len()).map(move |m| (e, m)))
        .collect();
    let cells = par::map(&jobs, eval.workers, |&(e, m)| {
        let input = AttackInput::Embedding(set.entries[e].embedding.clone());
        let single = Evaluator { workers: 1, ..*eval };
        single.restoration_accuracy(models[m].model, &input, set.target, column_seed(seed, models[m].id))
    });
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(epochs
        .iter()
        .enumerate()
        .map(|(r, &epoch)| {
            let row = &cells[r * models.len()..(r + 1) * models.len()];
            TracePoint {
                epoch,
                accuracy: row.iter().map(|c| c.accuracy).collect(),
                mean_prob: row.iter().map(|c| c.mean_target_prob).collect(),
            }
        })
        .collect())
}

/// Runs the search twice (with and without parameter phases, same seed) and
/// scores both trajectories on every model.
#[allow(clippy::too_many_arguments)]
pub fn ablation_trace(
    surrogate: &DenoiserModel,
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    target: usize,
    cfg: &AsConfig,
    eval: &Evaluator<'_>,
    models: &[EvalModel<'_>],
    record_every: usize,
    seed: u64,
) -> Result<AblationTrace> {
    if record_every == 0 {
        return Err(Error::Config("record_every must be at least 1".into()));
    }
    let with = adversarial_search(surrogate, world, sched, target, &AsConfig { adversarial: true, ..cfg.clone() }, seed)?;
    let without = adversarial_search(surrogate, world, sched, target, &AsConfig { adversarial: false, ..cfg.clone() }, seed)?;
    from_candidate_sets(&with, &without, eval, models, record_every, seed)
}

/// Same as [`ablation_trace`] for already computed runs.
pub fn from_candidate_sets(
    with: &CandidateSet,
    without: &CandidateSet,
    eval: &Evaluator<'_>,
    models: &[EvalModel<'_>],
    record_every: usize,
    seed: u64,
) -> Result<AblationTrace> {
    Ok(AblationTrace {
        models: models.iter().map(|m| m.id.to_string()).collect(),
        record_every,
        with_search: score_trace(with, eval, models, record_every, seed)?,
        without_search: score_trace(without, eval, models, record_every, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_schedule() {
        assert_eq!(record_epochs(10, 20), vec![0]);
        assert_eq!(record_epochs(10, 3), vec![0, 3, 6, 9]);
        assert_eq!(record_epochs(9, 3), vec![0, 3, 6]);
    }

    #[test]
    fn end_mean_uses_last_quarter() {
        let p = |e, a: f64| TracePoint {
            epoch: e,
            accuracy: vec![a, 1.0 - a],
            mean_prob: vec![0.0, 0.0],
        };
        let trace: Vec<TracePoint> = (0..8).map(|i| p(i, i as f64 / 10.0)).collect();
        let m = end_mean(&trace);
        assert!((m[0] - 0.65).abs() < 1e-12);
        assert!((m[1] - 0.35).abs() < 1e-12);
        assert_eq!(end_mean(&trace[..1]), vec![0.0, 1.0]);
    }
}
