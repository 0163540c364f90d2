//! Restoration accuracy and attack × model transfer matrices.

use serde::{Deserialize, Serialize};

use super::classifier::ConceptClassifier;
use crate::conditioning::PromptSpec;
use crate::diffusion::{sample, NoiseSchedule, Sampler};
use crate::model::DenoiserModel;
use crate::par;
use crate::rng::{derive_seed, label_key};
use crate::{Error, Result};

/// What the attacker feeds the model: a literal concept token or an
/// embedding bound at the placeholder of `[NEUTRAL, S*]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum AttackInput {
    Token(usize),
    Embedding(Vec<f64>),
}

impl AttackInput {
    pub fn prompt(&self) -> PromptSpec {
        match self {
            AttackInput::Token(k) => PromptSpec::concept(*k),
            AttackInput::Embedding(v) => PromptSpec::placeholder(v.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub accuracy: f64,
    pub n: usize,
    pub mean_target_prob: f64,
}

/// Sampling and classification settings shared by every accuracy query.
#[derive(Clone, Copy)]
pub struct Evaluator<'a> {
    pub classifier: &'a ConceptClassifier,
    pub sched: &'a NoiseSchedule,
    pub sampler: Sampler,
    pub n: usize,
    pub workers: usize,
}

impl Evaluator<'_> {
    /// Fraction of `n` generated samples whose argmax class is `target`.
    pub fn restoration_accuracy(
        &self,
        model: &DenoiserModel,
        input: &AttackInput,
        target: usize,
        seed: u64,
    ) -> Result<AccuracyCell> {
        self.accuracy_with_workers(model, input, target, seed, self.workers)
    }

    fn accuracy_with_workers(
        &self,
        model: &DenoiserModel,
        input: &AttackInput,
        target: usize,
        seed: u64,
        workers: usize,
    ) -> Result<AccuracyCell> {
        if target >= self.classifier.num_classes {
            return Err(Error::UnknownToken(format!("c_{target}")));
        }
        let points = sample(model, &input.prompt(), self.n, self.sched, self.sampler, seed, workers)?;
        let k = self.classifier.num_classes;
        let probs = self.classifier.probabilities(&points)?;
        let mut hits = 0;
        let mut prob = 0.0;
        for row in probs.chunks_exact(k) {
            if super::classifier::argmax(row) == target {
                hits += 1;
            }
            prob += row[target];
        }
        Ok(AccuracyCell {
            accuracy: hits as f64 / self.n as f64,
            n: self.n,
            mean_target_prob: prob / self.n as f64,
        })
    }

    /// Histogram of argmax classes for `n` samples under `prompt`.
    pub fn class_histogram(&self, model: &DenoiserModel, prompt: &PromptSpec, seed: u64) -> Result<Vec<usize>> {
        let points = sample(model, prompt, self.n, self.sched, self.sampler, seed, self.workers)?;
        let mut h = vec![0; self.classifier.num_classes];
        for c in self.classifier.classify(&points)? {
            h[c] += 1;
        }
        Ok(h)
    }
}

/// Total-variation distance between two count histograms.
pub fn total_variation(a: &[usize], b: &[usize]) -> f64 {
    let na = a.iter().sum::<usize>().max(1) as f64;
    let nb = b.iter().sum::<usize>().max(1) as f64;
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs())
        .sum::<f64>()
}

#[derive(Clone, Copy)]
pub struct EvalModel<'a> {
    pub id: &'a str,
    pub model: &'a DenoiserModel,
    pub unlearned: bool,
}

/// One row of the matrix: the same input everywhere, or one per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttackInputs {
    Shared(AttackInput),
    PerModel(Vec<AttackInput>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attack {
    pub id: String,
    pub inputs: AttackInputs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelColumn {
    pub id: String,
    pub unlearned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub id: String,
    pub cells: Vec<AccuracyCell>,
    /// Mean accuracy over every cell of the row.
    pub average: f64,
    /// Mean accuracy over the unlearned columns only.
    pub unlearned_average: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub target: usize,
    pub n: usize,
    pub columns: Vec<ModelColumn>,
    pub rows: Vec<AttackRow>,
}

impl TransferMatrix {
    pub fn row(&self, id: &str) -> Option<&AttackRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn column_index(&self, id: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.id == id)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Seed for every cell in a model's column; sharing it across attacks gives
/// paired comparisons on identical starting noise.
pub fn column_seed(seed: u64, model_id: &str) -> u64 {
    derive_seed(seed, &[label_key(model_id)])
}

/// Fills every `(attack, model)` cell; cells run in parallel with `workers`.
pub fn build_transfer_matrix(
    eval: &Evaluator<'_>,
    models: &[EvalModel<'_>],
    attacks: &[Attack],
    target: usize,
    seed: u64,
) -> Result<TransferMatrix> {
    let mut jobs = Vec::with_capacity(models.len() * attacks.len());
    for (r, attack) in attacks.iter().enumerate() {
        for c in 0..models.len() {
            let input = match &attack.inputs {
                AttackInputs::Shared(i) => i,
                AttackInputs::PerModel(v) => v.get(c).ok_or_else(|| {
                    Error::Config(format!("attack `{}` has {} inputs for {} models", attack.id, v.len(), models.len()))
                })?,
            };
            jobs.push((r, c, input));
        }
    }
    let cells = par::map(&jobs, eval.workers, |&(_, c, input)| {
        let m = &models[c];
        eval.accuracy_with_workers(m.model, input, target, column_seed(seed, m.id), 1)
    });
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = attacks
        .iter()
        .enumerate()
        .map(|(r, attack)| {
            let row: Vec<AccuracyCell> = cells[r * models.len()..(r + 1) * models.len()].to_vec();
            AttackRow {
                id: attack.id.clone(),
                average: mean(row.iter().map(|c| c.accuracy)).unwrap_or(0.0),
                unlearned_average: mean(
                    row.iter()
                        .zip(models)
                        .filter(|(_, m)| m.unlearned)
                        .map(|(c, _)| c.accuracy),
                ),
                cells: row,
            }
        })
        .collect();
    Ok(TransferMatrix {
        target,
        n: eval.n,
        columns: models
            .iter()
            .map(|m| ModelColumn {
                id: m.id.to_string(),
                unlearned: m.unlearned,
            })
            .collect(),
        rows,
    })
}
