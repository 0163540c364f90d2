//! Two-layer concept classifier standing in for the image detectors.

use serde::{Deserialize, Serialize};

use crate::conditioning::{ConceptWorld, Point};
use crate::rng::Stream;
use crate::tensor::{OptimizerState, Param, Tensor};
use crate::{Error, Result};

pub const ACCURACY_GATE: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 1500,
            batch_size: 128,
            learning_rate: 1e-2,
            holdout: 6000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptClassifier {
    pub num_classes: usize,
    pub params: Vec<Param>,
    pub final_loss: f64,
    pub holdout_accuracy: f64,
}

impl ConceptClassifier {
    fn logits_of(params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&params[0])?.add_row_bias(&params[1])?.silu()?;
        Ok(h.matmul(&params[2])?.add_row_bias(&params[3])?)
    }

    /// `[n × K]` class scores.
    pub fn logits(&self, points: &[Point]) -> Result<Vec<f64>> {
        let x = points_tensor(points)?;
        let params: Vec<Tensor> = self.params.iter().map(Param::constant).collect();
        Ok(Self::logits_of(&params, &x)?.to_vec())
    }

    /// Argmax class per point.
    pub fn classify(&self, points: &[Point]) -> Result<Vec<usize>> {
        let logits = self.logits(points)?;
        Ok(logits.chunks_exact(self.num_classes).map(argmax).collect())
    }

    /// Softmax probabilities, `[n × K]`.
    pub fn probabilities(&self, points: &[Point]) -> Result<Vec<f64>> {
        let mut logits = self.logits(points)?;
        for row in logits.chunks_exact_mut(self.num_classes) {
            crate::tensor::softmax_in_place(row);
        }
        Ok(logits)
    }

    pub fn accuracy_on(&self, points: &[Point], labels: &[usize]) -> Result<f64> {
        let pred = self.classify(points)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn points_tensor(points: &[Point]) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        &[points.len(), 2],
        points.iter().flat_map(|p| p.iter().copied()).collect(),
    )?)
}

fn labeled_batch(world: &ConceptWorld, n: usize, rng: &mut Stream) -> (Vec<Point>, Vec<usize>) {
    let k = world.num_concepts();
    (0..n)
        .map(|_| {
            let c = rng.below(k);
            (world.sample_point(c, rng), c)
        })
        .unzip()
}

/// Cross-entropy training on freshly drawn mixture points; fails loudly when
/// the held-out accuracy misses [`ACCURACY_GATE`].
pub fn train_classifier(world: &ConceptWorld, cfg: &ClassifierConfig, seed: u64) -> Result<ConceptClassifier> {
    let k = world.num_concepts();
    if k == 0 {
        return Err(Error::EmptyWorld);
    }
    let mut rng = Stream::labeled(seed, "classifier");
    let scale = 1.0 / world.config.radius;
    let h = cfg.hidden;
    let mut params = vec![
        Param::new("cls.w1", &[2, h], rng.normals(2 * h).into_iter().map(|x| x * scale * 2.0).collect()),
        Param::new("cls.b1", &[h], vec![0.0; h]),
        Param::new("cls.w2", &[h, k], rng.normals(h * k).into_iter().map(|x| x / (h as f64).sqrt()).collect()),
        Param::new("cls.b2", &[k], vec![0.0; k]),
    ];
    let mut opt = OptimizerState::adam(cfg.learning_rate, 0.0);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let (pts, labels) = labeled_batch(world, cfg.batch_size, &mut rng);
        let bound: Vec<Tensor> = params.iter().map(Param::bind).collect();
        let loss = ConceptClassifier::logits_of(&bound, &points_tensor(&pts)?)?.cross_entropy(&labels)?;
        loss.backward()?;
        final_loss = loss.item();
        let grads: Vec<Option<Vec<f64>>> = bound.iter().map(Tensor::grad).collect();
        opt.step(params.iter_mut().zip(grads.iter().map(|g| g.as_deref())))?;
    }
    let mut clf = ConceptClassifier {
        num_classes: k,
        params,
        final_loss,
        holdout_accuracy: 0.0,
    };
    let mut hold_rng = Stream::labeled(seed, "classifier-holdout");
    let (pts, labels) = labeled_batch(world, cfg.holdout, &mut hold_rng);
    clf.holdout_accuracy = clf.accuracy_on(&pts, &labels)?;
    if clf.holdout_accuracy < ACCURACY_GATE {
        return Err(Error::ClassifierGate {
            accuracy: clf.holdout_accuracy,
            required: ACCURACY_GATE,
        });
    }
    Ok(clf)
}
