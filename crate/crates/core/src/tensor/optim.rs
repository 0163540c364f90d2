//! First-order optimizers over named parameter buffers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// A named, trainable buffer owned by a model. Graphs borrow it through
/// [`Param::bind`] (gradient-tracking leaf) or [`Param::constant`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        let p = Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        };
        assert_eq!(p.shape.iter().product::<usize>(), p.data.len(), "param {}", p.name);
        p
    }

    pub fn bind(&self) -> Tensor {
        Tensor::variable(&self.shape, self.data.clone()).expect("param holds finite values")
    }

    pub fn constant(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.clone()).expect("param holds finite values")
    }

    /// Either a gradient-tracking leaf or a constant.
    pub fn tensor(&self, trainable: bool) -> Tensor {
        if trainable {
            self.bind()
        } else {
            self.constant()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, weight_decay)
    }

    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate, weight_decay)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        assert!(weight_decay >= 0.0, "weight decay must be non-negative");
        Self {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every `(param, grad)` pair. Nothing is modified
    /// if any gradient is missing or mis-sized.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut Param, Option<&'a [f64]>)>,
    {
        let updates: Vec<_> = updates.into_iter().collect();
        for (p, g) in &updates {
            match g {
                None => return Err(TensorError::MissingGrad(p.name.clone())),
                Some(g) if g.len() != p.data.len() => {
                    return Err(TensorError::Shape {
                        op: "optimizer_step",
                        left: p.shape.clone(),
                        right: vec![g.len()],
                    })
                }
                _ => {}
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;
        for (p, g) in updates {
            let g = g.expect("checked above");
            if self.weight_decay > 0.0 {
                p.data.iter_mut().for_each(|x| *x *= decay);
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    p.data.iter_mut().zip(g).for_each(|(x, gi)| *x -= lr * gi);
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
                    let m = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                        first: vec![0.0; g.len()],
                        second: vec![0.0; g.len()],
                    });
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    for i in 0..g.len() {
                        m.first[i] = b1 * m.first[i] + (1.0 - b1) * g[i];
                        m.second[i] = b2 * m.second[i] + (1.0 - b2) * g[i] * g[i];
                        let mh = m.first[i] / c1;
                        let vh = m.second[i] / c2;
                        p.data[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
