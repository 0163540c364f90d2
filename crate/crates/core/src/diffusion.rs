//! Noise schedule, forward noising, the noise-prediction objective, base
//! training and the two reverse samplers.

use serde::{Deserialize, Serialize};

use crate::conditioning::{ConceptWorld, Point, PromptSpec};
use crate::model::{BoundModel, DenoiserModel, Trainable};
use crate::par;
use crate::rng::Stream;
use crate::tensor::{OptimizerState, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

/// `β_t` and `ᾱ_t = Π_{s≤t}(1 − β_s)` for `t = 1..=T` (stored at `t − 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β interpolation between `beta_start` and `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut prod = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                prod *= 1.0 - b;
                prod
            })
            .collect();
        Ok(Self { beta, alpha_bar })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.steps, c.beta_start, c.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimeStep { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `t ∼ Uniform({1, …, T})`.
    pub fn sample_step(&self, rng: &mut Stream) -> usize {
        rng.inclusive(1, self.steps())
    }
}

/// `z_t = √ᾱ_t · z_0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    Ok(z0.scale(ab.sqrt())?.add(&eps.scale((1.0 - ab).sqrt())?)?)
}

/// A batch of `(z_0, t, ε, z_t)` draws with per-row time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSample {
    pub z0: Vec<f64>,
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
    pub zt: Vec<f64>,
}

impl DiffusionSample {
    pub fn new(z0: Vec<f64>, t: Vec<usize>, eps: Vec<f64>, sched: &NoiseSchedule) -> Result<Self> {
        let dim = z0.len() / t.len().max(1);
        if z0.len() != eps.len() || z0.len() != dim * t.len() {
            return Err(Error::Config("z0, eps and t lengths disagree".into()));
        }
        for &s in &t {
            sched.check_step(s)?;
        }
        let mut zt = Vec::with_capacity(z0.len());
        for (row, &s) in t.iter().enumerate() {
            let ab = sched.alpha_bar(s);
            for j in 0..dim {
                let i = row * dim + j;
                zt.push(ab.sqrt() * z0[i] + (1.0 - ab).sqrt() * eps[i]);
            }
        }
        Ok(Self { z0, t, eps, zt })
    }

    /// Draws `t` and `ε` for each given clean point.
    pub fn draw(points: &[Point], sched: &NoiseSchedule, rng: &mut Stream) -> Result<Self> {
        let mut t = Vec::with_capacity(points.len());
        let mut eps = Vec::with_capacity(points.len() * 2);
        for _ in points {
            t.push(sched.sample_step(rng));
            eps.push(rng.normal());
            eps.push(rng.normal());
        }
        let z0 = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(z0, t, eps, sched)
    }

    pub fn rows(&self) -> usize {
        self.t.len()
    }

    /// Checks the reconstruction identity exactly, row by row.
    pub fn verify(&self, sched: &NoiseSchedule) -> bool {
        let dim = self.z0.len() / self.rows().max(1);
        self.t.iter().enumerate().all(|(row, &s)| {
            let ab = sched.alpha_bar(s);
            (0..dim).all(|j| {
                let i = row * dim + j;
                self.zt[i] == ab.sqrt() * self.z0[i] + (1.0 - ab).sqrt() * self.eps[i]
            })
        })
    }

    pub fn zt_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(&[self.rows(), 2], self.zt.clone())?)
    }

    pub fn eps_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(&[self.rows(), 2], self.eps.clone())?)
    }
}

/// `‖ε − ε_θ(z_t, T_text(prompt), t)‖²` (mean over the batch).
///
/// `v`, when given, is bound at the prompt's placeholder and keeps its
/// gradient.
pub fn denoise_loss(
    model: &BoundModel,
    sample: &DiffusionSample,
    prompt: &PromptSpec,
    v: Option<&Tensor>,
) -> Result<Tensor> {
    let (pred, _) = model.forward_prompt(&sample.zt_tensor()?, &sample.t, prompt, v)?;
    Ok(pred.mse(&sample.eps_tensor()?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate of the cosine decay.
    pub final_learning_rate: f64,
    /// Probability that a row is trained under the neutral prompt alone.
    pub neutral_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 128,
            learning_rate: 3e-3,
            final_learning_rate: 1e-4,
            neutral_prob: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub losses: Vec<f64>,
    pub identity_checks: usize,
}

impl TrainingReport {
    pub fn leading_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses.iter().take(k).sum::<f64>() / k as f64
    }

    pub fn trailing_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses.iter().rev().take(k).sum::<f64>() / k as f64
    }
}

pub fn cosine_lr(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let p = step as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Standard conditional training of every parameter group.
pub fn train_denoiser(
    model: &mut DenoiserModel,
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> Result<TrainingReport> {
    if world.num_concepts() == 0 || world.train_sets.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyWorld);
    }
    let mut opt = OptimizerState::adam(cfg.learning_rate, 0.0);
    let k = world.num_concepts();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut identity_checks = 0;
    for step in 0..cfg.steps {
        opt.learning_rate = cosine_lr(cfg.learning_rate, cfg.final_learning_rate, step, cfg.steps);
        // Group rows by prompt: slot 0 is the neutral prompt, slot 1 + c is c.
        let mut groups: Vec<Vec<Point>> = vec![Vec::new(); k + 1];
        for _ in 0..cfg.batch_size {
            let c = rng.below(k);
            let set = &world.train_sets[c];
            let point = set[rng.below(set.len())];
            let slot = if rng.uniform() < cfg.neutral_prob { 0 } else { 1 + c };
            groups[slot].push(point);
        }
        let bound = model.bind(Trainable::ALL);
        let mut total: Option<Tensor> = None;
        for (slot, points) in groups.iter().enumerate() {
            if points.is_empty() {
                continue;
            }
            let sample = DiffusionSample::draw(points, sched, rng)?;
            if step % 500 == 0 {
                if !sample.verify(sched) {
                    return Err(Error::Config("reconstruction identity violated".into()));
                }
                identity_checks += 1;
            }
            let prompt = if slot == 0 {
                PromptSpec::neutral()
            } else {
                PromptSpec::concept(slot - 1)
            };
            let weight = points.len() as f64 / cfg.batch_size as f64;
            let loss = denoise_loss(&bound, &sample, &prompt, None)?.scale(weight)?;
            total = Some(match total {
                None => loss,
                Some(acc) => acc.add(&loss)?,
            });
        }
        let total = total.expect("non-empty batch");
        losses.push(total.item());
        total.backward()?;
        model.apply_gradients(&bound, &mut opt)?;
    }
    Ok(TrainingReport {
        losses,
        identity_checks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    Ddpm,
    Ddim { stride: usize },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Ddim { stride: 5 }
    }
}

const SAMPLE_CHUNK: usize = 128;

/// Ancestral sampling from `z_T ∼ N(0, I)` with per-step variance `β_t`.
///
/// Sample `i` draws all of its noise from the stream keyed by `(seed, i)`.
pub fn ddpm_sample(
    model: &DenoiserModel,
    prompt: &PromptSpec,
    n: usize,
    sched: &NoiseSchedule,
    seed: u64,
    workers: usize,
) -> Result<Vec<Point>> {
    sample(model, prompt, n, sched, Sampler::Ddpm, seed, workers)
}

/// Deterministic (η = 0) DDIM over `T, T − stride, …, stride`.
pub fn ddim_sample(
    model: &DenoiserModel,
    prompt: &PromptSpec,
    n: usize,
    sched: &NoiseSchedule,
    stride: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<Point>> {
    sample(model, prompt, n, sched, Sampler::Ddim { stride }, seed, workers)
}

pub fn sample(
    model: &DenoiserModel,
    prompt: &PromptSpec,
    n: usize,
    sched: &NoiseSchedule,
    sampler: Sampler,
    seed: u64,
    workers: usize,
) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    if let Sampler::Ddim { stride } = sampler {
        if stride == 0 || sched.steps() % stride != 0 {
            return Err(Error::Config(format!(
                "DDIM stride {stride} must divide T = {}",
                sched.steps()
            )));
        }
    }
    prompt.validate(&model.vocab(), model.config.embed_dim, false)?;
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(SAMPLE_CHUNK)
        .map(|s| (s, (s + SAMPLE_CHUNK).min(n)))
        .collect();
    let parts = par::map(&chunks, workers, |&(lo, hi)| {
        sample_chunk(model, prompt, lo, hi, sched, sampler, seed)
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn sample_chunk(
    model: &DenoiserModel,
    prompt: &PromptSpec,
    lo: usize,
    hi: usize,
    sched: &NoiseSchedule,
    sampler: Sampler,
    seed: u64,
) -> Result<Vec<Point>> {
    let rows = hi - lo;
    let mut streams: Vec<Stream> = (lo..hi).map(|i| Stream::keyed(seed, &[i as u64])).collect();
    let mut z: Vec<f64> = streams.iter_mut().flat_map(|s| [s.normal(), s.normal()]).collect();
    let bound = model.bind(Trainable::NONE);
    let ctx = crate::conditioning::encode_tokens(&bound, prompt, None)?;
    let big_t = sched.steps();
    let predict = |z: &[f64], t: usize| -> Result<Vec<f64>> {
        let zt = Tensor::from_vec(&[rows, 2], z.to_vec())?;
        Ok(bound.forward(&zt, &vec![t; rows], &ctx)?.0.to_vec())
    };
    match sampler {
        Sampler::Ddpm => {
            for t in (1..=big_t).rev() {
                let eps = predict(&z, t)?;
                let beta = sched.beta(t);
                let ab = sched.alpha_bar(t);
                let coef = beta / (1.0 - ab).sqrt();
                let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
                for (i, s) in streams.iter_mut().enumerate() {
                    for j in 0..2 {
                        let idx = i * 2 + j;
                        let mean = inv_sqrt_alpha * (z[idx] - coef * eps[idx]);
                        z[idx] = if t > 1 { mean + beta.sqrt() * s.normal() } else { mean };
                    }
                }
            }
        }
        Sampler::Ddim { stride } => {
            let mut t = big_t;
            while t >= 1 {
                let eps = predict(&z, t)?;
                let ab = sched.alpha_bar(t);
                let prev = t.saturating_sub(stride);
                let ab_prev = if prev >= 1 { sched.alpha_bar(prev) } else { 1.0 };
                for idx in 0..z.len() {
                    let x0 = (z[idx] - (1.0 - ab).sqrt() * eps[idx]) / ab.sqrt();
                    z[idx] = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps[idx];
                }
                if prev == 0 {
                    break;
                }
                t = prev;
            }
        }
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(crate::TensorError::NonFinite { op: "sample" }.into());
    }
    Ok(z.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}
