//! The attacker's side: textual inversion and adversarial search.
//!
//! Adversarial search alternates two phases on a private copy of the original
//! model. The embedding phase fits `v` so that `[NEUTRAL, S*←v]` reconstructs
//! the target; the parameter phase then erases the mapping `v → target` from
//! the surrogate by pulling `ε_θ(z_t, (y′, v))` toward the stop-gradient
//! neutral prediction. Every epoch's `v` is kept as a candidate.

use serde::{Deserialize, Serialize};

use crate::conditioning::{ConceptWorld, Point, PromptSpec, Token};
use crate::diffusion::{DiffusionSample, NoiseSchedule};
use crate::linalg::distance;
use crate::model::{BoundModel, DenoiserModel, Trainable};
use crate::rng::{derive_seed, label_key, Stream};
use crate::tensor::{OptimizerState, Param, Tensor};
use crate::{par, Error, Result};

/// Starting point of the optimized embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitPolicy {
    /// Mean of the trained token-table rows plus Gaussian noise.
    TableMean { noise: f64 },
    /// The target token's own table row.
    TargetToken,
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::TableMean { noise: 0.02 }
    }
}

pub fn init_embedding(model: &DenoiserModel, target: usize, policy: InitPolicy, rng: &mut Stream) -> Result<Vec<f64>> {
    match policy {
        InitPolicy::TargetToken => model.table_row(Token::Concept(target)),
        InitPolicy::TableMean { noise } => {
            let rows: Vec<Vec<f64>> = std::iter::once(Token::Neutral)
                .chain((0..model.config.num_concepts).map(Token::Concept))
                .map(|t| model.table_row(t))
                .collect::<Result<_>>()?;
            let d = model.config.embed_dim;
            let mut v = vec![0.0; d];
            for r in &rows {
                for (a, b) in v.iter_mut().zip(r) {
                    *a += b / rows.len() as f64;
                }
            }
            for x in v.iter_mut() {
                *x += noise * rng.normal();
            }
            Ok(v)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TiConfig {
    pub iters: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Clean points (each with its own `t`, `ε`) per iteration.
    pub batch_size: usize,
    pub init: InitPolicy,
}

impl Default for TiConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            learning_rate: 0.1,
            weight_decay: 0.1,
            batch_size: 16,
            init: InitPolicy::default(),
        }
    }
}

fn target_data<'a>(world: &'a ConceptWorld, target: usize) -> Result<&'a [Point]> {
    world.check_concept(target)?;
    let data = &world.train_sets[target];
    if data.is_empty() {
        return Err(Error::EmptyWorld);
    }
    Ok(data)
}

fn embedding_param(v: Vec<f64>) -> Param {
    let d = v.len();
    Param::new("v", &[d], v)
}

/// One descent step on `L_v = ‖ε − ε_θ(z_t, (y′, v))‖²` with θ frozen.
///
/// Returns the loss and the prediction tensor.
fn embedding_step(
    frozen: &BoundModel,
    sample: &DiffusionSample,
    v: &mut Param,
    opt: &mut OptimizerState,
) -> Result<(f64, Tensor)> {
    let vt = v.tensor(true);
    let (pred, _) = frozen.forward_prompt(&sample.zt_tensor()?, &sample.t, &PromptSpec::placeholder_template(), Some(&vt))?;
    let loss = pred.mse(&sample.eps_tensor()?)?;
    loss.backward()?;
    let g = vt.grad();
    opt.step([(v, g.as_deref())])?;
    Ok((loss.item(), pred))
}

/// Plain textual inversion against `model`'s frozen parameters.
pub fn textual_inversion(
    model: &DenoiserModel,
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    target: usize,
    cfg: &TiConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let data = target_data(world, target)?;
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::Config("textual inversion needs a batch and positive rates".into()));
    }
    let mut rng = Stream::labeled(seed, "textual-inversion");
    let mut v = embedding_param(init_embedding(model, target, cfg.init, &mut rng)?);
    let mut opt = OptimizerState::adam(cfg.learning_rate, cfg.weight_decay);
    let frozen = model.bind(Trainable::NONE);
    for _ in 0..cfg.iters {
        let points: Vec<Point> = (0..cfg.batch_size).map(|_| data[rng.below(data.len())]).collect();
        let sample = DiffusionSample::draw(&points, sched, &mut rng)?;
        embedding_step(&frozen, &sample, &mut v, &mut opt)?;
    }
    Ok(v.data)
}

/// `‖ε_θ(z_t, (y′, v)) − sg(ε_θ(z_t, y′))‖²`, differentiable in θ only.
///
/// Returns the loss together with `(pred, eps_tilde)`.
pub fn erase_step_loss(surrogate: &BoundModel, v: &[f64], sample: &DiffusionSample) -> Result<(Tensor, Tensor, Tensor)> {
    let vt = Tensor::from_vec(&[v.len()], v.to_vec())?;
    let zt = sample.zt_tensor()?;
    let (pred, _) = surrogate.forward_prompt(&zt, &sample.t, &PromptSpec::placeholder_template(), Some(&vt))?;
    let (neutral, _) = surrogate.forward_prompt(&zt, &sample.t, &PromptSpec::neutral(), None)?;
    let eps_tilde = neutral.stop_gradient();
    Ok((pred.mse(&eps_tilde)?, pred, eps_tilde))
}

/// Same objective with the target taken from a frozen snapshot `θ₀`.
pub fn erase_step_loss_frozen(
    surrogate: &BoundModel,
    snapshot: &BoundModel,
    v: &[f64],
    sample: &DiffusionSample,
) -> Result<Tensor> {
    let vt = Tensor::from_vec(&[v.len()], v.to_vec())?;
    let zt = sample.zt_tensor()?;
    let (pred, _) = surrogate.forward_prompt(&zt, &sample.t, &PromptSpec::placeholder_template(), Some(&vt))?;
    let (target, _) = snapshot.forward_prompt(&zt, &sample.t, &PromptSpec::neutral(), None)?;
    Ok(pred.mse(&target)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerLoss {
    /// Neutral target from the current parameters behind a stop-gradient.
    StopGradient,
    /// Neutral target from a snapshot taken when the parameter phase starts.
    FrozenSnapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsConfig {
    pub epochs: usize,
    pub embed_iters: usize,
    pub update_every: usize,
    pub param_iters: usize,
    pub lr_v: f64,
    pub wd_v: f64,
    pub lr_theta: f64,
    pub init: InitPolicy,
    /// `(t, ε)` draws per iteration, all sharing the epoch's `x₀`.
    pub draws: usize,
    pub inner_loss: InnerLoss,
    /// Also evaluate the other inner loss at every parameter step.
    pub compare_inner: bool,
    /// When false the parameter phases are skipped (textual inversion with
    /// the same per-epoch schedule).
    pub adversarial: bool,
}

impl Default for AsConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            embed_iters: 10,
            update_every: 5,
            param_iters: 5,
            lr_v: 0.1,
            wd_v: 0.1,
            lr_theta: 1e-5,
            init: InitPolicy::default(),
            draws: 16,
            inner_loss: InnerLoss::StopGradient,
            compare_inner: false,
            adversarial: true,
        }
    }
}

impl AsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("adversarial search: {m}")));
        if self.epochs == 0 || self.embed_iters == 0 || self.param_iters == 0 {
            return bad("epochs, embedding and parameter iterations must be at least 1");
        }
        if self.update_every == 0 {
            return bad("update frequency must be at least 1");
        }
        if self.draws == 0 {
            return bad("draws per iteration must be at least 1");
        }
        if !(self.lr_v > 0.0 && self.lr_theta > 0.0 && self.wd_v >= 0.0) {
            return bad("rates must be positive");
        }
        Ok(())
    }

    pub fn is_update_epoch(&self, epoch: usize) -> bool {
        self.adversarial && epoch % self.update_every == 0
    }

    /// Epochs `e < E` with `f | e`.
    pub fn update_epochs(&self) -> Vec<usize> {
        (0..self.epochs).filter(|&e| self.is_update_epoch(e)).collect()
    }
}

/// One triple from which the relaxation bound can be checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationWitness {
    pub eps: Vec<f64>,
    pub eps_tilde: Vec<f64>,
    pub pred: Vec<f64>,
    pub d: f64,
}

impl RelaxationWitness {
    pub fn new(eps: Vec<f64>, eps_tilde: Vec<f64>, pred: Vec<f64>) -> Self {
        let d = distance(&eps, &eps_tilde);
        Self {
            eps,
            eps_tilde,
            pred,
            d,
        }
    }

    /// `‖ε − pred‖ ≥ d − ‖pred − ε̃‖` up to `tol`.
    pub fn holds(&self, tol: f64) -> bool {
        distance(&self.eps, &self.pred) >= self.d - distance(&self.pred, &self.eps_tilde) - tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub epoch: usize,
    pub embedding: Vec<f64>,
    /// Mean `L_v` over the epoch's embedding iterations.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStepRecord {
    pub epoch: usize,
    pub iter: usize,
    pub loss: f64,
    /// The other inner loss at the same point, when compared.
    pub other_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
    pub config: AsConfig,
    pub target: usize,
    pub seed: u64,
    pub surrogate_checksum: String,
    pub final_surrogate_checksum: String,
    pub update_epochs: Vec<usize>,
    pub param_trace: Vec<ParamStepRecord>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Embedding,
    Parameter,
}

/// Hooks into a running search. Every method has a no-op default.
pub trait SearchObserver {
    /// Request witnesses from the embedding phase as well (costs one extra
    /// neutral forward pass per iteration).
    fn wants_witnesses(&self) -> bool {
        false
    }
    fn witness(&mut self, _w: &RelaxationWitness) {}
    fn phase_start(&mut self, _epoch: usize, _phase: Phase, _v: &[f64], _surrogate: &DenoiserModel) {}
    fn phase_end(&mut self, _epoch: usize, _phase: Phase, _v: &[f64], _surrogate: &DenoiserModel) {}
    fn epoch_end(&mut self, _epoch: usize, _candidate: &Candidate, _surrogate: &DenoiserModel) {}
}

pub struct NoObserver;

impl SearchObserver for NoObserver {}

fn witnesses_from(eps: &[f64], eps_tilde: &[f64], pred: &[f64], observer: &mut dyn SearchObserver) {
    for ((e, et), p) in eps.chunks_exact(2).zip(eps_tilde.chunks_exact(2)).zip(pred.chunks_exact(2)) {
        observer.witness(&RelaxationWitness::new(e.to_vec(), et.to_vec(), p.to_vec()));
    }
}

/// Adversarial search on a private copy of the original model.
pub fn adversarial_search(
    surrogate_base: &DenoiserModel,
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    target: usize,
    cfg: &AsConfig,
    seed: u64,
) -> Result<CandidateSet> {
    adversarial_search_observed(surrogate_base, world, sched, target, cfg, seed, &mut NoObserver)
}

pub fn adversarial_search_observed(
    surrogate_base: &DenoiserModel,
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    target: usize,
    cfg: &AsConfig,
    seed: u64,
    observer: &mut dyn SearchObserver,
) -> Result<CandidateSet> {
    cfg.validate()?;
    let data = target_data(world, target)?;
    let mut rng = Stream::labeled(seed, "adversarial-search");
    let mut surrogate = surrogate_base.clone();
    let mut v = embedding_param(init_embedding(&surrogate, target, cfg.init, &mut rng)?);
    let mut opt_v = OptimizerState::adam(cfg.lr_v, cfg.wd_v);
    let mut opt_theta = OptimizerState::adam(cfg.lr_theta, 0.0);
    let mut entries = Vec::with_capacity(cfg.epochs);
    let mut param_trace = Vec::new();
    let want_witnesses = observer.wants_witnesses();
    for epoch in 0..cfg.epochs {
        let x0 = data[rng.below(data.len())];
        let points = vec![x0; cfg.draws];

        observer.phase_start(epoch, Phase::Embedding, &v.data, &surrogate);
        let frozen = surrogate.bind(Trainable::NONE);
        let mut loss_sum = 0.0;
        for _ in 0..cfg.embed_iters {
            let sample = DiffusionSample::draw(&points, sched, &mut rng)?;
            let (loss, pred) = embedding_step(&frozen, &sample, &mut v, &mut opt_v)?;
            loss_sum += loss;
            if want_witnesses {
                let (neutral, _) = frozen.forward_prompt(&sample.zt_tensor()?, &sample.t, &PromptSpec::neutral(), None)?;
                witnesses_from(&sample.eps, neutral.data(), pred.data(), observer);
            }
        }
        drop(frozen);
        observer.phase_end(epoch, Phase::Embedding, &v.data, &surrogate);
        let candidate = Candidate {
            epoch,
            embedding: v.data.clone(),
            loss: loss_sum / cfg.embed_iters as f64,
        };

        if cfg.is_update_epoch(epoch) {
            observer.phase_start(epoch, Phase::Parameter, &v.data, &surrogate);
            let snapshot = (cfg.inner_loss == InnerLoss::FrozenSnapshot || cfg.compare_inner)
                .then(|| surrogate.bind(Trainable::NONE));
            for iter in 0..cfg.param_iters {
                let sample = DiffusionSample::draw(&points, sched, &mut rng)?;
                let bound = surrogate.bind(Trainable::DENOISER);
                let (sg_loss, pred, eps_tilde) = erase_step_loss(&bound, &v.data, &sample)?;
                witnesses_from(&sample.eps, eps_tilde.data(), pred.data(), observer);
                let frozen_loss = match &snapshot {
                    Some(s) => Some(erase_step_loss_frozen(&bound, s, &v.data, &sample)?),
                    None => None,
                };
                let (active, other) = match cfg.inner_loss {
                    InnerLoss::StopGradient => (sg_loss, frozen_loss.map(|l| l.item())),
                    InnerLoss::FrozenSnapshot => {
                        let other = cfg.compare_inner.then(|| sg_loss.item());
                        (frozen_loss.expect("snapshot present"), other)
                    }
                };
                param_trace.push(ParamStepRecord {
                    epoch,
                    iter,
                    loss: active.item(),
                    other_loss: other,
                });
                active.backward()?;
                surrogate.apply_gradients(&bound, &mut opt_theta)?;
            }
            observer.phase_end(epoch, Phase::Parameter, &v.data, &surrogate);
        }
        observer.epoch_end(epoch, &candidate, &surrogate);
        entries.push(candidate);
    }
    Ok(CandidateSet {
        entries,
        config: cfg.clone(),
        target,
        seed,
        surrogate_checksum: surrogate_base.checksum(),
        final_surrogate_checksum: surrogate.checksum(),
        update_epochs: cfg.update_epochs(),
        param_trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    FinalLoss,
    BestOfV,
}

impl SelectionMode {
    pub fn tag(self) -> &'static str {
        match self {
            SelectionMode::FinalLoss => "final_loss",
            SelectionMode::BestOfV => "best_of_v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub index: usize,
    pub epoch: usize,
    pub embedding: Vec<f64>,
    pub score: Option<f64>,
}

fn pick(set: &CandidateSet, index: usize, score: Option<f64>) -> Pick {
    let c = &set.entries[index];
    Pick {
        index,
        epoch: c.epoch,
        embedding: c.embedding.clone(),
        score,
    }
}

/// Minimal recorded `L_v` among the last `⌈E/f⌉` snapshots (first wins ties).
pub fn select_final_loss(set: &CandidateSet) -> Result<Pick> {
    if set.is_empty() {
        return Err(Error::Config("empty candidate set".into()));
    }
    let window = set.len().div_ceil(set.config.update_every.max(1)).max(1);
    let start = set.len() - window.min(set.len());
    let mut best = start;
    for i in start..set.len() {
        if set.entries[i].loss < set.entries[best].loss {
            best = i;
        }
    }
    Ok(pick(set, best, None))
}

/// Per-model argmax of `score(model, embedding)` over every candidate.
///
/// `score` may only query the model by generation; candidate × model pairs
/// are scored in parallel.
pub fn select_best_of_v<F>(set: &CandidateSet, num_models: usize, workers: usize, score: F) -> Result<Vec<Pick>>
where
    F: Fn(usize, &[f64]) -> Result<f64> + Sync + Send,
{
    if set.is_empty() {
        return Err(Error::Config("empty candidate set".into()));
    }
    if num_models == 0 {
        return Err(Error::Config("best_of_v selection needs at least one target model".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..num_models)
        .flat_map(|m| (0..set.len()).map(move |i| (m, i)))
        .collect();
    let scores = par::map(&jobs, workers, |&(m, i)| score(m, &set.entries[i].embedding));
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok((0..num_models)
        .map(|m| {
            let row = &scores[m * set.len()..(m + 1) * set.len()];
            let mut best = 0;
            for (i, s) in row.iter().enumerate() {
                if *s > row[best] {
                    best = i;
                }
            }
            pick(set, best, Some(row[best]))
        })
        .collect())
}

/// One pick per model under either mode (`final_loss` repeats its single
/// surrogate-only choice).
pub fn select_candidate<F>(
    set: &CandidateSet,
    mode: SelectionMode,
    num_models: usize,
    workers: usize,
    score: F,
) -> Result<Vec<Pick>>
where
    F: Fn(usize, &[f64]) -> Result<f64> + Sync + Send,
{
    match mode {
        SelectionMode::FinalLoss => {
            let p = select_final_loss(set)?;
            Ok(vec![p; num_models.max(1)])
        }
        SelectionMode::BestOfV => select_best_of_v(set, num_models, workers, score),
    }
}

/// Seed for the search of one target under a master seed.
pub fn search_seed(seed: u64, target: usize) -> u64 {
    derive_seed(seed, &[label_key("as"), target as u64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::WorldConfig;
    use crate::diffusion::ScheduleConfig;
    use crate::model::{ModelConfig, ParamGroup};

    fn setup() -> (DenoiserModel, ConceptWorld, NoiseSchedule) {
        let world = ConceptWorld::generate(&WorldConfig::default(), 0).unwrap();
        let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let model = DenoiserModel::new(&ModelConfig::for_vocab(6), &mut Stream::new(3));
        (model, world, sched)
    }

    fn small(epochs: usize, f: usize) -> AsConfig {
        AsConfig {
            epochs,
            embed_iters: 2,
            update_every: f,
            param_iters: 2,
            draws: 4,
            ..AsConfig::default()
        }
    }

    #[test]
    fn zero_iterations_return_initial_embedding() {
        let (m, world, sched) = setup();
        let cfg = TiConfig {
            iters: 0,
            init: InitPolicy::TargetToken,
            ..TiConfig::default()
        };
        let v = textual_inversion(&m, &world, &sched, 2, &cfg, 0).unwrap();
        assert_eq!(v, m.table_row(Token::Concept(2)).unwrap());
    }

    #[test]
    fn table_mean_init_is_near_the_mean() {
        let (m, _, _) = setup();
        let a = init_embedding(&m, 0, InitPolicy::TableMean { noise: 0.0 }, &mut Stream::new(1)).unwrap();
        let b = init_embedding(&m, 0, InitPolicy::default(), &mut Stream::new(1)).unwrap();
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| m.param(crate::model::ParamId::TokenTable).data[i * 16..(i + 1) * 16].to_vec())
            .collect();
        for j in 0..16 {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / 7.0;
            assert!((a[j] - mean).abs() < 1e-12);
            assert!((b[j] - a[j]).abs() < 0.2);
        }
    }

    #[test]
    fn candidate_count_and_update_epochs() {
        let (m, world, sched) = setup();
        let set = adversarial_search(&m, &world, &sched, 1, &small(10, 3), 4).unwrap();
        assert_eq!(set.len(), 10);
        assert_eq!(set.update_epochs, vec![0, 3, 6, 9]);
        let phases: Vec<usize> = set.param_trace.iter().filter(|r| r.iter == 0).map(|r| r.epoch).collect();
        assert_eq!(phases, vec![0, 3, 6, 9]);
        let one = adversarial_search(
            &m,
            &world,
            &sched,
            1,
            &AsConfig {
                epochs: 1,
                embed_iters: 1,
                ..small(1, 5)
            },
            4,
        )
        .unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (m, world, sched) = setup();
        for cfg in [
            AsConfig { epochs: 0, ..small(1, 1) },
            AsConfig { update_every: 0, ..small(1, 1) },
            AsConfig { lr_v: 0.0, ..small(1, 1) },
        ] {
            assert!(adversarial_search(&m, &world, &sched, 0, &cfg, 0).is_err());
        }
    }

    struct Recorder {
        violations: usize,
        witnesses: usize,
        phase_ok: bool,
        start: Option<(String, Vec<f64>)>,
        snapshots: Vec<Vec<f64>>,
    }

    impl SearchObserver for Recorder {
        fn wants_witnesses(&self) -> bool {
            true
        }
        fn witness(&mut self, w: &RelaxationWitness) {
            self.witnesses += 1;
            if !w.holds(1e-9) {
                self.violations += 1;
            }
        }
        fn phase_start(&mut self, _: usize, _: Phase, v: &[f64], s: &DenoiserModel) {
            self.start = Some((s.checksum(), v.to_vec()));
        }
        fn phase_end(&mut self, _: usize, phase: Phase, v: &[f64], s: &DenoiserModel) {
            let (c, v0) = self.start.take().unwrap();
            let ok = match phase {
                Phase::Embedding => c == s.checksum() && v0 != v,
                Phase::Parameter => v0 == v && c != s.checksum(),
            };
            self.phase_ok &= ok;
        }
        fn epoch_end(&mut self, _: usize, c: &Candidate, _: &DenoiserModel) {
            self.snapshots.push(c.embedding.clone());
        }
    }

    #[test]
    fn phases_are_separated_and_bound_holds() {
        let (m, world, sched) = setup();
        let mut rec = Recorder {
            violations: 0,
            witnesses: 0,
            phase_ok: true,
            start: None,
            snapshots: Vec::new(),
        };
        let before = m.checksum();
        let set = adversarial_search_observed(&m, &world, &sched, 0, &small(6, 2), 9, &mut rec).unwrap();
        assert!(rec.phase_ok);
        assert_eq!(rec.violations, 0);
        assert_eq!(rec.witnesses, 6 * 2 * 4 + 3 * 2 * 4);
        assert_eq!(m.checksum(), before);
        assert_ne!(set.final_surrogate_checksum, before);
        // Snapshots are values: later epochs never rewrite earlier entries.
        let got: Vec<Vec<f64>> = set.entries.iter().map(|c| c.embedding.clone()).collect();
        assert_eq!(got, rec.snapshots);
    }

    #[test]
    fn search_is_deterministic_and_keeps_encoder_frozen() {
        let (m, world, sched) = setup();
        let a = adversarial_search(&m, &world, &sched, 0, &small(4, 2), 9).unwrap();
        let b = adversarial_search(&m, &world, &sched, 0, &small(4, 2), 9).unwrap();
        assert_eq!(a, b);
        struct Enc(Option<String>, bool);
        impl SearchObserver for Enc {
            fn phase_end(&mut self, _: usize, _: Phase, _: &[f64], s: &DenoiserModel) {
                let c = s.group_checksum(&[ParamGroup::TextEncoder]);
                self.1 &= self.0.get_or_insert(c.clone()) == &c;
            }
        }
        let mut enc = Enc(None, true);
        adversarial_search_observed(&m, &world, &sched, 0, &small(4, 2), 9, &mut enc).unwrap();
        assert!(enc.1);
    }

    #[test]
    fn non_adversarial_variant_never_updates_parameters() {
        let (m, world, sched) = setup();
        let cfg = AsConfig {
            adversarial: false,
            ..small(5, 1)
        };
        let set = adversarial_search(&m, &world, &sched, 0, &cfg, 9).unwrap();
        assert!(set.update_epochs.is_empty());
        assert_eq!(set.final_surrogate_checksum, set.surrogate_checksum);
    }

    fn sample_batch(sched: &NoiseSchedule, seed: u64) -> DiffusionSample {
        DiffusionSample::draw(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]], sched, &mut Stream::new(seed)).unwrap()
    }

    #[test]
    fn erase_loss_vanishes_when_conditionings_coincide() {
        let (m, _, sched) = setup();
        // With all key weights zero the attention is uniform; a placeholder
        // equal to the neutral row then contributes the neutral value.
        let mut m = m;
        m.param_mut(crate::model::ParamId::Key).data.iter_mut().for_each(|x| *x = 0.0);
        let v = m.table_row(Token::Neutral).unwrap();
        let (loss, _, _) = erase_step_loss(&m.bind(Trainable::DENOISER), &v, &sample_batch(&sched, 1)).unwrap();
        assert!(loss.item().abs() < 1e-24);
    }

    #[test]
    fn stop_gradient_matches_constant_target() {
        let (m, _, sched) = setup();
        let v: Vec<f64> = Stream::new(2).normals(16);
        for seed in 0..3 {
            let s = sample_batch(&sched, seed);
            let b1 = m.bind(Trainable::DENOISER);
            let (loss, _, _) = erase_step_loss(&b1, &v, &s).unwrap();
            assert!(loss.item() >= 0.0);
            loss.backward().unwrap();
            let b2 = m.bind(Trainable::DENOISER);
            let snapshot = m.bind(Trainable::NONE);
            let loss2 = erase_step_loss_frozen(&b2, &snapshot, &v, &s).unwrap();
            assert_eq!(loss.item(), loss2.item());
            loss2.backward().unwrap();
            for id in crate::model::ParamId::ALL {
                assert_eq!(b1.t(id).grad(), b2.t(id).grad(), "{}", id.name());
            }
        }
    }

    #[test]
    fn compare_inner_records_both_losses() {
        let (m, world, sched) = setup();
        let cfg = AsConfig {
            compare_inner: true,
            ..small(3, 2)
        };
        let set = adversarial_search(&m, &world, &sched, 0, &cfg, 1).unwrap();
        for r in &set.param_trace {
            let other = r.other_loss.unwrap();
            if r.iter == 0 {
                assert_eq!(other, r.loss);
            }
        }
    }

    fn fake_set(losses: &[f64], f: usize) -> CandidateSet {
        CandidateSet {
            entries: losses
                .iter()
                .enumerate()
                .map(|(i, &l)| Candidate {
                    epoch: i,
                    embedding: vec![i as f64],
                    loss: l,
                })
                .collect(),
            config: AsConfig {
                epochs: losses.len(),
                update_every: f,
                ..AsConfig::default()
            },
            target: 0,
            seed: 0,
            surrogate_checksum: String::new(),
            final_surrogate_checksum: String::new(),
            update_epochs: Vec::new(),
            param_trace: Vec::new(),
        }
    }

    #[test]
    fn final_loss_looks_only_at_the_tail() {
        // E = 10, f = 5 → the last 2 entries.
        let set = fake_set(&[0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.7, 0.9], 5);
        assert_eq!(select_final_loss(&set).unwrap().index, 8);
    }

    #[test]
    fn selection_modes_on_edge_cases() {
        let one = fake_set(&[0.3], 5);
        let score = |_: usize, v: &[f64]| Ok(v[0]);
        assert_eq!(select_candidate(&one, SelectionMode::FinalLoss, 2, 1, score).unwrap()[0].index, 0);
        assert_eq!(select_candidate(&one, SelectionMode::BestOfV, 2, 1, score).unwrap()[1].index, 0);
        assert!(select_candidate(&one, SelectionMode::BestOfV, 0, 1, score).is_err());
        assert!(select_final_loss(&fake_set(&[], 1)).is_err());

        // One candidate dominating every metric is chosen by both modes.
        let set = fake_set(&[0.9, 0.8, 0.1, 0.7], 1);
        let score = |m: usize, v: &[f64]| Ok(if v[0] == 2.0 { 1.0 } else { 0.1 * m as f64 });
        let fl = select_candidate(&set, SelectionMode::FinalLoss, 3, 1, score).unwrap();
        let bv = select_candidate(&set, SelectionMode::BestOfV, 3, 2, score).unwrap();
        assert!(fl.iter().zip(&bv).all(|(a, b)| a.index == 2 && b.index == 2));
    }

    #[test]
    fn best_of_v_dominates_final_loss() {
        let set = fake_set(&[0.5, 0.4, 0.3, 0.2, 0.1, 0.6], 2);
        let score = |m: usize, v: &[f64]| Ok(((v[0] + 1.0) * (m as f64 + 2.0)).sin().abs());
        let fl = select_final_loss(&set).unwrap();
        let bv = select_best_of_v(&set, 3, 1, score).unwrap();
        for (m, p) in bv.iter().enumerate() {
            assert!(p.score.unwrap() >= score(m, &fl.embedding).unwrap());
        }
    }
}
