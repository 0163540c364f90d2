//! Concept erasure: ESD, CA, FMN fine-tuning and the closed-form UCE edit.
//!
//! Every method starts from a clone of the base model and returns it wrapped
//! in an [`UnlearnedModel`] with its provenance; the base is never touched.

use serde::{Deserialize, Serialize};

use crate::conditioning::{encode_tokens, ConceptWorld, Point, PromptSpec, Token};
use crate::diffusion::{DiffusionSample, NoiseSchedule};
use crate::linalg::cholesky_solve;
use crate::model::{BoundModel, DenoiserModel, ParamId, Trainable};
use crate::rng::Stream;
use crate::tensor::{OptimizerState, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErasureMethod {
    Esd,
    Ca,
    Fmn,
    Uce,
}

impl ErasureMethod {
    pub const ALL: [ErasureMethod; 4] = [
        ErasureMethod::Esd,
        ErasureMethod::Ca,
        ErasureMethod::Fmn,
        ErasureMethod::Uce,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ErasureMethod::Esd => "esd",
            ErasureMethod::Ca => "ca",
            ErasureMethod::Fmn => "fmn",
            ErasureMethod::Uce => "uce",
        }
    }
}

impl std::fmt::Display for ErasureMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Shared budget of the three fine-tuning methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneBudget {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of a prior-preservation term keeping every non-target prompt's
    /// prediction at the frozen base's value on that concept's data.
    #[serde(default)]
    pub preserve_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ErasureHyper {
    Esd {
        #[serde(flatten)]
        budget: FinetuneBudget,
        negative_guidance: f64,
        /// Fine-tune the whole denoiser instead of only the attention block.
        full_trunk: bool,
    },
    Ca {
        #[serde(flatten)]
        budget: FinetuneBudget,
        /// Defaults to the world's anchor of the target.
        anchor: Option<usize>,
    },
    Fmn {
        #[serde(flatten)]
        budget: FinetuneBudget,
    },
    Uce {
        /// Defaults to NEUTRAL plus every non-target concept.
        preserve: Option<Vec<Token>>,
        ridge: f64,
    },
}

impl ErasureHyper {
    pub fn method(&self) -> ErasureMethod {
        match self {
            ErasureHyper::Esd { .. } => ErasureMethod::Esd,
            ErasureHyper::Ca { .. } => ErasureMethod::Ca,
            ErasureHyper::Fmn { .. } => ErasureMethod::Fmn,
            ErasureHyper::Uce { .. } => ErasureMethod::Uce,
        }
    }

    pub fn defaults(method: ErasureMethod) -> Self {
        let budget = |steps, learning_rate, preserve_weight| FinetuneBudget {
            steps,
            learning_rate,
            batch_size: 64,
            preserve_weight,
        };
        match method {
            ErasureMethod::Esd => ErasureHyper::Esd {
                budget: budget(400, 1e-3, 1.0),
                negative_guidance: 1.0,
                full_trunk: false,
            },
            ErasureMethod::Ca => ErasureHyper::Ca {
                budget: budget(400, 1e-3, 1.0),
                anchor: None,
            },
            ErasureMethod::Fmn => ErasureHyper::Fmn {
                budget: budget(300, 3e-3, 10.0),
            },
            ErasureMethod::Uce => ErasureHyper::Uce {
                preserve: None,
                ridge: 1e-6,
            },
        }
    }

    pub fn budget_mut(&mut self) -> Option<&mut FinetuneBudget> {
        match self {
            ErasureHyper::Esd { budget, .. } | ErasureHyper::Ca { budget, .. } | ErasureHyper::Fmn { budget } => {
                Some(budget)
            }
            ErasureHyper::Uce { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasureSpec {
    pub method: ErasureMethod,
    pub target: usize,
    pub hyper: ErasureHyper,
}

impl ErasureSpec {
    pub fn new(method: ErasureMethod, target: usize) -> Self {
        Self {
            method,
            target,
            hyper: ErasureHyper::defaults(method),
        }
    }

    /// Stable identifier such as `esd-c0`.
    pub fn id(&self) -> String {
        format!("{}-c{}", self.method, self.target)
    }

    fn expect(&self, method: ErasureMethod) -> Result<()> {
        if self.method != method || self.hyper.method() != method {
            let got = if self.method != method { self.method } else { self.hyper.method() };
            return Err(Error::WrongMethod {
                expected: method.tag(),
                got: got.tag().to_string(),
            });
        }
        Ok(())
    }

    pub fn validate(&self, num_concepts: usize) -> Result<()> {
        if self.target >= num_concepts {
            return Err(Error::UnknownToken(format!("c_{}", self.target)));
        }
        if let Some(b) = match &self.hyper {
            ErasureHyper::Esd { budget, .. } | ErasureHyper::Ca { budget, .. } | ErasureHyper::Fmn { budget } => {
                Some(budget)
            }
            ErasureHyper::Uce { .. } => None,
        } {
            if b.batch_size == 0 || !(b.learning_rate > 0.0) {
                return Err(Error::Config("erasure budget needs a positive batch and learning rate".into()));
            }
        }
        if let ErasureHyper::Uce { ridge, .. } = self.hyper {
            if !(ridge >= 0.0) {
                return Err(Error::Config("ridge must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasureProvenance {
    pub spec: ErasureSpec,
    pub base_checksum: String,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnedModel {
    pub model: DenoiserModel,
    pub provenance: ErasureProvenance,
}

impl UnlearnedModel {
    pub fn id(&self) -> String {
        self.provenance.spec.id()
    }
}

/// Dispatches on the erasure method.
pub fn erase(
    base: &DenoiserModel,
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    spec: &ErasureSpec,
    seed: u64,
) -> Result<UnlearnedModel> {
    match spec.method {
        ErasureMethod::Esd => erase_esd(base, world, sched, spec, seed),
        ErasureMethod::Ca => erase_ca(base, world, sched, spec, seed),
        ErasureMethod::Fmn => erase_fmn(base, world, sched, spec, seed),
        ErasureMethod::Uce => edit_uce(base, spec),
    }
}

fn batch(points: &[Point], n: usize, rng: &mut Stream) -> Vec<Point> {
    (0..n).map(|_| points[rng.below(points.len())]).collect()
}

struct Finetune<'a> {
    base: &'a DenoiserModel,
    world: &'a ConceptWorld,
    sched: &'a NoiseSchedule,
    target: usize,
    budget: &'a FinetuneBudget,
    trainable: Trainable,
    seed: u64,
}

impl Finetune<'_> {
    fn run<F>(&self, loss_fn: F) -> Result<DenoiserModel>
    where
        F: FnMut(&BoundModel, &mut Stream) -> Result<Tensor>,
    {
        finetune(self, loss_fn)
    }

    /// `Σ_k ‖ε_θ(z, c_k) − ε_frozen(z, c_k)‖²` over the non-target concepts,
    /// each on its own data, plus the same term for the neutral prompt on
    /// mixture data; groups are weighted equally.
    fn preservation(&self, frozen: &BoundModel, bound: &BoundModel, rng: &mut Stream) -> Result<Option<Tensor>> {
        let k_all = self.world.num_concepts();
        let mut groups: Vec<Option<usize>> = (0..k_all).filter(|&k| k != self.target).map(Some).collect();
        if self.budget.preserve_weight == 0.0 || groups.is_empty() {
            return Ok(None);
        }
        groups.push(None);
        let per = (self.budget.batch_size / groups.len()).max(1);
        let mut total: Option<Tensor> = None;
        for &g in &groups {
            let (points, prompt) = match g {
                Some(k) => (batch(&self.world.train_sets[k], per, rng), PromptSpec::concept(k)),
                None => {
                    let pts = (0..per)
                        .map(|_| {
                            let set = &self.world.train_sets[rng.below(k_all)];
                            set[rng.below(set.len())]
                        })
                        .collect();
                    (pts, PromptSpec::neutral())
                }
            };
            let s = DiffusionSample::draw(&points, self.sched, rng)?;
            let zt = s.zt_tensor()?;
            let (goal, _) = frozen.forward_prompt(&zt, &s.t, &prompt, None)?;
            let (pred, _) = bound.forward_prompt(&zt, &s.t, &prompt, None)?;
            let term = pred.mse(&goal)?.scale(self.budget.preserve_weight / groups.len() as f64)?;
            total = Some(match total {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
        }
        Ok(total)
    }
}

fn finetune<F>(job: &Finetune<'_>, mut loss_fn: F) -> Result<DenoiserModel>
where
    F: FnMut(&BoundModel, &mut Stream) -> Result<Tensor>,
{
    let budget = job.budget;
    let mut model = job.base.clone();
    let frozen = job.base.bind(Trainable::NONE);
    let mut opt = OptimizerState::adam(budget.learning_rate, 0.0);
    let mut rng = Stream::new(job.seed);
    for _ in 0..budget.steps {
        let bound = model.bind(job.trainable);
        let mut loss = loss_fn(&bound, &mut rng)?;
        if let Some(p) = job.preservation(&frozen, &bound, &mut rng)? {
            loss = loss.add(&p)?;
        }
        loss.backward()?;
        model.apply_gradients(&bound, &mut opt)?;
    }
    Ok(model)
}

fn wrap(base: &DenoiserModel, model: DenoiserModel, spec: &ErasureSpec, seed: Option<u64>) -> UnlearnedModel {
    UnlearnedModel {
        model,
        provenance: ErasureProvenance {
            spec: spec.clone(),
            base_checksum: base.checksum(),
            seed,
        },
    }
}

/// Negative-guidance fine-tuning: the target prompt is regressed onto
/// `ε(y′) − η·(ε(c) − ε(y′))` computed by a frozen copy of the base.
pub fn erase_esd(
    base: &DenoiserModel,
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    spec: &ErasureSpec,
    seed: u64,
) -> Result<UnlearnedModel> {
    spec.expect(ErasureMethod::Esd)?;
    spec.validate(world.num_concepts())?;
    let ErasureHyper::Esd {
        budget,
        negative_guidance,
        full_trunk,
    } = &spec.hyper
    else {
        unreachable!()
    };
    let eta = *negative_guidance;
    let frozen = base.bind(Trainable::NONE);
    let neutral_ctx = encode_tokens(&frozen, &PromptSpec::neutral(), None)?;
    let target_prompt = PromptSpec::concept(spec.target);
    let target_ctx = encode_tokens(&frozen, &target_prompt, None)?;
    let data = &world.train_sets[spec.target];
    let trainable = if *full_trunk { Trainable::DENOISER } else { Trainable::ATTENTION };
    let job = Finetune {
        base,
        world,
        sched,
        target: spec.target,
        budget,
        trainable,
        seed,
    };
    let model = job.run(|bound, rng| {
        let points = batch(data, budget.batch_size, rng);
        let s = DiffusionSample::draw(&points, sched, rng)?;
        let zt = s.zt_tensor()?;
        let (e_neutral, _) = frozen.forward(&zt, &s.t, &neutral_ctx)?;
        let (e_target, _) = frozen.forward(&zt, &s.t, &target_ctx)?;
        let goal = e_neutral.sub(&e_target.sub(&e_neutral)?.scale(eta)?)?;
        let (pred, _) = bound.forward_prompt(&zt, &s.t, &target_prompt, None)?;
        Ok(pred.mse(&goal)?)
    })?;
    Ok(wrap(base, model, spec, Some(seed)))
}

/// Concept ablation: on anchor data, `‖ε(c_target) − sg(ε(anchor))‖²` with
/// both terms from the model being tuned.
pub fn erase_ca(
    base: &DenoiserModel,
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    spec: &ErasureSpec,
    seed: u64,
) -> Result<UnlearnedModel> {
    spec.expect(ErasureMethod::Ca)?;
    spec.validate(world.num_concepts())?;
    let ErasureHyper::Ca { budget, anchor } = &spec.hyper else {
        unreachable!()
    };
    let anchor = anchor.unwrap_or_else(|| world.anchor_of(spec.target));
    world.check_concept(anchor)?;
    if anchor == spec.target {
        return Err(Error::Config(format!("anchor c_{anchor} equals the target")));
    }
    let data = &world.train_sets[anchor];
    let target_prompt = PromptSpec::concept(spec.target);
    let anchor_prompt = PromptSpec::concept(anchor);
    let job = Finetune {
        base,
        world,
        sched,
        target: spec.target,
        budget,
        trainable: Trainable::ATTENTION,
        seed,
    };
    let model = job.run(|bound, rng| {
        let points = batch(data, budget.batch_size, rng);
        let s = DiffusionSample::draw(&points, sched, rng)?;
        let zt = s.zt_tensor()?;
        let (goal, _) = bound.forward_prompt(&zt, &s.t, &anchor_prompt, None)?;
        let (pred, _) = bound.forward_prompt(&zt, &s.t, &target_prompt, None)?;
        Ok(pred.mse(&goal.stop_gradient())?)
    })?;
    Ok(wrap(base, model, spec, Some(seed)))
}

/// `Σ_b A[b, slot]²` over an attention map `[B × L]`.
pub fn fmn_loss(attention: &Tensor, slot: usize) -> Result<Tensor> {
    let col = attention.column(slot)?;
    Ok(col.mul(&col)?.sum()?)
}

/// Mean attention weight on `slot` under `prompt` for diffused target data.
pub fn mean_slot_attention(
    model: &DenoiserModel,
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    concept: usize,
    prompt: &PromptSpec,
    slot: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    world.check_concept(concept)?;
    let mut rng = Stream::new(seed);
    let points = batch(&world.train_sets[concept], n, &mut rng);
    let s = DiffusionSample::draw(&points, sched, &mut rng)?;
    let bound = model.bind(Trainable::NONE);
    let (_, attn) = bound.forward_prompt(&s.zt_tensor()?, &s.t, prompt, None)?;
    Ok(attn.column(slot)?.mean()?.item())
}

/// Forget-me-not: drives the attention mass on the target token to zero.
pub fn erase_fmn(
    base: &DenoiserModel,
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    spec: &ErasureSpec,
    seed: u64,
) -> Result<UnlearnedModel> {
    spec.expect(ErasureMethod::Fmn)?;
    spec.validate(world.num_concepts())?;
    let ErasureHyper::Fmn { budget } = &spec.hyper else {
        unreachable!()
    };
    let prompt = PromptSpec::concept(spec.target);
    let job = Finetune {
        base,
        world,
        sched,
        target: spec.target,
        budget,
        trainable: Trainable::ATTENTION,
        seed,
    };
    let k = world.num_concepts();
    let model = job.run(|bound, rng| {
        // Diffused points from the whole mixture, so the map is suppressed
        // along every sampling path.
        let points: Vec<Point> = (0..budget.batch_size)
            .map(|_| {
                let set = &world.train_sets[rng.below(k)];
                set[rng.below(set.len())]
            })
            .collect();
        let s = DiffusionSample::draw(&points, sched, rng)?;
        let (_, attn) = bound.forward_prompt(&s.zt_tensor()?, &s.t, &prompt, None)?;
        fmn_loss(&attn, 1)
    })?;
    Ok(wrap(base, model, spec, Some(seed)))
}

/// Solution of one closed-form projection edit.
#[derive(Clone, Debug, PartialEq)]
pub struct UceSolution {
    /// New weights, `[in × out]` row-major like the input.
    pub weights: Vec<f64>,
    /// Frobenius norm of `N·W − R` for the normal equations solved.
    pub residual: f64,
    pub normal: Vec<f64>,
    pub rhs: Vec<f64>,
}

/// Least-squares edit of a row-vector projection `x ↦ x·W` (`W: [in × out]`).
///
/// Minimizes `Σ_e ‖c_e W − v_e‖² + Σ_p ‖c_p W − c_p W_old‖² + λ‖W − W_old‖²`,
/// whose normal equations are
/// `(Σ c_eᵀc_e + Σ c_pᵀc_p + λI) W = Σ c_eᵀv_e + Σ c_pᵀc_p W_old + λ W_old`.
pub fn uce_solve(
    w_old: &[f64],
    rows: usize,
    cols: usize,
    edits: &[(Vec<f64>, Vec<f64>)],
    preserve: &[Vec<f64>],
    ridge: f64,
) -> Result<UceSolution> {
    assert_eq!(w_old.len(), rows * cols);
    let mut normal = vec![0.0; rows * rows];
    let mut rhs = vec![0.0; rows * cols];
    for i in 0..rows {
        normal[i * rows + i] += ridge;
        for j in 0..cols {
            rhs[i * cols + j] += ridge * w_old[i * cols + j];
        }
    }
    let mut add_outer = |c: &[f64], out: &[f64]| {
        for i in 0..rows {
            for k in 0..rows {
                normal[i * rows + k] += c[i] * c[k];
            }
            for j in 0..cols {
                rhs[i * cols + j] += c[i] * out[j];
            }
        }
    };
    for (c, v) in edits {
        if c.len() != rows || v.len() != cols {
            return Err(Error::Config("edit vector has the wrong width".into()));
        }
        add_outer(c, v);
    }
    for c in preserve {
        if c.len() != rows {
            return Err(Error::Config("preservation vector has the wrong width".into()));
        }
        let out = project(c, w_old, rows, cols);
        add_outer(c, &out);
    }
    // Solve for the update so that an empty edit set gives exactly zero.
    let mut delta_rhs = vec![0.0; rows * cols];
    for (c, v) in edits {
        let old = project(c, w_old, rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                delta_rhs[i * cols + j] += c[i] * (v[j] - old[j]);
            }
        }
    }
    let delta = cholesky_solve(&normal, &delta_rhs, rows, cols)?;
    let weights: Vec<f64> = w_old.iter().zip(&delta).map(|(w, d)| w + d).collect();
    let residual = normal_residual(&normal, &weights, &rhs, rows, cols);
    Ok(UceSolution {
        weights,
        residual,
        normal,
        rhs,
    })
}

/// `‖N·W − R‖_F`
pub fn normal_residual(normal: &[f64], w: &[f64], rhs: &[f64], rows: usize, cols: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let nw: f64 = (0..rows).map(|k| normal[i * rows + k] * w[k * cols + j]).sum();
            acc += (nw - rhs[i * cols + j]).powi(2);
        }
    }
    acc.sqrt()
}

/// Row vector times matrix: `c·W`.
pub fn project(c: &[f64], w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols).map(|j| (0..rows).map(|i| c[i] * w[i * cols + j]).sum()).collect()
}

/// Encoder output for a single token.
pub fn token_encoding(model: &DenoiserModel, token: Token) -> Result<Vec<f64>> {
    let prompt = PromptSpec {
        tokens: vec![token],
        placeholder_slot: None,
        bound_embedding: None,
    };
    Ok(encode_tokens(&model.bind(Trainable::NONE), &prompt, None)?.to_vec())
}

/// Details of a UCE edit, for inspection and tests.
#[derive(Clone, Debug)]
pub struct UceReport {
    pub target: Vec<f64>,
    pub neutral: Vec<f64>,
    pub preserve: Vec<Vec<f64>>,
    pub key: UceSolution,
    pub value: UceSolution,
}

/// Closed-form edit of `W_K` and `W_V` mapping the target encoding onto the
/// neutral one while preserving the other tokens.
pub fn edit_uce(base: &DenoiserModel, spec: &ErasureSpec) -> Result<UnlearnedModel> {
    uce_with_report(base, spec).map(|(m, _)| m)
}

pub fn uce_with_report(base: &DenoiserModel, spec: &ErasureSpec) -> Result<(UnlearnedModel, UceReport)> {
    spec.expect(ErasureMethod::Uce)?;
    spec.validate(base.config.num_concepts)?;
    let ErasureHyper::Uce { preserve, ridge } = &spec.hyper else {
        unreachable!()
    };
    let tokens = match preserve {
        Some(t) => t.clone(),
        None => std::iter::once(Token::Neutral)
            .chain((0..base.config.num_concepts).filter(|&k| k != spec.target).map(Token::Concept))
            .collect(),
    };
    if tokens.contains(&Token::Concept(spec.target)) {
        return Err(Error::Config("preservation set contains the target".into()));
    }
    let target = token_encoding(base, Token::Concept(spec.target))?;
    let neutral = token_encoding(base, Token::Neutral)?;
    let preserve = tokens
        .iter()
        .map(|&t| token_encoding(base, t))
        .collect::<Result<Vec<_>>>()?;
    let rows = base.config.embed_dim;
    let mut model = base.clone();
    let mut solve = |id: ParamId| -> Result<UceSolution> {
        let p = base.param(id);
        let cols = p.shape[1];
        let v_star = project(&neutral, &p.data, rows, cols);
        let sol = uce_solve(&p.data, rows, cols, &[(target.clone(), v_star)], &preserve, *ridge)?;
        model.param_mut(id).data = sol.weights.clone();
        Ok(sol)
    };
    let key = solve(ParamId::Key)?;
    let value = solve(ParamId::Value)?;
    let report = UceReport {
        target,
        neutral,
        preserve,
        key,
        value,
    };
    Ok((wrap(base, model, spec, None), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::WorldConfig;
    use crate::diffusion::ScheduleConfig;
    use crate::model::ModelConfig;
    use nalgebra::DMatrix;

    fn setup() -> (DenoiserModel, ConceptWorld, NoiseSchedule) {
        let world = ConceptWorld::generate(&WorldConfig::default(), 0).unwrap();
        let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let model = DenoiserModel::new(&ModelConfig::for_vocab(6), &mut Stream::new(3));
        (model, world, sched)
    }

    fn with_steps(method: ErasureMethod, steps: usize) -> ErasureSpec {
        let mut spec = ErasureSpec::new(method, 0);
        if let Some(b) = spec.hyper.budget_mut() {
            b.steps = steps;
        }
        spec
    }

    #[test]
    fn zero_steps_returns_base_copy() {
        let (base, world, sched) = setup();
        for method in [ErasureMethod::Esd, ErasureMethod::Ca, ErasureMethod::Fmn] {
            let out = erase(&base, &world, &sched, &with_steps(method, 0), 1).unwrap();
            assert_eq!(out.model, base, "{method}");
            assert_eq!(out.provenance.base_checksum, base.checksum());
        }
    }

    #[test]
    fn erasure_leaves_base_untouched_and_is_deterministic() {
        let (base, world, sched) = setup();
        let before = base.checksum();
        for method in ErasureMethod::ALL {
            let spec = with_steps(method, 3);
            let a = erase(&base, &world, &sched, &spec, 11).unwrap();
            let b = erase(&base, &world, &sched, &spec, 11).unwrap();
            assert_eq!(a.model.checksum(), b.model.checksum(), "{method}");
            assert_ne!(a.model.checksum(), before, "{method}");
            assert_eq!(base.checksum(), before);
        }
    }

    #[test]
    fn wrong_method_is_rejected() {
        let (base, world, sched) = setup();
        let spec = ErasureSpec::new(ErasureMethod::Ca, 0);
        assert!(matches!(
            erase_esd(&base, &world, &sched, &spec, 0),
            Err(Error::WrongMethod { expected: "esd", .. })
        ));
        assert!(matches!(edit_uce(&base, &spec), Err(Error::WrongMethod { .. })));
        let mismatched = ErasureSpec {
            method: ErasureMethod::Fmn,
            target: 0,
            hyper: ErasureHyper::defaults(ErasureMethod::Esd),
        };
        assert!(erase_fmn(&base, &world, &sched, &mismatched, 0).is_err());
    }

    #[test]
    fn ca_rejects_anchor_equal_to_target() {
        let (base, world, sched) = setup();
        let mut spec = ErasureSpec::new(ErasureMethod::Ca, 2);
        spec.hyper = ErasureHyper::Ca {
            budget: FinetuneBudget {
                steps: 1,
                learning_rate: 1e-3,
                batch_size: 4,
                preserve_weight: 0.0,
            },
            anchor: Some(2),
        };
        assert!(erase_ca(&base, &world, &sched, &spec, 0).is_err());
    }

    #[test]
    fn fmn_loss_is_sum_of_squares() {
        let a = Tensor::from_vec(&[2, 2], vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        assert!((fmn_loss(&a, 1).unwrap().item() - (0.09 + 0.36)).abs() < 1e-15);
        let z = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(fmn_loss(&z, 1).unwrap().item(), 0.0);
    }

    fn random_problem(rng: &mut Stream, n_preserve: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let w = rng.normals(16 * 16);
        let c = rng.normals(16);
        let v = rng.normals(16);
        let p = (0..n_preserve).map(|_| rng.normals(16)).collect();
        (w, c, v, p)
    }

    #[test]
    fn empty_edit_keeps_weights() {
        let mut rng = Stream::new(5);
        let (w, _, _, p) = random_problem(&mut rng, 6);
        let sol = uce_solve(&w, 16, 16, &[], &p, 1e-6).unwrap();
        for (a, b) in sol.weights.iter().zip(&w) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn target_only_edit_maps_exactly() {
        let mut rng = Stream::new(6);
        let (w, c, v, _) = random_problem(&mut rng, 0);
        // The ridge pulls the solution toward W_old by λ/(|c|² + λ).
        let sol = uce_solve(&w, 16, 16, &[(c.clone(), v.clone())], &[], 1e-6).unwrap();
        let out = project(&c, &sol.weights, 16, 16);
        let old = project(&c, &w, 16, 16);
        let cc: f64 = c.iter().map(|x| x * x).sum();
        let shrink = 1e-6 / (cc + 1e-6);
        for j in 0..16 {
            let expected = v[j] + shrink * (old[j] - v[j]);
            assert!((out[j] - expected).abs() < 1e-10);
        }
        let exact = uce_solve(&w, 16, 16, &[(c.clone(), v.clone())], &[], 1e-12).unwrap();
        let out = project(&c, &exact.weights, 16, 16);
        for j in 0..16 {
            assert!((out[j] - v[j]).abs() < 1e-8, "{} vs {}", out[j], v[j]);
        }
    }

    #[test]
    fn zero_ridge_singular_system_errors() {
        let mut rng = Stream::new(7);
        let (w, c, v, _) = random_problem(&mut rng, 0);
        let err = uce_solve(&w, 16, 16, &[(c, v)], &[], 0.0).unwrap_err();
        assert!(err.to_string().contains("ridge"));
    }

    #[test]
    fn uce_matches_independent_solver() {
        let (base, _, _) = setup();
        let (edited, report) = uce_with_report(&base, &ErasureSpec::new(ErasureMethod::Uce, 1)).unwrap();
        for sol in [&report.key, &report.value] {
            assert!(sol.residual < 1e-8);
            let cols = sol.rhs.len() / 16;
            let n = DMatrix::from_row_slice(16, 16, &sol.normal);
            let r = DMatrix::from_row_slice(16, cols, &sol.rhs);
            let x = n.lu().solve(&r).unwrap();
            for i in 0..16 {
                for j in 0..cols {
                    assert!((x[(i, j)] - sol.weights[i * cols + j]).abs() < 1e-8);
                }
            }
        }
        // Only the key and value projections change.
        for id in ParamId::ALL {
            let same = edited.model.param(id) == base.param(id);
            assert_eq!(same, !matches!(id, ParamId::Key | ParamId::Value), "{}", id.name());
        }
    }
}
