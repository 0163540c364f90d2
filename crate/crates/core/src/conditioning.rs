//! Concept world, vocabulary, prompts, token encoding and cross-attention.

use serde::{Deserialize, Serialize};

use crate::model::{BoundModel, ParamId};
use crate::rng::Stream;
use crate::tensor::{Tensor, TensorError};
use crate::{Error, Result};

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Neutral,
    Concept(usize),
    Placeholder,
}

/// Token list `{NEUTRAL, c_0..c_{K-1}, S*}` and their table rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_concepts: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.num_concepts + 2
    }

    pub fn index(&self, token: Token) -> Result<usize> {
        match token {
            Token::Neutral => Ok(0),
            Token::Concept(k) if k < self.num_concepts => Ok(1 + k),
            Token::Concept(k) => Err(Error::UnknownToken(format!("c_{k}"))),
            Token::Placeholder => Ok(self.num_concepts + 1),
        }
    }

    pub fn tokens(&self) -> Vec<Token> {
        let mut v = vec![Token::Neutral];
        v.extend((0..self.num_concepts).map(Token::Concept));
        v.push(Token::Placeholder);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_concepts: usize,
    pub radius: f64,
    pub spread: f64,
    pub points_per_concept: usize,
    /// Anchor of concept `k` is `k - anchor_step (mod K)`, i.e. its clockwise
    /// neighbour on the polygon for `anchor_step = 1`.
    pub anchor_step: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_concepts: 6,
            radius: 4.0,
            spread: 0.3,
            points_per_concept: 256,
            anchor_step: 1,
        }
    }
}

/// Synthetic data universe: one isotropic Gaussian per concept, centers on a
/// regular polygon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptWorld {
    pub config: WorldConfig,
    pub centers: Vec<Point>,
    pub train_sets: Vec<Vec<Point>>,
    pub anchor_map: Vec<usize>,
    pub vocab: Vocab,
}

impl ConceptWorld {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self> {
        let k = config.num_concepts;
        if k == 0 {
            return Err(Error::EmptyWorld);
        }
        if config.points_per_concept == 0 {
            return Err(Error::EmptyWorld);
        }
        if !(config.spread > 0.0) || !(config.radius > 0.0) {
            return Err(Error::Config("radius and spread must be positive".into()));
        }
        let centers: Vec<Point> = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                [config.radius * a.cos(), config.radius * a.sin()]
            })
            .collect();
        if k > 1 {
            let min_dist = min_pairwise_distance(&centers);
            if min_dist < 6.0 * config.spread {
                return Err(Error::Config(format!(
                    "centers {min_dist:.3} apart violate the 6·spread separation ({:.3})",
                    6.0 * config.spread
                )));
            }
        }
        let mut rng = Stream::labeled(seed, "world");
        let train_sets = centers
            .iter()
            .map(|c| {
                (0..config.points_per_concept)
                    .map(|_| {
                        [
                            c[0] + config.spread * rng.normal(),
                            c[1] + config.spread * rng.normal(),
                        ]
                    })
                    .collect()
            })
            .collect();
        let anchor_map = (0..k).map(|i| (i + k - config.anchor_step % k) % k).collect();
        Ok(Self {
            config: config.clone(),
            centers,
            train_sets,
            anchor_map,
            vocab: Vocab { num_concepts: k },
        })
    }

    pub fn num_concepts(&self) -> usize {
        self.centers.len()
    }

    pub fn anchor_of(&self, concept: usize) -> usize {
        self.anchor_map[concept]
    }

    /// Fresh draw from component `k` (not from the stored training set).
    pub fn sample_point(&self, k: usize, rng: &mut Stream) -> Point {
        let c = self.centers[k];
        let s = self.config.spread;
        [c[0] + s * rng.normal(), c[1] + s * rng.normal()]
    }

    pub fn check_concept(&self, k: usize) -> Result<()> {
        if k < self.num_concepts() {
            Ok(())
        } else {
            Err(Error::UnknownToken(format!("c_{k}")))
        }
    }
}

fn min_pairwise_distance(points: &[Point]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Token sequence with an optional placeholder slot bound to an embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub tokens: Vec<Token>,
    pub placeholder_slot: Option<usize>,
    pub bound_embedding: Option<Vec<f64>>,
}

impl PromptSpec {
    /// `y′ = [NEUTRAL]`
    pub fn neutral() -> Self {
        Self {
            tokens: vec![Token::Neutral],
            placeholder_slot: None,
            bound_embedding: None,
        }
    }

    /// `[NEUTRAL, c_k]`
    pub fn concept(k: usize) -> Self {
        Self {
            tokens: vec![Token::Neutral, Token::Concept(k)],
            placeholder_slot: None,
            bound_embedding: None,
        }
    }

    /// `[NEUTRAL, S*]` with `S* ← v`.
    pub fn placeholder(v: Vec<f64>) -> Self {
        Self {
            tokens: vec![Token::Neutral, Token::Placeholder],
            placeholder_slot: Some(1),
            bound_embedding: Some(v),
        }
    }

    /// `[NEUTRAL, S*]` whose embedding is supplied at encode time.
    pub fn placeholder_template() -> Self {
        Self {
            tokens: vec![Token::Neutral, Token::Placeholder],
            placeholder_slot: Some(1),
            bound_embedding: None,
        }
    }

    pub fn validate(&self, vocab: &Vocab, embed_dim: usize, external: bool) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Config("empty prompt".into()));
        }
        for &t in &self.tokens {
            vocab.index(t)?;
        }
        let placeholder_positions: Vec<usize> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Token::Placeholder)
            .map(|(i, _)| i)
            .collect();
        match self.placeholder_slot {
            None if !placeholder_positions.is_empty() => Err(Error::UnboundPlaceholder),
            None => Ok(()),
            Some(slot) => {
                if placeholder_positions != [slot] {
                    return Err(Error::Config(format!(
                        "placeholder slot {slot} does not point at the single S* token"
                    )));
                }
                match (&self.bound_embedding, external) {
                    (_, true) => Ok(()),
                    (None, false) => Err(Error::UnboundPlaceholder),
                    (Some(v), false) if v.len() != embed_dim => Err(TensorError::Shape {
                        op: "bind_placeholder",
                        left: vec![embed_dim],
                        right: vec![v.len()],
                    }
                    .into()),
                    _ => Ok(()),
                }
            }
        }
    }
}

/// Per-position conditioning vectors plus the attention map captured by the
/// most recent denoiser pass.
#[derive(Clone, Debug)]
pub struct ConditioningOutput {
    pub context: Tensor,
    pub attention_map: Option<Tensor>,
}

/// Looks up (or substitutes `v` at the placeholder) and runs the shared
/// residual two-layer encoder on every position independently.
///
/// `v` overrides the prompt's stored embedding and keeps its gradient.
pub fn encode_tokens(model: &BoundModel, prompt: &PromptSpec, v: Option<&Tensor>) -> Result<Tensor> {
    let dim = model.config.embed_dim;
    prompt.validate(&model.vocab(), dim, v.is_some())?;
    let mut rows = Vec::with_capacity(prompt.tokens.len());
    for (pos, &token) in prompt.tokens.iter().enumerate() {
        if Some(pos) == prompt.placeholder_slot {
            let row = match v {
                Some(v) => {
                    if v.numel() != dim {
                        return Err(TensorError::Shape {
                            op: "encode_tokens",
                            left: vec![dim],
                            right: v.shape().to_vec(),
                        }
                        .into());
                    }
                    v.clone()
                }
                None => Tensor::from_vec(&[dim], prompt.bound_embedding.clone().expect("validated"))?,
            };
            rows.push(row);
        } else {
            let idx = model.vocab().index(token)?;
            rows.push(model.t(ParamId::TokenTable).gather_rows(&[idx])?);
        }
    }
    let e = Tensor::concat_rows(&rows)?;
    let h = e
        .matmul(model.t(ParamId::EncW1))?
        .add_row_bias(model.t(ParamId::EncB1))?
        .silu()?;
    let out = e.add(
        &h.matmul(model.t(ParamId::EncW2))?
            .add_row_bias(model.t(ParamId::EncB2))?,
    )?;
    Ok(out)
}

/// Single-head cross-attention with a residual connection.
///
/// `hidden` is `[B × H]`, `context` is `[L × C]`, `w_q: [H × A]`,
/// `w_k: [C × A]`, `w_v: [C × H]`. Returns `hidden + softmax(QKᵀ/√A)·V` and
/// the `[B × L]` attention map.
pub fn cross_attention(
    hidden: &Tensor,
    context: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if context.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Config("empty conditioning context".into()));
    }
    let attn_dim = w_q.shape()[1] as f64;
    let q = hidden.matmul(w_q)?;
    let k = context.matmul(w_k)?;
    let v = context.matmul(w_v)?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / attn_dim.sqrt())?;
    let attention = scores.softmax_rows()?;
    let out = hidden.add(&attention.matmul(&v)?)?;
    Ok((out, attention))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, random_coords};
    use crate::model::{DenoiserModel, ModelConfig, Trainable};

    fn model() -> DenoiserModel {
        DenoiserModel::new(&ModelConfig::for_vocab(6), &mut Stream::new(1))
    }

    #[test]
    fn world_invariants() {
        let w = ConceptWorld::generate(&WorldConfig::default(), 0).unwrap();
        assert_eq!(w.num_concepts(), 6);
        assert!(min_pairwise_distance(&w.centers) >= 6.0 * 0.3);
        assert!(w.train_sets.iter().all(|s| s.len() == 256));
        assert_eq!(w.anchor_map, vec![5, 0, 1, 2, 3, 4]);
        assert!(w.anchor_map.iter().enumerate().all(|(k, &a)| a != k));
        assert_eq!(w.vocab.size(), 8);
    }

    #[test]
    fn world_rejects_overlap_and_empty() {
        let cfg = WorldConfig {
            spread: 1.0,
            ..Default::default()
        };
        assert!(matches!(ConceptWorld::generate(&cfg, 0), Err(Error::Config(_))));
        let cfg = WorldConfig {
            points_per_concept: 0,
            ..Default::default()
        };
        assert!(matches!(ConceptWorld::generate(&cfg, 0), Err(Error::EmptyWorld)));
    }

    #[test]
    fn prompt_validation() {
        let vocab = Vocab { num_concepts: 6 };
        assert!(PromptSpec::neutral().validate(&vocab, 16, false).is_ok());
        assert!(matches!(
            PromptSpec::concept(9).validate(&vocab, 16, false),
            Err(Error::UnknownToken(_))
        ));
        assert!(matches!(
            PromptSpec::placeholder_template().validate(&vocab, 16, false),
            Err(Error::UnboundPlaceholder)
        ));
        let mut p = PromptSpec::placeholder(vec![0.0; 16]);
        p.placeholder_slot = None;
        assert!(matches!(p.validate(&vocab, 16, false), Err(Error::UnboundPlaceholder)));
        assert!(PromptSpec::placeholder(vec![0.0; 3]).validate(&vocab, 16, false).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = model();
        let b = m.bind(Trainable::NONE);
        let a = encode_tokens(&b, &PromptSpec::concept(2), None).unwrap();
        let c = encode_tokens(&b, &PromptSpec::concept(2), None).unwrap();
        assert_eq!(a.data(), c.data());
        assert_eq!(a.shape(), &[2, 16]);
    }

    #[test]
    fn substitution_identity() {
        let m = model();
        let b = m.bind(Trainable::NONE);
        for k in 0..6 {
            let row = m.table_row(Token::Concept(k)).unwrap();
            let lit = encode_tokens(&b, &PromptSpec::concept(k), None).unwrap();
            let sub = encode_tokens(&b, &PromptSpec::placeholder(row), None).unwrap();
            assert_eq!(lit.data(), sub.data());
        }
    }

    #[test]
    fn encoding_gradient_wrt_v() {
        let m = model();
        let b = m.bind(Trainable::NONE);
        let mut rng = Stream::new(3);
        let target = Tensor::from_vec(&[2, 16], rng.normals(32)).unwrap();
        let inputs = vec![(vec![16], rng.normals(16))];
        let coords = random_coords(&inputs, 10, &mut rng);
        let gc = check(
            |x| {
                Ok::<_, Error>(
                    encode_tokens(&b, &PromptSpec::placeholder_template(), Some(&x[0]))?.mse(&target)?,
                )
            },
            &inputs,
            &coords,
            1e-4,
        )
        .unwrap();
        assert!(gc.max_rel_err() < 1e-4, "{}", gc.max_rel_err());
    }

    #[test]
    fn attention_single_token_and_symmetry() {
        let mut rng = Stream::new(5);
        let h = Tensor::from_vec(&[3, 4], rng.normals(12)).unwrap();
        let wq = Tensor::from_vec(&[4, 2], rng.normals(8)).unwrap();
        let wk = Tensor::from_vec(&[5, 2], rng.normals(10)).unwrap();
        let wv = Tensor::from_vec(&[5, 4], rng.normals(20)).unwrap();
        let c0 = rng.normals(5);
        let ctx = Tensor::from_vec(&[1, 5], c0.clone()).unwrap();
        let (out, a) = cross_attention(&h, &ctx, &wq, &wk, &wv).unwrap();
        assert!(a.data().iter().all(|&x| x == 1.0));
        let proj = ctx.matmul(&wv).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expect = h.data()[i * 4 + j] + proj.data()[j];
                assert!((out.data()[i * 4 + j] - expect).abs() < 1e-12);
            }
        }
        let twin = Tensor::from_vec(&[2, 5], [c0.clone(), c0].concat()).unwrap();
        let (out2, a2) = cross_attention(&h, &twin, &wq, &wk, &wv).unwrap();
        assert!(a2.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        assert!(out2.data().iter().zip(out.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn attention_gradient_wrt_key_projection() {
        let mut rng = Stream::new(6);
        let h = Tensor::from_vec(&[3, 4], rng.normals(12)).unwrap();
        let ctx = Tensor::from_vec(&[2, 5], rng.normals(10)).unwrap();
        let wq = Tensor::from_vec(&[4, 2], rng.normals(8)).unwrap();
        let wv = Tensor::from_vec(&[5, 4], rng.normals(20)).unwrap();
        let target = Tensor::from_vec(&[3, 4], rng.normals(12)).unwrap();
        let inputs = vec![(vec![5, 2], rng.normals(10))];
        let gc = check(
            |x| {
                let (out, _) = cross_attention(&h, &ctx, &wq, &x[0], &wv)?;
                Ok::<_, Error>(out.mse(&target)?)
            },
            &inputs,
            &crate::gradcheck::all_coords(&inputs),
            1e-4,
        )
        .unwrap();
        assert!(gc.max_rel_err() < 1e-4, "{}", gc.max_rel_err());
    }

    #[test]
    fn attention_rows_stochastic() {
        let m = model();
        let b = m.bind(Trainable::NONE);
        let mut rng = Stream::new(2);
        let z = Tensor::from_vec(&[4, 2], rng.normals(8)).unwrap();
        let ctx = encode_tokens(&b, &PromptSpec::concept(1), None).unwrap();
        let (_, a) = b.forward(&z, &[1, 20, 50, 100], &ctx).unwrap();
        for row in a.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
