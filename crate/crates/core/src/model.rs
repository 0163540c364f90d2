//! The conditional noise predictor `ε_θ(z_t, T_text(y), t)`.
//!
//! Layout: `[z_t ∥ sinusoidal(t)] → silu(64) → silu(64) → cross-attention over
//! the encoded prompt (+ residual) → residual silu feed-forward → linear head`.
//! The token table and the text encoder live in the same parameter set.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{cross_attention, encode_tokens, PromptSpec, Token, Vocab};
use crate::rng::Stream;
use crate::tensor::{OptimizerState, Param, Tensor};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_concepts: usize,
    pub data_dim: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
}

impl ModelConfig {
    pub fn for_vocab(num_concepts: usize) -> Self {
        Self {
            num_concepts,
            data_dim: 2,
            embed_dim: 16,
            time_dim: 16,
            hidden: 64,
            attn_dim: 16,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            num_concepts: self.num_concepts,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    TextEncoder,
    Trunk,
    Attention,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum ParamId {
    TokenTable,
    EncW1,
    EncB1,
    EncW2,
    EncB2,
    InW,
    InB,
    HidW,
    HidB,
    Query,
    Key,
    Value,
    FfW,
    FfB,
    HeadW,
    HeadB,
}

impl ParamId {
    pub const ALL: [ParamId; 16] = [
        ParamId::TokenTable,
        ParamId::EncW1,
        ParamId::EncB1,
        ParamId::EncW2,
        ParamId::EncB2,
        ParamId::InW,
        ParamId::InB,
        ParamId::HidW,
        ParamId::HidB,
        ParamId::Query,
        ParamId::Key,
        ParamId::Value,
        ParamId::FfW,
        ParamId::FfB,
        ParamId::HeadW,
        ParamId::HeadB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::TokenTable => "text.token_table",
            ParamId::EncW1 => "text.w1",
            ParamId::EncB1 => "text.b1",
            ParamId::EncW2 => "text.w2",
            ParamId::EncB2 => "text.b2",
            ParamId::InW => "trunk.in_w",
            ParamId::InB => "trunk.in_b",
            ParamId::HidW => "trunk.hid_w",
            ParamId::HidB => "trunk.hid_b",
            ParamId::Query => "attn.w_q",
            ParamId::Key => "attn.w_k",
            ParamId::Value => "attn.w_v",
            ParamId::FfW => "trunk.ff_w",
            ParamId::FfB => "trunk.ff_b",
            ParamId::HeadW => "head.w",
            ParamId::HeadB => "head.b",
        }
    }

    pub fn group(self) -> ParamGroup {
        match self {
            ParamId::TokenTable | ParamId::EncW1 | ParamId::EncB1 | ParamId::EncW2 | ParamId::EncB2 => {
                ParamGroup::TextEncoder
            }
            ParamId::InW | ParamId::InB | ParamId::HidW | ParamId::HidB | ParamId::FfW | ParamId::FfB => {
                ParamGroup::Trunk
            }
            ParamId::Query | ParamId::Key | ParamId::Value => ParamGroup::Attention,
            ParamId::HeadW | ParamId::HeadB => ParamGroup::Head,
        }
    }
}

/// Which parameter groups receive gradients in a bound graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub text_encoder: bool,
    pub trunk: bool,
    pub attention: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        text_encoder: false,
        trunk: false,
        attention: false,
        head: false,
    };
    pub const ALL: Trainable = Trainable {
        text_encoder: true,
        trunk: true,
        attention: true,
        head: true,
    };
    /// Everything except the token table and text encoder.
    pub const DENOISER: Trainable = Trainable {
        text_encoder: false,
        trunk: true,
        attention: true,
        head: true,
    };
    pub const ATTENTION: Trainable = Trainable {
        text_encoder: false,
        trunk: false,
        attention: true,
        head: false,
    };

    pub fn includes(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::TextEncoder => self.text_encoder,
            ParamGroup::Trunk => self.trunk,
            ParamGroup::Attention => self.attention,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    params: Vec<Param>,
}

fn init_matrix(name: &str, rows: usize, cols: usize, gain: f64, rng: &mut Stream) -> Param {
    let std = gain / (rows as f64).sqrt();
    Param::new(name, &[rows, cols], rng.normals(rows * cols).into_iter().map(|x| x * std).collect())
}

fn zeros(name: &str, n: usize) -> Param {
    Param::new(name, &[n], vec![0.0; n])
}

impl DenoiserModel {
    pub fn new(config: &ModelConfig, rng: &mut Stream) -> Self {
        let c = config;
        let vocab = c.vocab().size();
        let input = c.data_dim + c.time_dim;
        let mut params = Vec::with_capacity(ParamId::ALL.len());
        for id in ParamId::ALL {
            let name = id.name();
            let p = match id {
                ParamId::TokenTable => {
                    Param::new(name, &[vocab, c.embed_dim], rng.normals(vocab * c.embed_dim))
                }
                ParamId::EncW1 | ParamId::EncW2 => init_matrix(name, c.embed_dim, c.embed_dim, 0.5, rng),
                ParamId::EncB1 | ParamId::EncB2 => zeros(name, c.embed_dim),
                ParamId::InW => init_matrix(name, input, c.hidden, 1.0, rng),
                ParamId::HidW | ParamId::FfW => init_matrix(name, c.hidden, c.hidden, 1.0, rng),
                ParamId::InB | ParamId::HidB | ParamId::FfB => zeros(name, c.hidden),
                ParamId::Query => init_matrix(name, c.hidden, c.attn_dim, 1.0, rng),
                ParamId::Key => init_matrix(name, c.embed_dim, c.attn_dim, 1.0, rng),
                ParamId::Value => init_matrix(name, c.embed_dim, c.hidden, 1.0, rng),
                ParamId::HeadW => init_matrix(name, c.hidden, c.data_dim, 0.1, rng),
                ParamId::HeadB => zeros(name, c.data_dim),
            };
            params.push(p);
        }
        Self {
            config: config.clone(),
            params,
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id as usize]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id as usize]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Replaces all parameters; names and shapes must match the layout.
    pub fn set_params(&mut self, params: Vec<Param>) -> Result<()> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(crate::Error::Config("parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn table_row(&self, token: Token) -> Result<Vec<f64>> {
        let idx = self.vocab().index(token)?;
        let d = self.config.embed_dim;
        Ok(self.param(ParamId::TokenTable).data[idx * d..(idx + 1) * d].to_vec())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// SHA-256 over names, shapes and the little-endian bits of every value.
    pub fn checksum(&self) -> String {
        params_checksum(&self.params)
    }

    /// Checksum restricted to the given groups.
    pub fn group_checksum(&self, groups: &[ParamGroup]) -> String {
        let subset: Vec<Param> = ParamId::ALL
            .iter()
            .filter(|id| groups.contains(&id.group()))
            .map(|&id| self.param(id).clone())
            .collect();
        params_checksum(&subset)
    }

    pub fn bind(&self, trainable: Trainable) -> BoundModel {
        let tensors = ParamId::ALL
            .iter()
            .map(|&id| self.param(id).tensor(trainable.includes(id.group())))
            .collect();
        BoundModel {
            config: self.config.clone(),
            tensors,
            trainable,
        }
    }

    /// One optimizer step using the gradients accumulated in `bound`.
    pub fn apply_gradients(&mut self, bound: &BoundModel, opt: &mut OptimizerState) -> Result<()> {
        let grads: Vec<(usize, Option<Vec<f64>>)> = ParamId::ALL
            .iter()
            .filter(|id| bound.trainable.includes(id.group()))
            .map(|&id| {
                let t = bound.t(id);
                // A trainable parameter off the loss path has a zero gradient.
                (id as usize, Some(t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            })
            .collect();
        let updates = self
            .params
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| grads.iter().find(|(j, _)| *j == i).map(|(_, g)| (p, g.as_deref())));
        opt.step(updates)?;
        Ok(())
    }

    /// Convenience inference pass: `ε̂` for a batch sharing one prompt.
    pub fn predict(&self, zt: &[f64], t: &[usize], prompt: &PromptSpec) -> Result<Vec<f64>> {
        let b = self.bind(Trainable::NONE);
        let ctx = encode_tokens(&b, prompt, None)?;
        let z = Tensor::from_vec(&[t.len(), self.config.data_dim], zt.to_vec())?;
        Ok(b.forward(&z, t, &ctx)?.0.to_vec())
    }
}

pub fn params_checksum(params: &[Param]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        for d in &p.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for x in &p.data {
            h.update(x.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sinusoidal embedding of integer time steps, `[B × dim]`.
pub fn time_embedding(t: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
            out.push((step as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
            out.push((step as f64 * freq).cos());
        }
    }
    out
}

/// Graph-side view of a [`DenoiserModel`]: one tensor per parameter.
pub struct BoundModel {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
    pub trainable: Trainable,
}

impl BoundModel {
    pub fn t(&self, id: ParamId) -> &Tensor {
        &self.tensors[id as usize]
    }

    /// Substitutes the tensor used for one parameter (gradient checks).
    pub fn replace(&mut self, id: ParamId, tensor: Tensor) {
        assert_eq!(tensor.shape(), self.tensors[id as usize].shape());
        self.tensors[id as usize] = tensor;
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    /// `ε_θ(z_t, context, t)` for a `[B × 2]` batch; returns the prediction and
    /// the `[B × L]` attention map.
    pub fn forward(&self, zt: &Tensor, t: &[usize], context: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = &self.config;
        let temb = Tensor::from_vec(&[t.len(), c.time_dim], time_embedding(t, c.time_dim))?;
        let x = zt.concat_cols(&temb)?;
        let h = x
            .matmul(self.t(ParamId::InW))?
            .add_row_bias(self.t(ParamId::InB))?
            .silu()?;
        let h = h
            .matmul(self.t(ParamId::HidW))?
            .add_row_bias(self.t(ParamId::HidB))?
            .silu()?;
        let (h, attention) = cross_attention(
            &h,
            context,
            self.t(ParamId::Query),
            self.t(ParamId::Key),
            self.t(ParamId::Value),
        )?;
        let ff = h
            .matmul(self.t(ParamId::FfW))?
            .add_row_bias(self.t(ParamId::FfB))?
            .silu()?;
        let h = h.add(&ff)?;
        let eps = h
            .matmul(self.t(ParamId::HeadW))?
            .add_row_bias(self.t(ParamId::HeadB))?;
        Ok((eps, attention))
    }

    /// Encodes `prompt` and runs the forward pass.
    pub fn forward_prompt(
        &self,
        zt: &Tensor,
        t: &[usize],
        prompt: &PromptSpec,
        v: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let ctx = encode_tokens(self, prompt, v)?;
        self.forward(zt, t, &ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_is_toy_scale() {
        let m = DenoiserModel::new(&ModelConfig::for_vocab(6), &mut Stream::new(0));
        let n = m.num_parameters();
        assert!((5_000..20_000).contains(&n), "{n}");
    }

    #[test]
    fn forward_shape_and_determinism() {
        let m = DenoiserModel::new(&ModelConfig::for_vocab(6), &mut Stream::new(0));
        let z = [0.1, 0.2, -0.3, 0.4, 1.0, -1.0];
        let a = m.predict(&z, &[1, 50, 100], &PromptSpec::concept(0)).unwrap();
        let b = m.predict(&z, &[1, 50, 100], &PromptSpec::concept(0)).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut m = DenoiserModel::new(&ModelConfig::for_vocab(6), &mut Stream::new(0));
        let c0 = m.checksum();
        let g0 = m.group_checksum(&[ParamGroup::TextEncoder]);
        m.param_mut(ParamId::HeadB).data[0] += 1e-12;
        assert_ne!(m.checksum(), c0);
        assert_eq!(m.group_checksum(&[ParamGroup::TextEncoder]), g0);
    }

    #[test]
    fn time_embedding_is_bounded() {
        let e = time_embedding(&[1, 100], 16);
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|x| x.abs() <= 1.0));
        assert_ne!(e[..16], e[16..]);
    }
}
