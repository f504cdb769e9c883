//! Layers built from tape operations.
//!
//! Linear layers store their weight as `in x out` so the forward pass is
//! `x · W + b`. Initialization follows the usual uniform(±1/√fan_in) rule.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform_init(rng, &[in_dim, out_dim], bound),
        )?;
        let bias = store.add(format!("{name}.bias"), group, uniform_init(rng, &[out_dim], bound))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
        group: ParamGroup,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], group))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::ones(&[dim]))?;
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim]))?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Attention result plus the per-head weight matrices (`queries x keys`).
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(
                "multihead_attention",
                format!("model width {dim} not divisible by {heads} heads"),
            ));
        }
        let g = ParamGroup::Base;
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim, g)?,
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim, g)?,
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim, g)?,
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim, g)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        values: Var,
        mask: Option<&Tensor>,
    ) -> Result<AttentionOutput> {
        multihead_attention(tape, store, self, queries, keys, values, mask)
    }
}

/// Scaled dot-product attention over `heads` column blocks, with an optional
/// additive `queries x keys` mask applied before the softmax.
pub fn multihead_attention(
    tape: &mut Tape,
    store: &ParamStore,
    mha: &MultiHeadAttention,
    queries: Var,
    keys: Var,
    values: Var,
    mask: Option<&Tensor>,
) -> Result<AttentionOutput> {
    let nq = tape.value(queries).rows();
    let nk = tape.value(keys).rows();
    if tape.value(values).rows() != nk {
        return Err(Error::shape(
            "multihead_attention",
            tape.shape(keys),
            tape.shape(values),
        ));
    }
    if let Some(m) = mask {
        if m.shape() != [nq, nk] {
            return Err(Error::shape("multihead_attention mask", m.shape(), &[nq, nk]));
        }
    }
    let q = mha.query.forward(tape, store, queries)?;
    let k = mha.key.forward(tape, store, keys)?;
    let v = mha.value.forward(tape, store, values)?;
    let dim = tape.value(q).cols();
    let hd = dim / mha.heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut heads = Vec::with_capacity(mha.heads);
    let mut weights = Vec::with_capacity(mha.heads);
    for h in 0..mha.heads {
        let qh = tape.slice_cols(q, h * hd, (h + 1) * hd)?;
        let kh = tape.slice_cols(k, h * hd, (h + 1) * hd)?;
        let vh = tape.slice_cols(v, h * hd, (h + 1) * hd)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let w = tape.softmax_rows(scores, mask)?;
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let output = mha.output.forward(tape, store, joined)?;
    Ok(AttentionOutput { output, weights })
}
