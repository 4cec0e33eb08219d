use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::params::{Graph, ParamId, ParamStore};

/// Variance guard inside every layer-norm square root.
pub const LN_EPS: f64 = 1e-6;

const INIT_STD: f64 = 0.02;

fn trunc_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.trunc_normal(INIT_STD))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    /// Truncated-normal weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let w = trunc_normal(&[d_out, d_in], rng);
        Self::with_weight(store, name, w)
    }

    /// Identity weights, zero bias.
    pub fn identity(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self::with_weight(store, name, Tensor::eye(d))
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_weight(store, name, Tensor::zeros(&[d_out, d_in]))
    }

    fn with_weight(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), false);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }
}

pub fn linear(g: &mut Graph, p: &LinearParams, x: Var) -> Result<Var> {
    let w = g.param(p.weight);
    let b = g.param(p.bias);
    g.tape.linear(x, w, Some(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d]), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]), false),
        }
    }
}

pub fn layer_norm(g: &mut Graph, p: &LayerNormParams, x: Var) -> Result<Var> {
    let gamma = g.param(p.gamma);
    let beta = g.param(p.beta);
    g.tape.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn gelu(g: &mut Graph, x: Var) -> Result<Var> {
    g.tape.gelu(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    /// Fused query/key/value projection, `D → 3D`.
    pub qkv: LinearParams,
    pub proj: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::invalid(
                "attention",
                format!("dim {d} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            qkv: LinearParams::new(store, &format!("{name}.qkv"), d, 3 * d, rng),
            proj: LinearParams::new(store, &format!("{name}.proj"), d, d, rng),
            heads,
        })
    }
}

/// Multi-head self-attention returning the output `[B,N,D]` and the
/// attention weights `[B,heads,N,N]`.
pub fn attention_with_weights(g: &mut Graph, p: &AttentionParams, x: Var) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid("attention", format!("expected [B,N,D], got {shape:?}")));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let h = p.heads;
    if d != p.qkv.d_in || d % h != 0 {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: shape,
            rhs: vec![p.qkv.d_in],
        });
    }
    let dh = d / h;
    let qkv = linear(g, &p.qkv, x)?;
    let qkv = g.reshape(qkv, &[b, n, 3, h, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let s = g.slice(qkv, 0, i, i + 1)?;
        *part = g.reshape(s, &[b, h, n, dh])?;
    }
    let [q, k, v] = parts;
    let kt = g.transpose(k, 2, 3)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores, 3)?;
    let out = g.matmul(attn, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, n, d])?;
    let out = linear(g, &p.proj, out)?;
    Ok((out, attn))
}

pub fn multi_head_attention(g: &mut Graph, p: &AttentionParams, x: Var) -> Result<Var> {
    attention_with_weights(g, p, x).map(|(out, _)| out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: LinearParams::new(store, &format!("{name}.fc1"), d, hidden, rng),
            fc2: LinearParams::new(store, &format!("{name}.fc2"), hidden, d, rng),
        }
    }
}

pub fn mlp(g: &mut Graph, p: &MlpParams, x: Var) -> Result<Var> {
    let hdn = linear(g, &p.fc1, x)?;
    let hdn = g.gelu(hdn)?;
    linear(g, &p.fc2, hdn)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: MlpParams,
}

impl BlockParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), d),
            attn: AttentionParams::new(store, &format!("{name}.attn"), d, heads, rng)?,
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), d),
            mlp: MlpParams::new(store, &format!("{name}.mlp"), d, mlp_hidden, rng),
        })
    }
}

/// Pre-norm block: `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
pub fn transformer_block(g: &mut Graph, p: &BlockParams, x: Var) -> Result<Var> {
    let hdn = layer_norm(g, &p.norm1, x)?;
    let hdn = multi_head_attention(g, &p.attn, hdn)?;
    let x = g.add(x, hdn)?;
    let hdn = layer_norm(g, &p.norm2, x)?;
    let hdn = mlp(g, &p.mlp, hdn)?;
    g.add(x, hdn)
}
