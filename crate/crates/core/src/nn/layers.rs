//! Dense MLPs and a pre-norm transformer encoder, built on [`Graph`].
//!
//! Parameter naming: an MLP under prefix `p` owns `p.w1 p.b1 p.w2 p.b2 p.w3
//! p.b3`; transformer layer `l` owns `p.l{l}.{ln1_g, ln1_b, wq, bq, wk, bk, wv,
//! bv, wo, bo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b}` and the encoder ends
//! with `p.lnf_g p.lnf_b`. Weights are `[fan_in × fan_out]` and act on row
//! vectors.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{glorot, ParamSet, Partition};
use super::tensor::Tensor;
use crate::error::{IlsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerDims {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

pub fn init_mlp(
    params: &mut ParamSet,
    prefix: &str,
    partition: Partition,
    dims: [usize; 4],
    rng: &mut impl Rng,
) -> Result<()> {
    for (i, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        params.insert(format!("{prefix}.w{}", i + 1), partition, glorot(fan_in, fan_out, 1.0, rng))?;
        params.insert(format!("{prefix}.b{}", i + 1), partition, Tensor::zeros(1, fan_out))?;
    }
    Ok(())
}

pub fn init_transformer(params: &mut ParamSet, prefix: &str, dims: TransformerDims, rng: &mut impl Rng) -> Result<()> {
    let TransformerDims { d_model: d, layers, heads, ffn } = dims;
    if heads == 0 || d % heads != 0 {
        return Err(IlsaError::config(format!("d_model {d} is not divisible by {heads} heads")));
    }
    let part = Partition::Transformer;
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        params.insert(format!("{p}.ln1_g"), part, Tensor::full(1, d, 1.0))?;
        params.insert(format!("{p}.ln1_b"), part, Tensor::zeros(1, d))?;
        for m in ["q", "k", "v", "o"] {
            params.insert(format!("{p}.w{m}"), part, glorot(d, d, 1.0, rng))?;
            params.insert(format!("{p}.b{m}"), part, Tensor::zeros(1, d))?;
        }
        params.insert(format!("{p}.ln2_g"), part, Tensor::full(1, d, 1.0))?;
        params.insert(format!("{p}.ln2_b"), part, Tensor::zeros(1, d))?;
        params.insert(format!("{p}.ff1_w"), part, glorot(d, ffn, 1.0, rng))?;
        params.insert(format!("{p}.ff1_b"), part, Tensor::zeros(1, ffn))?;
        params.insert(format!("{p}.ff2_w"), part, glorot(ffn, d, 1.0, rng))?;
        params.insert(format!("{p}.ff2_b"), part, Tensor::zeros(1, d))?;
    }
    params.insert(format!("{prefix}.lnf_g"), part, Tensor::full(1, d, 1.0))?;
    params.insert(format!("{prefix}.lnf_b"), part, Tensor::zeros(1, d))?;
    Ok(())
}

fn dense(g: &mut Graph, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
    let (wn, bn) = (g.param(w)?, g.param(b)?);
    let h = g.matmul(x, wn).map_err(|e| rename(e, w))?;
    g.add_bias(h, bn).map_err(|e| rename(e, b))
}

fn rename(e: IlsaError, name: &str) -> IlsaError {
    match e {
        IlsaError::Structural { context, detail } => IlsaError::Structural {
            context: format!("{context} at '{name}'"),
            detail,
        },
        other => other,
    }
}

/// `relu(relu(x·W1 + b1)·W2 + b2)·W3 + b3`.
pub fn mlp(g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = dense(g, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let h = g.relu(h);
    let h = g.dropout(h);
    let h = dense(g, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
    let h = g.relu(h);
    let h = g.dropout(h);
    dense(g, h, &format!("{prefix}.w3"), &format!("{prefix}.b3"))
}

/// Encoder over `tokens` (rows), with attention confined to blocks of `group`
/// consecutive rows.
pub fn transformer(g: &mut Graph, prefix: &str, tokens: NodeId, group: usize, heads: usize, layers: usize) -> Result<NodeId> {
    let mut x = tokens;
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        let (g1, b1) = (g.param(&format!("{p}.ln1_g"))?, g.param(&format!("{p}.ln1_b"))?);
        let h = g.layer_norm(x, g1, b1)?;
        let q = dense(g, h, &format!("{p}.wq"), &format!("{p}.bq"))?;
        let k = dense(g, h, &format!("{p}.wk"), &format!("{p}.bk"))?;
        let v = dense(g, h, &format!("{p}.wv"), &format!("{p}.bv"))?;
        let a = g.attention(q, k, v, group, heads)?;
        let a = dense(g, a, &format!("{p}.wo"), &format!("{p}.bo"))?;
        let a = g.dropout(a);
        x = g.add(x, a)?;

        let (g2, b2) = (g.param(&format!("{p}.ln2_g"))?, g.param(&format!("{p}.ln2_b"))?);
        let h = g.layer_norm(x, g2, b2)?;
        let h = dense(g, h, &format!("{p}.ff1_w"), &format!("{p}.ff1_b"))?;
        let h = g.relu(h);
        let h = dense(g, h, &format!("{p}.ff2_w"), &format!("{p}.ff2_b"))?;
        let h = g.dropout(h);
        x = g.add(x, h)?;
    }
    let (gf, bf) = (g.param(&format!("{prefix}.lnf_g"))?, g.param(&format!("{prefix}.lnf_b"))?);
    g.layer_norm(x, gf, bf)
}

/// Inference-mode MLP evaluation on a plain tensor.
pub fn mlp_forward(params: &ParamSet, prefix: &str, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(params);
    let x = g.constant(input.clone());
    let y = mlp(&mut g, prefix, x)?;
    Ok(g.value(y).clone())
}

/// Inference-mode encoder evaluation on `[n_tokens × d_model]` (one sample).
pub fn transformer_forward(params: &ParamSet, prefix: &str, tokens: &Tensor, heads: usize, layers: usize) -> Result<Tensor> {
    let mut g = Graph::inference(params);
    let x = g.constant(tokens.clone());
    let y = transformer(&mut g, prefix, x, tokens.rows(), heads, layers)?;
    Ok(g.value(y).clone())
}
