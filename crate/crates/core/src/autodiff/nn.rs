//! Single-head pre-norm transformer block.

use rand::Rng;

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::params::{Bound, ParamSet};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Output of [`attention_block_traced`]: the block output and the `L×L`
/// attention weights.
pub struct AttentionTrace {
    pub out: Var,
    pub weights: Var,
}

/// Parameters of one block of width `d` and MLP hidden width `hidden`.
///
/// With `zero_out` the attention and MLP output projections start at
/// zero, making the block the identity map.
pub fn init_attention_block<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    d: usize,
    hidden: usize,
    zero_out: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    for ln in ["ln1", "ln2"] {
        params.insert(format!("{prefix}.{ln}.gain"), Tensor::full([d], T::one()))?;
        params.insert(format!("{prefix}.{ln}.bias"), Tensor::zeros([d]))?;
    }
    for proj in ["q", "k", "v"] {
        params.init_linear(&format!("{prefix}.attn.{proj}"), d, d, 1.0, rng)?;
    }
    params.init_linear(&format!("{prefix}.mlp.fc1"), d, hidden, 2f64.sqrt(), rng)?;
    if zero_out {
        params.insert(format!("{prefix}.attn.o.w"), Tensor::zeros([d, d]))?;
        params.insert(format!("{prefix}.attn.o.b"), Tensor::zeros([d]))?;
        params.insert(format!("{prefix}.mlp.fc2.w"), Tensor::zeros([hidden, d]))?;
        params.insert(format!("{prefix}.mlp.fc2.b"), Tensor::zeros([d]))?;
    } else {
        params.init_linear(&format!("{prefix}.attn.o"), d, d, 0.5, rng)?;
        params.init_linear(&format!("{prefix}.mlp.fc2"), hidden, d, 0.5, rng)?;
    }
    Ok(())
}

fn linear<T: Scalar>(g: &Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    g.linear(x, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?)
}

fn norm<T: Scalar>(g: &Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    g.layer_norm(
        x,
        p.get(&format!("{name}.gain"))?,
        p.get(&format!("{name}.bias"))?,
        T::c(LN_EPS),
    )
}

/// `y = x + Attn(LN₁(x))`, `out = y + MLP(LN₂(y))` over a sequence `x[L,d]`.
pub fn attention_block<T: Scalar>(g: &Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    attention_block_traced(g, p, prefix, x).map(|t| t.out)
}

pub fn attention_block_traced<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
) -> Result<AttentionTrace> {
    let d = *g.shape(x).last().unwrap_or(&0);
    let xn = norm(g, p, &format!("{prefix}.ln1"), x)?;
    let q = linear(g, p, &format!("{prefix}.attn.q"), xn)?;
    let k = linear(g, p, &format!("{prefix}.attn.k"), xn)?;
    let v = linear(g, p, &format!("{prefix}.attn.v"), xn)?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, T::one() / T::from_usize_lossy(d).sqrt())?;
    let weights = g.softmax_last(scores)?;
    let mixed = g.matmul(weights, v)?;
    let attn = linear(g, p, &format!("{prefix}.attn.o"), mixed)?;
    let y = g.add(x, attn)?;

    let yn = norm(g, p, &format!("{prefix}.ln2"), y)?;
    let hidden = linear(g, p, &format!("{prefix}.mlp.fc1"), yn)?;
    let hidden = g.relu(hidden)?;
    let mlp = linear(g, p, &format!("{prefix}.mlp.fc2"), hidden)?;
    let out = g.add(y, mlp)?;
    Ok(AttentionTrace { out, weights })
}
