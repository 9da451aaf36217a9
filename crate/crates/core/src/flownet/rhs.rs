//! Right-hand sides of the latent ODE and the discrete ConvGRU cell.

use rand::Rng;

use crate::autodiff::{attention_block, init_attention_block, Bound, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::flownet::layers::conv;
use crate::ode::OdeFunc;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Name under which the GRU input `x` is bound next to the gate parameters.
pub const COND: &str = "cond";

pub(crate) fn init_transformer<T: Scalar>(
    params: &mut ParamSet<T>,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.init_linear("rhs.proj", d + 1, d, 1.0, rng)?;
    init_attention_block(params, "rhs.block", d, 2 * d, false, rng)
}

/// `g(h, t) = Block(P[h, t])` over the `H'·W'` latent positions, where
/// `P` re-projects the state with `t` appended as a constant channel.
#[derive(Clone, Copy, Debug, Default)]
pub struct TransformerRhs;

impl<T: Scalar> OdeFunc<T> for TransformerRhs {
    fn eval(&self, g: &Graph<T>, p: &Bound, t: T, h: Var) -> Result<Var> {
        let shape = g.shape(h);
        let (l, d) = match shape[..] {
            [a, b, d] => (a * b, d),
            [l, d] => (l, d),
            _ => return Err(Error::shape("rhs_transformer", format!("{shape:?}"))),
        };
        let x = g.reshape(h, [l, d])?;
        let tc = g.constant(Tensor::full([l, 1], t));
        let x = g.concat_last(&[x, tc])?;
        let x = g.linear(x, p.get("rhs.proj.w")?, p.get("rhs.proj.b")?)?;
        let y = attention_block(g, p, "rhs.block", x)?;
        g.reshape(y, shape)
    }
}

pub(crate) fn init_gru<T: Scalar>(params: &mut ParamSet<T>, d: usize, rng: &mut impl Rng) -> Result<()> {
    for gate in ["gru.z", "gru.r", "gru.q"] {
        params.init_conv(gate, 3, 2 * d, d, rng)?;
    }
    Ok(())
}

/// Update gate `z` and candidate `g̃` of a ConvGRU for state `h` and input `x`.
pub fn gru_gates<T: Scalar>(g: &Graph<T>, p: &Bound, h: Var, x: Var) -> Result<(Var, Var)> {
    let hx = g.concat_last(&[h, x])?;
    let z = g.sigmoid(conv(g, p, "gru.z", hx, 1, 1)?)?;
    let r = g.sigmoid(conv(g, p, "gru.r", hx, 1, 1)?)?;
    let rh = g.mul(r, h)?;
    let rhx = g.concat_last(&[rh, x])?;
    let cand = g.tanh(conv(g, p, "gru.q", rhx, 1, 1)?)?;
    Ok((z, cand))
}

/// Discrete update `h' = z⊙h + (1−z)⊙g̃`.
pub fn gru_cell<T: Scalar>(g: &Graph<T>, p: &Bound, h: Var, x: Var) -> Result<Var> {
    let (z, cand) = gru_gates(g, p, h, x)?;
    let keep = g.mul(z, h)?;
    let one_minus = g.affine(z, -T::one(), T::one())?;
    let new = g.mul(one_minus, cand)?;
    g.add(keep, new)
}

/// `dh/dt = (1−z)⊙(g̃ − h)` with the input `x` bound as [`COND`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GruOdeRhs;

impl<T: Scalar> OdeFunc<T> for GruOdeRhs {
    fn eval(&self, g: &Graph<T>, p: &Bound, _t: T, h: Var) -> Result<Var> {
        let x = p.get(COND)?;
        let (z, cand) = gru_gates(g, p, h, x)?;
        let one_minus = g.affine(z, -T::one(), T::one())?;
        let diff = g.sub(cand, h)?;
        g.mul(one_minus, diff)
    }
}
