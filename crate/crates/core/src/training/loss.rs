use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flownet::{FlowField, ValidMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Records `Σ γ^(N−i) · mean_valid |f_gt − f_i|₁` for predictions
/// `f_1..f_N`, each `[H, W, 2]`. The per-pixel L1 sums both channels and
/// is averaged over valid pixels.
pub fn flow_loss_graph<T: Scalar>(
    g: &Graph<T>,
    predictions: &[Var],
    gt: &FlowField<T>,
    valid: &ValidMask,
    gamma: T,
) -> Result<Var> {
    if predictions.is_empty() {
        return Err(Error::Config("flow loss needs at least one prediction".into()));
    }
    valid.check_matches(gt, "flow_loss")?;
    let count = valid.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let target = g.constant(gt.tensor().clone());
    let mask = g.constant(Tensor::from_fn([gt.height(), gt.width(), 2], |i| {
        if valid.bits()[i / 2] { T::one() } else { T::zero() }
    }));
    let inv = T::one() / T::from_usize_lossy(count);
    let n = predictions.len();
    let mut terms = Vec::with_capacity(n);
    for (i, &p) in predictions.iter().enumerate() {
        let diff = g.abs(g.sub(p, target)?)?;
        let l1 = g.scale(g.sum(g.mul(diff, mask)?)?, inv)?;
        terms.push((gamma.powi((n - 1 - i) as i32), l1));
    }
    g.lincomb(&terms)
}

/// Value of [`flow_loss_graph`] for plain flow fields.
pub fn flow_loss<T: Scalar>(predictions: &[FlowField<T>], gt: &FlowField<T>, valid: &ValidMask, gamma: T) -> Result<T> {
    let g = Graph::no_grad();
    for p in predictions {
        if (p.height(), p.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape("flow_loss", "prediction and ground truth extents differ"));
        }
    }
    let vars: Vec<Var> = predictions.iter().map(|p| g.constant(p.tensor().clone())).collect();
    let loss = flow_loss_graph(&g, &vars, gt, valid, gamma)?;
    g.value(loss).item()
}
