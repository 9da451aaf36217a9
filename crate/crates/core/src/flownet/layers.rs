//! Building blocks of the flow network, recorded on a [`Graph`].

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn conv<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    padding: usize,
    stride: usize,
) -> Result<Var> {
    g.conv2d(
        x,
        p.get(&format!("{name}.w"))?,
        p.get(&format!("{name}.b"))?,
        padding,
        stride,
    )
}

/// Initial LayerNorm gain of the feature encoder. A sharper start lets the
/// soft-argmax matcher leave the near-uniform regime early in training.
const FEATURE_GAIN: f64 = 3.0;

pub(crate) fn init_encoder<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    n: usize,
    out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut cin = 3;
    for i in 0..n.trailing_zeros() as usize {
        params.init_conv(&format!("{prefix}.c{i}"), 3, cin, out, rng)?;
        cin = out;
    }
    let gain = if prefix == "fenc" { FEATURE_GAIN } else { 1.0 };
    params.insert(format!("{prefix}.norm.gain"), Tensor::full([out], T::c(gain)))?;
    params.insert(format!("{prefix}.norm.bias"), Tensor::zeros([out]))
}

/// Strided 3×3 conv stack mapping `image[H,W,3]` to `[H/n, W/n, out]`.
pub fn encode_features<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    prefix: &str,
    image: Var,
    n: usize,
) -> Result<Var> {
    let shape = g.shape(image);
    let [h, w, c] = shape[..] else {
        return Err(Error::shape("encode_features", format!("[H, W, 3] expected, got {shape:?}")));
    };
    if c != 3 {
        return Err(Error::shape("encode_features", format!("3 channels expected, got {c}")));
    }
    if n < 2 || !n.is_power_of_two() || h == 0 || w == 0 || h % n != 0 || w % n != 0 {
        return Err(Error::shape(
            "encode_features",
            format!("image extents {h}x{w} must be positive multiples of {n}"),
        ));
    }
    let layers = n.trailing_zeros() as usize;
    let mut x = g.affine(image, T::c(2.0), -T::one())?;
    for i in 0..layers {
        x = conv(g, p, &format!("{prefix}.c{i}"), x, 1, 2)?;
        if i + 1 < layers {
            x = g.relu(x)?;
        }
    }
    g.layer_norm(
        x,
        p.get(&format!("{prefix}.norm.gain"))?,
        p.get(&format!("{prefix}.norm.bias"))?,
        T::c(1e-5),
    )
}

/// `C[i,j,k,l] = ⟨g1[i,j], g2[k,l]⟩ / √D` as a `[H',W',H',W']` tensor.
pub fn build_correlation<T: Scalar>(g: &Graph<T>, g1: Var, g2: Var) -> Result<Var> {
    let (s1, s2) = (g.shape(g1), g.shape(g2));
    if s1 != s2 || s1.len() != 3 {
        return Err(Error::shape("build_correlation", format!("{s1:?} vs {s2:?}")));
    }
    let (h, w, d) = (s1[0], s1[1], s1[2]);
    let a = g.reshape(g1, [h * w, d])?;
    let b = g.reshape(g2, [h * w, d])?;
    let c = g.matmul_nt(a, b)?;
    let c = g.scale(c, T::one() / T::from_usize_lossy(d).sqrt())?;
    g.reshape(c, [h, w, h, w])
}

/// Pixel-centre grid `[H,W,2]` holding `(x, y) = (j, i)`.
pub fn coordinate_grid<T: Scalar>(height: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn([height, width, 2], |i| {
        let p = i / 2;
        if i % 2 == 0 {
            T::from_usize_lossy(p % width)
        } else {
            T::from_usize_lossy(p / width)
        }
    })
}

/// Soft-argmax matching: the expected target position under a softmax
/// over all targets, minus the source position.
pub fn global_match<T: Scalar>(g: &Graph<T>, corr: Var) -> Result<Var> {
    let s = g.shape(corr);
    let [h, w, h2, w2] = s[..] else {
        return Err(Error::shape("global_match", format!("rank 4 expected, got {s:?}")));
    };
    let c = g.reshape(corr, [h * w, h2 * w2])?;
    let prob = g.softmax_last(c)?;
    let targets = g.constant(coordinate_grid(h2, w2).reshape([h2 * w2, 2])?);
    let expected = g.matmul(prob, targets)?;
    let expected = g.reshape(expected, [h, w, 2])?;
    let own = g.constant(coordinate_grid(h, w));
    g.sub(expected, own)
}

/// Levels `C_0 … C_{levels-1}`, each pooled by 2 over the target axes.
pub fn correlation_pyramid<T: Scalar>(g: &Graph<T>, corr: Var, levels: usize) -> Result<Vec<Var>> {
    let mut out = vec![corr];
    for _ in 1..levels {
        let prev = *out.last().expect("non-empty");
        out.push(g.avg_pool2_last2(prev)?);
    }
    Ok(out)
}

/// Bilinear `(2r+1)²` windows around `position + flow` on every pyramid
/// level (coordinates divided by `2^k`), concatenated over levels.
pub fn lookup_pyramid<T: Scalar>(g: &Graph<T>, pyramid: &[Var], flow: Var, radius: usize) -> Result<Var> {
    let s = g.shape(flow);
    let [h, w, 2] = s[..] else {
        return Err(Error::shape("lookup_pyramid", format!("flow [H', W', 2] expected, got {s:?}")));
    };
    let grid = g.constant(coordinate_grid(h, w));
    let centers = g.add(grid, flow)?;
    let mut parts = Vec::with_capacity(pyramid.len());
    for (k, &level) in pyramid.iter().enumerate() {
        let c = if k == 0 {
            centers
        } else {
            g.scale(centers, T::c(0.5f64.powi(k as i32)))?
        };
        parts.push(g.window_lookup(level, c, radius)?);
    }
    g.concat_last(&parts)
}

pub(crate) fn init_mixing<T: Scalar>(
    params: &mut ParamSet<T>,
    d_inp: usize,
    corr_channels: usize,
    d_hid: usize,
    depth: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.init_conv("mix.lift", 1, 2, d_inp, rng)?;
    let cin = 2 * d_inp + corr_channels;
    params.init_conv("mix.c1", MIX_KERNEL, cin, d_hid, rng)?;
    if depth == 2 {
        params.init_conv("mix.c2", MIX_KERNEL, d_hid, d_hid, rng)?;
    }
    Ok(())
}

pub(crate) const MIX_KERNEL: usize = 5;
const MIX_PAD: usize = 2;

/// Mixing network `M([q, lift(f), C])`: one 5×5 conv, or two with a ReLU
/// between them.
pub fn mixing_forward<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    q: Var,
    flow: Var,
    corr_feat: Var,
    depth: usize,
) -> Result<Var> {
    let lifted = conv(g, p, "mix.lift", flow, 0, 1)?;
    let x = g.concat_last(&[q, lifted, corr_feat])?;
    let x = conv(g, p, "mix.c1", x, MIX_PAD, 1)?;
    match depth {
        1 => Ok(x),
        2 => {
            let x = g.relu(x)?;
            conv(g, p, "mix.c2", x, MIX_PAD, 1)
        }
        d => Err(Error::Config(format!("mixing depth must be 1 or 2, got {d}"))),
    }
}

pub(crate) fn init_decoder<T: Scalar>(
    params: &mut ParamSet<T>,
    d: usize,
    zero_init: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    params.init_conv("dec.c1", 3, d, d, rng)?;
    if zero_init {
        params.init_conv_zero("dec.c2", 3, d, 2)
    } else {
        let std = 0.1 / ((9 * d) as f64).sqrt();
        params.insert("dec.c2.w", crate::autodiff::normal([3, 3, d, 2], std, rng))?;
        params.insert("dec.c2.b", Tensor::zeros([2]))
    }
}

/// Latent state `[H',W',d]` to a flow increment `[H',W',2]`.
pub fn decode<T: Scalar>(g: &Graph<T>, p: &Bound, h: Var) -> Result<Var> {
    let x = conv(g, p, "dec.c1", h, 1, 1)?;
    let x = g.relu(x)?;
    conv(g, p, "dec.c2", x, 1, 1)
}

/// Bilinear ×n upsampling of a latent flow, rescaled to pixels. Sample
/// positions use aligned cell centres, `(x + ½)/n − ½`.
pub fn upsample_flow<T: Scalar>(g: &Graph<T>, flow: Var, n: usize) -> Result<Var> {
    let s = g.shape(flow);
    let [h, w, 2] = s[..] else {
        return Err(Error::shape("upsample_flow", format!("flow [H', W', 2] expected, got {s:?}")));
    };
    let nf = T::from_usize_lossy(n);
    let half = T::c(0.5);
    let coords = Tensor::from_fn([h * n, w * n, 2], |i| {
        let p = i / 2;
        let v = if i % 2 == 0 { p % (w * n) } else { p / (w * n) };
        (T::from_usize_lossy(v) + half) / nf - half
    });
    let coords = g.constant(coords);
    let up = g.bilinear_sample(flow, coords)?;
    g.scale(up, nf)
}
