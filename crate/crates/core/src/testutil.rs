//! Shared helpers for unit tests: seeded RNGs, a gradient checker and
//! naive loop references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{normal, Bound, Graph, ParamSet, Var};
use crate::check::probe_gradients;
use crate::error::Result;
use crate::tensor::Tensor;

pub(crate) type T64 = Tensor<f64>;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn randn(shape: impl Into<Vec<usize>>, r: &mut impl Rng) -> T64 {
    normal(shape, 1.0, r)
}

/// Checks the reverse sweep of `build` against central differences at
/// (at least) 100 coordinates spread over the inputs.
pub(crate) fn gradcheck(
    inputs: &ParamSet<f64>,
    build: impl Fn(&Graph<f64>, &Bound) -> Result<Var>,
    seed: u64,
) {
    let mut r = rng(seed);
    let out_shape = {
        let g = Graph::no_grad();
        let b = inputs.bind_constant(&g);
        let out = build(&g, &b).unwrap();
        g.shape(out)
    };
    let weights = randn(out_shape, &mut r);
    let loss = |g: &Graph<f64>, b: &Bound| -> Result<Var> {
        let out = build(g, b)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        g.sum(prod)
    };
    let g = Graph::new();
    let b = inputs.bind(&g);
    let l = loss(&g, &b).unwrap();
    let grads = g.backward(l).unwrap();
    let analytic = b.collect(&g, &grads);
    let per_tensor = 100;
    let probes = probe_gradients(
        |p: &ParamSet<f64>| {
            let g = Graph::no_grad();
            let b = p.bind_constant(&g);
            let l = loss(&g, &b)?;
            g.value(l).item()
        },
        inputs,
        &analytic,
        per_tensor,
        1e-5,
        &mut r,
    )
    .unwrap();
    let total: usize = inputs.iter().map(|(_, t)| t.len()).sum();
    assert!(probes.len() >= 100.min(total), "only {} probes", probes.len());
    for p in &probes {
        assert!(
            p.rel_err() < 1e-4,
            "{}[{}]: analytic {} vs numeric {} (rel {:e})",
            p.name,
            p.index,
            p.analytic,
            p.numeric,
            p.rel_err()
        );
    }
}

pub(crate) fn naive_conv(x: &T64, k: &T64, b: &T64, pad: usize, stride: usize) -> T64 {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ks, cout) = (k.shape()[0], k.shape()[3]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = T64::zeros([oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut s = b.data()[co];
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data()[((iy as usize) * w + ix as usize) * cin + ci];
                            let kv = k.data()[((ky * ks + kx) * cin + ci) * cout + co];
                            s += xv * kv;
                        }
                    }
                }
                out.data_mut()[(oy * ow + ox) * cout + co] = s;
            }
        }
    }
    out
}

pub(crate) fn naive_bilinear(img: &T64, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let px = |yy: usize, xx: usize, ch: usize| img.data()[(yy * w + xx) * c + ch];
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    (0..c)
        .map(|ch| {
            px(y0, x0, ch) * (1.0 - fx) * (1.0 - fy)
                + px(y0, x1, ch) * fx * (1.0 - fy)
                + px(y1, x0, ch) * (1.0 - fx) * fy
                + px(y1, x1, ch) * fx * fy
        })
        .collect()
}

pub(crate) fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
