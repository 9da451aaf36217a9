//! Differentiable operations recorded on a [`Graph`].

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}


fn last_dim(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape.split_last() {
        Some((&c, rest)) if c > 0 => Ok((rest.iter().product(), c)),
        _ => Err(Error::shape(op, format!("needs a non-empty last axis, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x + y).map_err(|_| shape_err("add", &va, &vb))?;
        self.record(
            "add",
            &[a, b],
            out,
            Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x - y).map_err(|_| shape_err("sub", &va, &vb))?;
        self.record(
            "sub",
            &[a, b],
            out,
            Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.scale(-T::one()))])),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x * y).map_err(|_| shape_err("mul", &va, &vb))?;
        self.record(
            "mul",
            &[a, b],
            out,
            Box::new(|c| {
                let ga = c.grad.zip_map(&c.inputs[1], |g, y| g * y)?;
                let gb = c.grad.zip_map(&c.inputs[0], |g, x| g * x)?;
                Ok(vec![Some(ga), Some(gb)])
            }),
        )
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&self, x: Var, mul: T, add: T) -> Result<Var> {
        let out = self.value(x).map(|v| mul * v + add);
        self.record(
            "affine",
            &[x],
            out,
            Box::new(move |c| Ok(vec![Some(c.grad.scale(mul))])),
        )
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    /// `Σ cᵢ·xᵢ` over same-shaped inputs.
    pub fn lincomb(&self, terms: &[(T, Var)]) -> Result<Var> {
        let Some(&(c0, v0)) = terms.first() else {
            return Err(Error::shape("lincomb", "no terms"));
        };
        let first = self.value(v0);
        let mut out = first.scale(c0);
        for &(c, v) in &terms[1..] {
            let val = self.value(v);
            out.axpy(c, &val).map_err(|_| shape_err("lincomb", &first, &val))?;
        }
        let coeffs: Vec<T> = terms.iter().map(|t| t.0).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.1).collect();
        self.record(
            "lincomb",
            &vars,
            out,
            Box::new(move |c| Ok(coeffs.iter().map(|&k| Some(c.grad.scale(k))).collect())),
        )
    }

    /// Adds `bias[C]` to every row of `x[..., C]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (rows, ch) = last_dim(vx.shape(), "add_bias")?;
        if vb.shape() != [ch] {
            return Err(shape_err("add_bias", &vx, &vb));
        }
        let mut out = (*vx).clone();
        for r in out.data_mut().chunks_mut(ch) {
            for (o, &b) in r.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(out.len(), rows * ch);
        self.record(
            "add_bias",
            &[x, bias],
            out,
            Box::new(move |c| {
                let mut gb = vec![T::zero(); ch];
                for r in c.grad.data().chunks(ch) {
                    for (a, &g) in gb.iter_mut().zip(r) {
                        *a += g;
                    }
                }
                Ok(vec![Some(c.grad.clone()), Some(Tensor::new([ch], gb)?)])
            }),
        )
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(
            "sum",
            &[x],
            out,
            Box::new(|c| {
                let g = c.grad.data()[0];
                Ok(vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), g))])
            }),
        )
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = T::from_usize_lossy(self.value(x).len().max(1));
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.abs());
        self.record(
            "abs",
            &[x],
            out,
            Box::new(|c| {
                let g = c.grad.zip_map(&c.inputs[0], |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?;
                Ok(vec![Some(g)])
            }),
        )
    }

    pub fn activation(&self, x: Var, act: Activation) -> Result<Var> {
        let out = self.value(x).map(|v| act.apply(v));
        self.record(
            "activation",
            &[x],
            out,
            Box::new(move |c| {
                let d = c
                    .inputs[0]
                    .zip_map(c.output, |x, y| act.derivative(x, y))?
                    .zip_map(c.grad, |d, g| d * g)?;
                Ok(vec![Some(d)])
            }),
        )
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = (*self.value(x)).clone().reshape(shape)?;
        self.record(
            "reshape",
            &[x],
            out,
            Box::new(|c| {
                let g = c.grad.clone().reshape(c.inputs[0].shape().to_vec())?;
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Matrix product of rank-2 tensors `[m,k]·[k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2("matmul")?;
        let (k2, n) = vb.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &va, &vb));
        }
        let out = Tensor::new([m, n], kernels::matmul(va.data(), vb.data(), m, k, n))?;
        self.record(
            "matmul",
            &[a, b],
            out,
            Box::new(move |c| {
                let (ga, gb) = (c.grad.data(), c.inputs[1].data());
                let da = kernels::matmul_nt(ga, gb, m, n, k);
                let db = kernels::matmul_tn(c.inputs[0].data(), ga, k, m, n);
                Ok(vec![Some(Tensor::new([m, k], da)?), Some(Tensor::new([k, n], db)?)])
            }),
        )
    }

    /// `a·bᵀ` for `a[m,k]`, `b[n,k]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2("matmul_nt")?;
        let (n, k2) = vb.dims2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", &va, &vb));
        }
        let out = Tensor::new([m, n], kernels::matmul_nt(va.data(), vb.data(), m, k, n))?;
        self.record(
            "matmul_nt",
            &[a, b],
            out,
            Box::new(move |c| {
                let g = c.grad.data();
                let da = kernels::matmul(g, c.inputs[1].data(), m, n, k);
                let db = kernels::matmul_tn(g, c.inputs[0].data(), n, m, k);
                Ok(vec![Some(Tensor::new([m, k], da)?), Some(Tensor::new([n, k], db)?)])
            }),
        )
    }

    /// Affine map over the last axis: `x[..., in]·w[in,out] + b[out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x);
        let (rows, cin) = last_dim(&shape, "linear")?;
        let flat = self.reshape(x, [rows, cin])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, b)?;
        let cout = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = cout;
        self.reshape(y, out_shape)
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let Some(first) = vals.first() else {
            return Err(Error::shape("concat_last", "no inputs"));
        };
        let lead = &first.shape()[..first.ndim().saturating_sub(1)];
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            if v.ndim() != first.ndim() || &v.shape()[..v.ndim() - 1] != lead {
                return Err(shape_err("concat_last", first, v));
            }
            widths.push(*v.shape().last().expect("rank >= 1"));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..][..w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        self.record(
            "concat_last",
            parts,
            out,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (inp, &w) in c.inputs.iter().zip(&widths) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..][..w]);
                    }
                    offset += w;
                    grads.push(Some(Tensor::new(inp.shape().to_vec(), d)?));
                }
                Ok(grads)
            }),
        )
    }

    /// Channels `start..end` of the last axis.
    pub fn slice_last(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, ch) = last_dim(vx.shape(), "slice_last")?;
        if start >= end || end > ch {
            return Err(Error::shape("slice_last", format!("{start}..{end} of {ch}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * ch + start..][..w]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = w;
        let out = Tensor::new(shape, data)?;
        self.record(
            "slice_last",
            &[x],
            out,
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape().to_vec());
                for r in 0..rows {
                    g.data_mut()[r * ch + start..][..w]
                        .copy_from_slice(&c.grad.data()[r * w..][..w]);
                }
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (_, ch) = last_dim(vx.shape(), "softmax_last")?;
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(ch) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.record(
            "softmax_last",
            &[x],
            out,
            Box::new(move |c| {
                let mut g = c.grad.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(ch).zip(c.output.data().chunks(ch)) {
                    let d = kernels::dot(grow, yrow);
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - d);
                    }
                }
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let (rows, ch) = last_dim(vx.shape(), "layer_norm")?;
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != [ch] || vb.shape() != [ch] {
            return Err(shape_err("layer_norm", &vx, &vg));
        }
        let n = T::from_usize_lossy(ch);
        let mut xhat = vec![T::zero(); rows * ch];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * ch];
        for r in 0..rows {
            let row = &vx.data()[r * ch..][..ch];
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..ch {
                let xh = (row[i] - mu) * is;
                xhat[r * ch + i] = xh;
                out[r * ch + i] = xh * vg.data()[i] + vb.data()[i];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.record(
            "layer_norm",
            &[x, gain, bias],
            out,
            Box::new(move |c| {
                let g = c.grad.data();
                let gamma = c.inputs[1].data();
                let mut gx = vec![T::zero(); rows * ch];
                let mut gg = vec![T::zero(); ch];
                let mut gb = vec![T::zero(); ch];
                for r in 0..rows {
                    let gr = &g[r * ch..][..ch];
                    let xr = &xhat[r * ch..][..ch];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for i in 0..ch {
                        gg[i] += gr[i] * xr[i];
                        gb[i] += gr[i];
                        let d = gr[i] * gamma[i];
                        s1 += d;
                        s2 += d * xr[i];
                    }
                    for i in 0..ch {
                        let d = gr[i] * gamma[i];
                        gx[r * ch + i] = inv_std[r] * (d - s1 / n - xr[i] * s2 / n);
                    }
                }
                Ok(vec![
                    Some(Tensor::new(c.inputs[0].shape().to_vec(), gx)?),
                    Some(Tensor::new([ch], gg)?),
                    Some(Tensor::new([ch], gb)?),
                ])
            }),
        )
    }

    /// 2-D convolution of `input[H,W,Cin]` with `kernel[k,k,Cin,Cout]`.
    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        let (vi, vk, vb) = (self.value(input), self.value(kernel), self.value(bias));
        let (h, w, cin) = vi.dims3("conv2d")?;
        let [k, k2, kin, cout] = vk.shape()[..] else {
            return Err(Error::shape("conv2d", format!("kernel rank 4 expected, got {:?}", vk.shape())));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if kin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kin}"),
            ));
        }
        if vb.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} vs {cout} outputs", vb.shape())));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let geom = ConvGeom { h, w, cin, cout, k, pad: padding, stride };
        let Some((oh, ow)) = geom.out_dims() else {
            return Err(Error::shape("conv2d", format!("{h}x{w} input too small for k={k}, pad={padding}")));
        };
        let out = kernels::conv2d_forward(&geom, vi.data(), vk.data(), vb.data());
        let out = Tensor::new([oh, ow, cout], out)?;
        let need_input = self.requires_grad(input);
        self.record(
            "conv2d",
            &[input, kernel, bias],
            out,
            Box::new(move |c| {
                let (gi, gk, gb) = kernels::conv2d_backward(
                    &geom,
                    c.inputs[0].data(),
                    c.inputs[1].data(),
                    c.grad.data(),
                    need_input,
                );
                Ok(vec![
                    gi.map(|d| Tensor::new([h, w, cin], d)).transpose()?,
                    Some(Tensor::new([k, k, cin, cout], gk)?),
                    Some(Tensor::new([cout], gb)?),
                ])
            }),
        )
    }

    /// Bilinear sampling of `image[H,W,C]` at `coords[H',W',2]` given as
    /// `(x, y)` pixel positions. Out-of-range coordinates clamp to the border.
    pub fn bilinear_sample(&self, image: Var, coords: Var) -> Result<Var> {
        let (vi, vc) = (self.value(image), self.value(coords));
        let (h, w, ch) = vi.dims3("bilinear_sample")?;
        let (oh, ow, two) = vc.dims3("bilinear_sample")?;
        if two != 2 {
            return Err(Error::shape("bilinear_sample", "coords need 2 channels"));
        }
        let taps: Vec<_> = vc
            .data()
            .chunks(2)
            .map(|p| kernels::bilinear_tap(p[0], p[1], w, h))
            .collect();
        let mut out = vec![T::zero(); oh * ow * ch];
        for (o, tap) in out.chunks_mut(ch).zip(&taps) {
            for q in 0..4 {
                let src = &vi.data()[tap.idx[q] * ch..][..ch];
                for (a, &s) in o.iter_mut().zip(src) {
                    *a += tap.w[q] * s;
                }
            }
        }
        let out = Tensor::new([oh, ow, ch], out)?;
        self.record(
            "bilinear_sample",
            &[image, coords],
            out,
            Box::new(move |c| {
                let img = c.inputs[0].data();
                let mut gimg = vec![T::zero(); h * w * ch];
                let mut gco = vec![T::zero(); oh * ow * 2];
                for (p, (go, tap)) in c.grad.data().chunks(ch).zip(&taps).enumerate() {
                    for q in 0..4 {
                        let base = tap.idx[q] * ch;
                        let src = &img[base..][..ch];
                        for (a, &g) in gimg[base..][..ch].iter_mut().zip(go) {
                            *a += tap.w[q] * g;
                        }
                        let d = kernels::dot(go, src);
                        gco[2 * p] += tap.dx[q] * d;
                        gco[2 * p + 1] += tap.dy[q] * d;
                    }
                }
                Ok(vec![
                    Some(Tensor::new([h, w, ch], gimg)?),
                    Some(Tensor::new([oh, ow, 2], gco)?),
                ])
            }),
        )
    }

    /// Per-position window gather used by correlation lookup.
    ///
    /// `maps[H',W',Hk,Wk]` holds one `Hk×Wk` map per source position;
    /// `centers[H',W',2]` gives `(x, y)` in that map's coordinates. The
    /// output `[H',W',(2r+1)²]` holds bilinear samples at
    /// `center + (dx, dy)` for `dy, dx ∈ [-r, r]`, `dx` fastest.
    pub fn window_lookup(&self, maps: Var, centers: Var, radius: usize) -> Result<Var> {
        let (vm, vc) = (self.value(maps), self.value(centers));
        let [sh, sw, hk, wk] = vm.shape()[..] else {
            return Err(Error::shape("window_lookup", format!("maps rank 4 expected, got {:?}", vm.shape())));
        };
        if vc.shape() != [sh, sw, 2] {
            return Err(shape_err("window_lookup", &vm, &vc));
        }
        let side = 2 * radius + 1;
        let win = side * side;
        let r = radius as isize;
        let mut taps = Vec::with_capacity(sh * sw * win);
        for p in vc.data().chunks(2) {
            for dy in -r..=r {
                for dx in -r..=r {
                    let x = p[0] + T::c(dx as f64);
                    let y = p[1] + T::c(dy as f64);
                    taps.push(kernels::bilinear_tap(x, y, wk, hk));
                }
            }
        }
        let plane = hk * wk;
        let mut out = vec![T::zero(); sh * sw * win];
        for (i, (o, tap)) in out.iter_mut().zip(&taps).enumerate() {
            let map = &vm.data()[(i / win) * plane..][..plane];
            *o = (0..4).map(|q| tap.w[q] * map[tap.idx[q]]).sum();
        }
        let out = Tensor::new([sh, sw, win], out)?;
        self.record(
            "window_lookup",
            &[maps, centers],
            out,
            Box::new(move |c| {
                let m = c.inputs[0].data();
                let mut gm = vec![T::zero(); m.len()];
                let mut gc = vec![T::zero(); sh * sw * 2];
                for (i, (&g, tap)) in c.grad.data().iter().zip(&taps).enumerate() {
                    let p = i / win;
                    let base = p * plane;
                    for q in 0..4 {
                        gm[base + tap.idx[q]] += tap.w[q] * g;
                        let v = m[base + tap.idx[q]];
                        gc[2 * p] += tap.dx[q] * v * g;
                        gc[2 * p + 1] += tap.dy[q] * v * g;
                    }
                }
                Ok(vec![
                    Some(Tensor::new([sh, sw, hk, wk], gm)?),
                    Some(Tensor::new([sh, sw, 2], gc)?),
                ])
            }),
        )
    }

    /// Mean pooling by 2 over the two trailing axes of a rank-4 tensor.
    pub fn avg_pool2_last2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let [a, b, h, w] = vx.shape()[..] else {
            return Err(Error::shape("avg_pool2_last2", format!("rank 4 expected, got {:?}", vx.shape())));
        };
        let (out, oh, ow) = kernels::avg_pool2(vx.data(), a * b, h, w);
        let out = Tensor::new([a, b, oh, ow], out)?;
        self.record(
            "avg_pool2_last2",
            &[x],
            out,
            Box::new(move |c| {
                let g = kernels::avg_pool2_backward(c.grad.data(), a * b, h, w);
                Ok(vec![Some(Tensor::new([a, b, h, w], g)?)])
            }),
        )
    }
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
}
