//! Slice-level numeric kernels behind the differentiable ops.
//!
//! Layouts: images are `H×W×C`, convolution kernels `k×k×Cin×Cout`,
//! matrices row-major.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
}

impl ConvGeom {
    /// Output extents, `None` when the padded input is smaller than the kernel.
    pub fn out_dims(&self) -> Option<(usize, usize)> {
        let ph = self.h + 2 * self.pad;
        let pw = self.w + 2 * self.pad;
        if ph < self.k || pw < self.k || self.stride == 0 {
            return None;
        }
        Some(((ph - self.k) / self.stride + 1, (pw - self.k) / self.stride + 1))
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (oh, ow) = g.out_dims().expect("validated geometry");
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let mut out = vec![T::zero(); oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let px = &mut out[(oy * ow + ox) * cout..][..cout];
            px.copy_from_slice(bias);
            for ky in 0..k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let src = &input[(iy * g.w + ix) * cin..][..cin];
                    let kbase = (ky * k + kx) * cin * cout;
                    for (ci, &v) in src.iter().enumerate() {
                        let krow = &kernel[kbase + ci * cout..][..cout];
                        for (o, &kv) in px.iter_mut().zip(krow) {
                            *o += v * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (oh, ow) = g.out_dims().expect("validated geometry");
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let mut gin = need_input.then(|| vec![T::zero(); input.len()]);
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &grad_out[(oy * ow + ox) * cout..][..cout];
            for (b, &v) in gb.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let ibase = (iy * g.w + ix) * cin;
                    let kbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[ibase + ci];
                        let krow = kbase + ci * cout;
                        let gkrow = &mut gk[krow..][..cout];
                        for (a, &d) in gkrow.iter_mut().zip(go) {
                            *a += v * d;
                        }
                        if let Some(gin) = gin.as_mut() {
                            let kr = &kernel[krow..][..cout];
                            gin[ibase + ci] += dot(kr, go);
                        }
                    }
                }
            }
        }
    }
    (gin, gk, gb)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // four lanes let the compiler keep independent accumulators
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..][..k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * k..][..k]);
        }
    }
    out
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..][..n];
        for i in 0..m {
            let av = a[p * m + i];
            for (o, &bv) in out[i * n..][..n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Four-neighbour bilinear tap with border clamping.
///
/// `dx`/`dy` hold the derivative of each weight with respect to the
/// sample coordinate; they vanish where the coordinate is clamped.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    pub idx: [usize; 4],
    pub w: [T; 4],
    pub dx: [T; 4],
    pub dy: [T; 4],
}

fn axis<T: Scalar>(c: T, extent: usize) -> (usize, usize, T, bool) {
    if extent == 1 {
        return (0, 0, T::zero(), false);
    }
    let hi = T::from_usize_lossy(extent - 1);
    let inside = c >= T::zero() && c <= hi;
    let cc = c.max(T::zero()).min(hi);
    let i0 = cc.floor().to_usize().unwrap_or(0).min(extent - 2);
    let f = cc - T::from_usize_lossy(i0);
    (i0, i0 + 1, f, inside)
}

/// Tap into a `height×width` grid (pixel index `y*width + x`).
#[inline]
pub fn bilinear_tap<T: Scalar>(x: T, y: T, width: usize, height: usize) -> Tap<T> {
    let (x0, x1, fx, ax) = axis(x, width);
    let (y0, y1, fy, ay) = axis(y, height);
    let one = T::one();
    let z = T::zero();
    let (gx, gy) = (if ax { one } else { z }, if ay { one } else { z });
    Tap {
        idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        w: [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy],
        dx: [-(one - fy) * gx, (one - fy) * gx, -fy * gx, fy * gx],
        dy: [-(one - fx) * gy, -fx * gy, (one - fx) * gy, fx * gy],
    }
}

/// Mean pooling by 2 over the two trailing axes of `[outer, h, w]`,
/// ceil-sized output, partial windows average what exists.
pub fn avg_pool2<T: Scalar>(input: &[T], outer: usize, h: usize, w: usize) -> (Vec<T>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::zero(); outer * oh * ow];
    for a in 0..outer {
        let src = &input[a * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                let mut s = T::zero();
                let mut n = 0usize;
                for yy in 2 * y..(2 * y + 2).min(h) {
                    for xx in 2 * x..(2 * x + 2).min(w) {
                        s += src[yy * w + xx];
                        n += 1;
                    }
                }
                out[(a * oh + y) * ow + x] = s / T::from_usize_lossy(n);
            }
        }
    }
    (out, oh, ow)
}

pub fn avg_pool2_backward<T: Scalar>(grad: &[T], outer: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut gin = vec![T::zero(); outer * h * w];
    for a in 0..outer {
        for y in 0..oh {
            for x in 0..ow {
                let ys = 2 * y..(2 * y + 2).min(h);
                let xs = 2 * x..(2 * x + 2).min(w);
                let n = ys.len() * xs.len();
                let g = grad[(a * oh + y) * ow + x] / T::from_usize_lossy(n);
                for yy in ys {
                    for xx in xs.clone() {
                        gin[(a * h + yy) * w + xx] += g;
                    }
                }
            }
        }
    }
    gin
}
