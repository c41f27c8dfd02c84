//! Raw NCHW kernels shared by the autodiff tape and the spiking simulator.
//!
//! Convolutions go through im2col and a single GEMM per batch item.
//! Transposed convolution is expressed as the input-adjoint of a forward
//! convolution, so the two can never drift apart.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Geometry of a (forward) cross-correlation `input[b,cin,h,w] -> output[b,cout,ho,wo]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Forward convolution of `input` dims with a `[cout, cin, k, k]` weight.
    pub fn conv(
        input: (usize, usize, usize, usize),
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, cin, h, w) = input;
        let [cout, wcin, kh, kw] = weight[..] else {
            return Err(shape_err!("conv weight must be rank 4, got {weight:?}"));
        };
        if kh != kw {
            return Err(shape_err!("only square kernels supported, got {kh}x{kw}"));
        }
        if wcin != cin {
            return Err(shape_err!(
                "conv weight expects {wcin} input channels, input has {cin}"
            ));
        }
        if stride == 0 {
            return Err(shape_err!("stride must be positive"));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!(
                "kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Geometry of the convolution whose input-adjoint is the transposed
    /// convolution of `input[b, cin_t, h, w]` with weight `[cin_t, cout_t, k, k]`.
    ///
    /// In the returned geometry `cout == cin_t`, `(ho, wo) == (h, w)` and
    /// `(cin, h, w)` describe the transposed convolution's output.
    pub fn transposed(
        input: (usize, usize, usize, usize),
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, cin_t, h, w) = input;
        let [wcin, cout_t, kh, kw] = weight[..] else {
            return Err(shape_err!(
                "transposed conv weight must be rank 4, got {weight:?}"
            ));
        };
        if kh != kw {
            return Err(shape_err!("only square kernels supported, got {kh}x{kw}"));
        }
        if wcin != cin_t {
            return Err(shape_err!(
                "transposed conv weight expects {wcin} input channels, input has {cin_t}"
            ));
        }
        if stride == 0 {
            return Err(shape_err!("stride must be positive"));
        }
        let k = kh;
        let full_h = (h - 1) * stride + k;
        let full_w = (w - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(shape_err!("padding {pad} consumes the whole output"));
        }
        Ok(ConvGeom {
            batch,
            cin: cout_t,
            h: full_h - 2 * pad,
            w: full_w - 2 * pad,
            cout: cin_t,
            k,
            stride,
            pad,
            ho: h,
            wo: w,
        })
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    let p = g.positions();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(col: &[S], g: &ConvGeom, dx: &mut [S]) {
    let p = g.positions();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w)`; `x` is `[batch, cin, h, w]`, result `[batch, cout, ho, wo]`.
pub fn conv2d_forward<S: Scalar>(x: &[S], weight: &[S], g: &ConvGeom) -> Vec<S> {
    let (kk, p) = (g.patch(), g.positions());
    let mut out = vec![S::zero(); g.batch * g.out_len()];
    let mut col = if g.pointwise() { Vec::new() } else { vec![S::zero(); kk * p] };
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let cols: &[S] = if g.pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        let ob = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        S::gemm(g.cout, kk, p, weight, false, cols, false, S::zero(), ob);
    }
    out
}

/// Input-adjoint of [`conv2d_forward`]: maps `dy[batch, cout, ho, wo]` to `dx[batch, cin, h, w]`.
pub fn conv2d_backward_input<S: Scalar>(dy: &[S], weight: &[S], g: &ConvGeom) -> Vec<S> {
    let (kk, p) = (g.patch(), g.positions());
    let mut dx = vec![S::zero(); g.batch * g.in_len()];
    let mut col = vec![S::zero(); kk * p];
    for b in 0..g.batch {
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
        if g.pointwise() {
            S::gemm(kk, g.cout, p, weight, true, dyb, false, S::zero(), dxb);
        } else {
            S::gemm(kk, g.cout, p, weight, true, dyb, false, S::zero(), &mut col);
            col2im_add(&col, g, dxb);
        }
    }
    dx
}

/// Accumulates the weight gradient `dw += dy * im2col(x)^T`.
pub fn conv2d_backward_weight<S: Scalar>(x: &[S], dy: &[S], g: &ConvGeom, dw: &mut [S]) {
    let (kk, p) = (g.patch(), g.positions());
    let mut col = if g.pointwise() { Vec::new() } else { vec![S::zero(); kk * p] };
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let cols: &[S] = if g.pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        S::gemm(g.cout, p, kk, dyb, false, cols, true, S::one(), dw);
    }
}

/// Below this fraction of nonzeros the scatter kernels beat im2col + GEMM.
pub const SPARSE_DENSITY: f64 = 0.12;

/// Fraction of nonzero entries.
pub fn density<S: Scalar>(x: &[S]) -> f64 {
    x.iter().filter(|v| **v != S::zero()).count() as f64 / x.len().max(1) as f64
}

/// Output position fed by input `(iy, ix)` through kernel tap `(ky, kx)`.
#[inline]
fn tap(g: &ConvGeom, iy: usize, ix: usize, ky: usize, kx: usize) -> Option<usize> {
    let (ny, nx) = (iy + g.pad, ix + g.pad);
    if ny < ky || nx < kx {
        return None;
    }
    let (dy, dx) = (ny - ky, nx - kx);
    if dy % g.stride != 0 || dx % g.stride != 0 {
        return None;
    }
    let (oy, ox) = (dy / g.stride, dx / g.stride);
    (oy < g.ho && ox < g.wo).then_some(oy * g.wo + ox)
}

/// Input position reached from output `(oy, ox)` through tap `(ky, kx)`.
#[inline]
fn source(g: &ConvGeom, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
    let iy = (oy * g.stride + ky).checked_sub(g.pad)?;
    let ix = (ox * g.stride + kx).checked_sub(g.pad)?;
    (iy < g.h && ix < g.w).then_some(iy * g.w + ix)
}

/// `[c, n]` to `[n, c]`.
fn to_hwc<S: Scalar>(x: &[S], c: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); c * n];
    for ch in 0..c {
        for (i, &v) in x[ch * n..(ch + 1) * n].iter().enumerate() {
            out[i * c + ch] = v;
        }
    }
    out
}

fn from_hwc<S: Scalar>(x: &[S], c: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); c * n];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n + i] = x[i * c + ch];
        }
    }
    out
}

#[inline]
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += a * s;
    }
}

/// Weight as `[cin, k, k, cout]`, or `[cout, k, k, cin]` when `by_output`.
fn regroup<S: Scalar>(w: &[S], g: &ConvGeom, by_output: bool) -> Vec<S> {
    let kk = g.k * g.k;
    let mut out = vec![S::zero(); w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..kk {
                let dst = if by_output { (co * kk + t) * g.cin + ci } else { (ci * kk + t) * g.cout + co };
                out[dst] = w[(co * g.cin + ci) * kk + t];
            }
        }
    }
    out
}

/// Scatter form of [`conv2d_forward`] for one mostly-zero sample.
pub fn conv2d_forward_sparse<S: Scalar>(x: &[S], weight: &[S], g: &ConvGeom) -> Vec<S> {
    debug_assert_eq!(g.batch, 1);
    let (kk, hw, p) = (g.k * g.k, g.h * g.w, g.positions());
    let wt = regroup(weight, g, false);
    let mut acc = vec![S::zero(); p * g.cout];
    for (i, &v) in x.iter().enumerate() {
        if v == S::zero() {
            continue;
        }
        let (ci, iy, ix) = (i / hw, (i % hw) / g.w, i % g.w);
        for ky in 0..g.k {
            for kx in 0..g.k {
                if let Some(o) = tap(g, iy, ix, ky, kx) {
                    let row = &wt[(ci * kk + ky * g.k + kx) * g.cout..][..g.cout];
                    axpy(v, row, &mut acc[o * g.cout..][..g.cout]);
                }
            }
        }
    }
    from_hwc(&acc, g.cout, p)
}

/// Scatter form of [`conv2d_backward_input`] for one mostly-zero `dy`.
pub fn conv2d_backward_input_sparse<S: Scalar>(dy: &[S], weight: &[S], g: &ConvGeom) -> Vec<S> {
    debug_assert_eq!(g.batch, 1);
    let (kk, p) = (g.k * g.k, g.positions());
    let wt = regroup(weight, g, true);
    let mut acc = vec![S::zero(); g.h * g.w * g.cin];
    for (i, &v) in dy.iter().enumerate() {
        if v == S::zero() {
            continue;
        }
        let (co, oy, ox) = (i / p, (i % p) / g.wo, i % g.wo);
        for ky in 0..g.k {
            for kx in 0..g.k {
                if let Some(s) = source(g, oy, ox, ky, kx) {
                    let row = &wt[(co * kk + ky * g.k + kx) * g.cin..][..g.cin];
                    axpy(v, row, &mut acc[s * g.cin..][..g.cin]);
                }
            }
        }
    }
    from_hwc(&acc, g.cin, g.h * g.w)
}

/// [`conv2d_backward_weight`] for one sample whose input `x` is mostly zero.
pub fn conv2d_backward_weight_sparse_input<S: Scalar>(x: &[S], dy: &[S], g: &ConvGeom, dw: &mut [S]) {
    debug_assert_eq!(g.batch, 1);
    let (kk, hw, p) = (g.k * g.k, g.h * g.w, g.positions());
    let dyt = to_hwc(dy, g.cout, p);
    let mut acc = vec![S::zero(); dw.len()];
    for (i, &v) in x.iter().enumerate() {
        if v == S::zero() {
            continue;
        }
        let (ci, iy, ix) = (i / hw, (i % hw) / g.w, i % g.w);
        for ky in 0..g.k {
            for kx in 0..g.k {
                if let Some(o) = tap(g, iy, ix, ky, kx) {
                    let row = &mut acc[(ci * kk + ky * g.k + kx) * g.cout..][..g.cout];
                    axpy(v, &dyt[o * g.cout..][..g.cout], row);
                }
            }
        }
    }
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..kk {
                dw[(co * g.cin + ci) * kk + t] += acc[(ci * kk + t) * g.cout + co];
            }
        }
    }
}

/// [`conv2d_backward_weight`] for one sample whose output gradient `dy` is mostly zero.
pub fn conv2d_backward_weight_sparse_output<S: Scalar>(x: &[S], dy: &[S], g: &ConvGeom, dw: &mut [S]) {
    debug_assert_eq!(g.batch, 1);
    let (kk, p) = (g.k * g.k, g.positions());
    let xt = to_hwc(x, g.cin, g.h * g.w);
    let mut acc = vec![S::zero(); dw.len()];
    for (i, &v) in dy.iter().enumerate() {
        if v == S::zero() {
            continue;
        }
        let (co, oy, ox) = (i / p, (i % p) / g.wo, i % g.wo);
        for ky in 0..g.k {
            for kx in 0..g.k {
                if let Some(s) = source(g, oy, ox, ky, kx) {
                    let row = &mut acc[(co * kk + ky * g.k + kx) * g.cin..][..g.cin];
                    axpy(v, &xt[s * g.cin..][..g.cin], row);
                }
            }
        }
    }
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..kk {
                dw[(co * g.cin + ci) * kk + t] += acc[(co * kk + t) * g.cin + ci];
            }
        }
    }
}

/// Non-overlapping average pooling with a square window.
pub fn avg_pool_forward<S: Scalar>(x: &[S], dims: (usize, usize, usize, usize), win: usize) -> Vec<S> {
    let (b, c, h, w) = dims;
    let (ho, wo) = (h / win, w / win);
    let scale = S::one() / S::lit((win * win) as f64);
    let mut out = vec![S::zero(); b * c * ho * wo];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y / win) * wo..(y / win + 1) * wo];
            for (x, &v) in row.iter().enumerate() {
                drow[x / win] += v;
            }
        }
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    out
}

pub fn avg_pool_backward<S: Scalar>(dy: &[S], dims: (usize, usize, usize, usize), win: usize) -> Vec<S> {
    let (b, c, h, w) = dims;
    let (ho, wo) = (h / win, w / win);
    let scale = S::one() / S::lit((win * win) as f64);
    let mut dx = vec![S::zero(); b * c * h * w];
    for plane in 0..b * c {
        let src = &dy[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / win) * wo + x / win] * scale;
            }
        }
    }
    dx
}

/// Concatenates `[b, ca, h, w]` and `[b, cb, h, w]` along channels.
pub fn concat_channels<S: Scalar>(a: &[S], ca: usize, b: &[S], cb: usize, batch: usize, hw: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(batch * (ca + cb) * hw);
    for n in 0..batch {
        out.extend_from_slice(&a[n * ca * hw..(n + 1) * ca * hw]);
        out.extend_from_slice(&b[n * cb * hw..(n + 1) * cb * hw]);
    }
    out
}

/// Inverse of [`concat_channels`].
pub fn split_channels<S: Scalar>(x: &[S], ca: usize, cb: usize, batch: usize, hw: usize) -> (Vec<S>, Vec<S>) {
    let mut a = Vec::with_capacity(batch * ca * hw);
    let mut b = Vec::with_capacity(batch * cb * hw);
    let per = (ca + cb) * hw;
    for n in 0..batch {
        let s = &x[n * per..(n + 1) * per];
        a.extend_from_slice(&s[..ca * hw]);
        b.extend_from_slice(&s[ca * hw..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop convolution used as an oracle for the GEMM path.
    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.batch * g.out_len()];
        for b in 0..g.batch {
            for co in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((b * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        y[((b * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + salt) * 1.7).sin()).collect()
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (3, 1, 0)] {
            let g = ConvGeom::conv((2, 3, 7, 6), &[4, 3, k, k], stride, pad).unwrap();
            let x = pseudo(2 * g.in_len(), 0.3);
            let w = pseudo(4 * 3 * k * k, 1.1);
            let got = conv2d_forward(&x, &w, &g);
            let want = naive_conv(&x, &w, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn backward_input_is_adjoint_of_forward() {
        // <conv(x), y> == <x, conv^T(y)>
        let g = ConvGeom::conv((1, 2, 5, 4), &[3, 2, 3, 3], 2, 1).unwrap();
        let x = pseudo(g.in_len(), 0.0);
        let y = pseudo(g.out_len(), 5.0);
        let w = pseudo(3 * 2 * 9, 2.0);
        let lhs: f64 = conv2d_forward(&x, &w, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&conv2d_backward_input(&y, &w, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_geometry_doubles() {
        let g = ConvGeom::transposed((1, 1, 2, 2), &[1, 1, 2, 2], 2, 0).unwrap();
        assert_eq!((g.h, g.w), (4, 4));
        assert_eq!((g.ho, g.wo), (2, 2));
    }

    #[test]
    fn pool_backward_spreads_quarter() {
        let dx = avg_pool_backward(&[4.0f64], (1, 1, 2, 2), 2);
        assert_eq!(dx, vec![1.0; 4]);
    }

    #[test]
    fn scatter_kernels_match_dense() {
        for &(k, stride, pad) in &[(3, 1, 1), (2, 2, 0), (1, 1, 0), (3, 2, 1)] {
            let g = ConvGeom::conv((1, 3, 8, 6), &[4, 3, k, k], stride, pad).unwrap();
            let x: Vec<f64> = pseudo(g.in_len(), 0.2).iter().map(|v| if *v > 0.6 { 1.0 } else { 0.0 }).collect();
            let y: Vec<f64> = pseudo(g.out_len(), 3.0).iter().map(|v| if *v > 0.5 { *v } else { 0.0 }).collect();
            let w = pseudo(4 * 3 * k * k, 0.9);
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(&conv2d_forward_sparse(&x, &w, &g), &conv2d_forward(&x, &w, &g)));
            assert!(close(&conv2d_backward_input_sparse(&y, &w, &g), &conv2d_backward_input(&y, &w, &g)));
            let mut a = vec![0.5; w.len()];
            let mut b = a.clone();
            conv2d_backward_weight(&x, &y, &g, &mut a);
            conv2d_backward_weight_sparse_input(&x, &y, &g, &mut b);
            assert!(close(&a, &b));
            let mut c = vec![0.5; w.len()];
            conv2d_backward_weight_sparse_output(&x, &y, &g, &mut c);
            assert!(close(&a, &c));
        }
    }
}
