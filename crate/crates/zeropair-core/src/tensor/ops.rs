//! Differentiable primitives: convolution, transposed convolution, max
//! pooling with argmax indices, unpooling, batch normalization,
//! activations, latent noise, elementwise arithmetic and reductions.
//!
//! Convolutions lower to im2col plus a cache-blocked GEMM; their backward
//! passes reuse the same lowering, so forward and reverse cost stay within
//! a small factor of each other.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Val};
use crate::tensor::{gemm_strided, Elem, ClassMap, Shape, Tensor};

/// Train/eval switch for stateful layers (batch norm, noise).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-window argmax offsets recorded by 2x2 max pooling.
///
/// `offsets` holds one value in `{0,1,2,3}` per pooled cell, numbering the
/// window positions in row-major order (0 = top-left, 3 = bottom-right).
#[derive(Clone, Debug)]
pub struct PoolingIndices {
    input_shape: Shape,
    pooled_shape: Shape,
    offsets: Arc<Vec<u8>>,
}

impl PoolingIndices {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn pooled_shape(&self) -> Shape {
        self.pooled_shape
    }

    pub fn offsets(&self) -> &[u8] {
        &self.offsets
    }

    /// Flat input offset of the recorded argmax for pooled cell `(n,c,h,w)`.
    fn source_index(&self, n: usize, c: usize, ph: usize, pw: usize) -> usize {
        let off = self.offsets[self.pooled_shape.index(n, c, ph, pw)] as usize;
        let (di, dj) = (off / 2, off % 2);
        self.input_shape.index(n, c, 2 * ph + di, 2 * pw + dj)
    }
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::dimension(
            "conv2d",
            format!("spatial extent {input} + 2*{pad} smaller than kernel {kernel}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Gathers sliding-window patches of `src` (one image, `(c, hs, ws)`) into
/// a `(c*kh*kw) x (gh*gw)` column matrix. Window `(gi,gj)` samples source
/// position `(gi*stride + ki - pad, gj*stride + kj - pad)`; out-of-bounds
/// taps produce zeros.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Elem>(
    src: &[T],
    c: usize,
    hs: usize,
    ws: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    out: &mut [T],
) {
    let grid = gh * gw;
    debug_assert_eq!(out.len(), c * kh * kw * grid);
    let mut row = 0usize;
    for ci in 0..c {
        let src_c = &src[ci * hs * ws..(ci + 1) * hs * ws];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut out[row * grid..(row + 1) * grid];
                for gi in 0..gh {
                    let si = (gi * stride + ki) as isize - pad as isize;
                    let dst_row = &mut dst[gi * gw..(gi + 1) * gw];
                    if si < 0 || si >= hs as isize {
                        dst_row.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &src_c[(si as usize) * ws..(si as usize + 1) * ws];
                    if stride == 1 {
                        let sj0 = kj as isize - pad as isize;
                        let lo = (-sj0).max(0) as usize;
                        let hi = ((ws as isize - sj0).min(gw as isize)).max(lo as isize) as usize;
                        dst_row[..lo].fill(T::ZERO);
                        dst_row[hi..].fill(T::ZERO);
                        if hi > lo {
                            let s0 = (sj0 + lo as isize) as usize;
                            dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (gj, d) in dst_row.iter_mut().enumerate() {
                            let sj = (gj * stride + kj) as isize - pad as isize;
                            *d = if sj < 0 || sj >= ws as isize {
                                T::ZERO
                            } else {
                                src_row[sj as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back into an image
/// buffer of `(c, hd, wd)`. Used for conv input gradients and the
/// transposed-convolution forward pass.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Elem>(
    cols: &[T],
    c: usize,
    hd: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    dst: &mut [T],
) {
    let grid = gh * gw;
    debug_assert_eq!(cols.len(), c * kh * kw * grid);
    debug_assert_eq!(dst.len(), c * hd * wd);
    let mut row = 0usize;
    for ci in 0..c {
        let dst_c = &mut dst[ci * hd * wd..(ci + 1) * hd * wd];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * grid..(row + 1) * grid];
                for gi in 0..gh {
                    let di = (gi * stride + ki) as isize - pad as isize;
                    if di < 0 || di >= hd as isize {
                        continue;
                    }
                    let dst_row = &mut dst_c[(di as usize) * wd..(di as usize + 1) * wd];
                    let src_row = &src[gi * gw..(gi + 1) * gw];
                    for (gj, &v) in src_row.iter().enumerate() {
                        let dj = (gj * stride + kj) as isize - pad as isize;
                        if dj >= 0 && dj < wd as isize {
                            dst_row[dj as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn same_shape<T: Elem>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(
            op,
            format!("shapes {} and {} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<T: Elem> Tape<T> {
    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(T, T) -> T,
        back: impl FnOnce(&Tensor<T>, &Tensor<T>, &Tensor<T>, bool, bool) -> Vec<(Val, Tensor<T>)>
            + 'static,
    ) -> Result<Val> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape(op, &ta, &tb)?;
        let data = ta
            .iter()
            .zip(tb.iter())
            .map(|(&x, &y)| f(x, y))
            .collect::<Vec<_>>();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.record(out, need_a || need_b, move |g| {
            back(g, &ta, &tb, need_a, need_b)
        }))
    }

    /// Elementwise sum.
    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_elementwise("add", a, b, |x, y| x + y, move |g, _, _, na, nb| {
            let mut out = Vec::new();
            if na {
                out.push((a, g.clone()));
            }
            if nb {
                out.push((b, g.clone()));
            }
            out
        })
    }

    /// Elementwise difference.
    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, move |g, _, _, na, nb| {
            let mut out = Vec::new();
            if na {
                out.push((a, g.clone()));
            }
            if nb {
                out.push((b, g.map(|v| -v)));
            }
            out
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, move |g, ta, tb, na, nb| {
            let mut out = Vec::new();
            if na {
                let d = g
                    .iter()
                    .zip(tb.iter())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect::<Vec<_>>();
                out.push((a, Tensor::from_vec(g.shape(), d).expect("shape")));
            }
            if nb {
                let d = g
                    .iter()
                    .zip(ta.iter())
                    .map(|(&gv, &av)| gv * av)
                    .collect::<Vec<_>>();
                out.push((b, Tensor::from_vec(g.shape(), d).expect("shape")));
            }
            out
        })
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: Val, k: T) -> Val {
        let ta = self.value(a).clone();
        let out = ta.map(|v| v * k);
        let need = self.requires_grad(a);
        self.record(out, need, move |g| vec![(a, g.map(|v| v * k))])
    }

    /// Addition of a constant to every element.
    pub fn add_scalar(&mut self, a: Val, k: T) -> Val {
        let ta = self.value(a).clone();
        let out = ta.map(|v| v + k);
        let need = self.requires_grad(a);
        self.record(out, need, move |g| vec![(a, g.clone())])
    }

    /// Elementwise square.
    pub fn sqr(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let out = ta.map(|v| v * v);
        let need = self.requires_grad(a);
        let two = T::ONE + T::ONE;
        self.record(out, need, move |g| {
            let d = g
                .iter()
                .zip(ta.iter())
                .map(|(&gv, &av)| two * av * gv)
                .collect::<Vec<_>>();
            vec![(a, Tensor::from_vec(g.shape(), d).expect("shape"))]
        })
    }

    /// Hyperbolic tangent.
    pub fn tanh(&mut self, a: Val) -> Val {
        let out = self.value(a).map(|v| v.tanh());
        let saved = out.clone();
        let need = self.requires_grad(a);
        self.record(out, need, move |g| {
            let d = g
                .iter()
                .zip(saved.iter())
                .map(|(&gv, &yv)| gv * (T::ONE - yv * yv))
                .collect::<Vec<_>>();
            vec![(a, Tensor::from_vec(g.shape(), d).expect("shape"))]
        })
    }

    /// `max(0, x)` with subgradient 0 at the origin.
    pub fn relu(&mut self, a: Val) -> Val {
        self.leaky_relu(a, T::ZERO)
    }

    /// `max(slope * x, x)` for `0 <= slope < 1`.
    pub fn leaky_relu(&mut self, a: Val, slope: T) -> Val {
        let ta = self.value(a).clone();
        let out = ta.map(|v| if v > T::ZERO { v } else { slope * v });
        let need = self.requires_grad(a);
        self.record(out, need, move |g| {
            let d = g
                .iter()
                .zip(ta.iter())
                .map(|(&gv, &av)| if av > T::ZERO { gv } else { slope * gv })
                .collect::<Vec<_>>();
            vec![(a, Tensor::from_vec(g.shape(), d).expect("shape"))]
        })
    }

    /// Mean over all elements, as a scalar node.
    pub fn mean_all(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let n = ta.numel();
        let inv = T::ONE / T::from_f64(n as f64);
        let mut acc = T::ZERO;
        for &v in ta.iter() {
            acc += v;
        }
        let out = Tensor::scalar(acc * inv);
        let need = self.requires_grad(a);
        self.record(out, need, move |g| {
            vec![(a, Tensor::full(ta.shape(), g.item() * inv))]
        })
    }

    /// Sum over all elements, as a scalar node.
    pub fn sum_all(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let mut acc = T::ZERO;
        for &v in ta.iter() {
            acc += v;
        }
        let out = Tensor::scalar(acc);
        let need = self.requires_grad(a);
        self.record(out, need, move |g| {
            vec![(a, Tensor::full(ta.shape(), g.item()))]
        })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::dimension(
                "concat_channels",
                format!("non-channel axes differ: {sa} vs {sb}"),
            ));
        }
        let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let hw = sa.h * sa.w;
        let mut data = vec![T::ZERO; out_shape.numel()];
        for n in 0..sa.n {
            let dst = &mut data[n * out_shape.c * hw..(n + 1) * out_shape.c * hw];
            dst[..sa.c * hw].copy_from_slice(&ta.data()[n * sa.c * hw..(n + 1) * sa.c * hw]);
            dst[sa.c * hw..].copy_from_slice(&tb.data()[n * sb.c * hw..(n + 1) * sb.c * hw]);
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.record(out, need_a || need_b, move |g| {
            let mut res = Vec::new();
            let split = |lo: usize, c: usize| -> Tensor<T> {
                let mut d = vec![T::ZERO; sa.n * c * hw];
                for n in 0..sa.n {
                    let src = &g.data()[(n * out_shape.c + lo) * hw..(n * out_shape.c + lo + c) * hw];
                    d[n * c * hw..(n + 1) * c * hw].copy_from_slice(src);
                }
                Tensor::from_vec(Shape::new(sa.n, c, sa.h, sa.w), d).expect("shape")
            };
            if need_a {
                res.push((a, split(0, sa.c)));
            }
            if need_b {
                res.push((b, split(sa.c, sb.c)));
            }
            res
        }))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample_nearest2(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let s = ta.shape();
        let out_shape = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
        let mut data = vec![T::ZERO; out_shape.numel()];
        for nc in 0..s.n * s.c {
            let src = &ta.data()[nc * s.h * s.w..(nc + 1) * s.h * s.w];
            let dst = &mut data[nc * out_shape.h * out_shape.w..(nc + 1) * out_shape.h * out_shape.w];
            for i in 0..s.h {
                for j in 0..s.w {
                    let v = src[i * s.w + j];
                    let base = (2 * i) * out_shape.w + 2 * j;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + out_shape.w] = v;
                    dst[base + out_shape.w + 1] = v;
                }
            }
        }
        let out = Tensor::from_vec(out_shape, data).expect("shape");
        let need = self.requires_grad(a);
        self.record(out, need, move |g| {
            let mut d = vec![T::ZERO; s.numel()];
            for nc in 0..s.n * s.c {
                let gsrc = &g.data()[nc * out_shape.h * out_shape.w..(nc + 1) * out_shape.h * out_shape.w];
                let ddst = &mut d[nc * s.h * s.w..(nc + 1) * s.h * s.w];
                for i in 0..s.h {
                    for j in 0..s.w {
                        let base = (2 * i) * out_shape.w + 2 * j;
                        ddst[i * s.w + j] = gsrc[base]
                            + gsrc[base + 1]
                            + gsrc[base + out_shape.w]
                            + gsrc[base + out_shape.w + 1];
                    }
                }
            }
            vec![(a, Tensor::from_vec(s, d).expect("shape"))]
        })
    }

    /// 2-D convolution: weights `(out_ch, in_ch, kh, kw)`, bias `(1, out_ch, 1, 1)`.
    ///
    /// Output spatial extent is `floor((H + 2*pad - kh)/stride) + 1`.
    pub fn conv2d(&mut self, x: Val, w: Val, b: Val, stride: usize, pad: usize) -> Result<Val> {
        if stride == 0 {
            return Err(Error::parameter("stride", "must be >= 1".to_string()));
        }
        let (tx, tw, tb) = (
            self.value(x).clone(),
            self.value(w).clone(),
            self.value(b).clone(),
        );
        let (xs, ws) = (tx.shape(), tw.shape());
        // Weight layout: n = out channels, c = in channels.
        let (cout, cin, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        if xs.c != cin {
            return Err(Error::dimension(
                "conv2d",
                format!("input channel axis {} != weight in-channel axis {cin}", xs.c),
            ));
        }
        if tb.shape() != Shape::new(1, cout, 1, 1) {
            return Err(Error::dimension(
                "conv2d",
                format!("bias shape {} != 1x{cout}x1x1", tb.shape()),
            ));
        }
        let ho = conv_out_extent(xs.h, kh, stride, pad)?;
        let wo = conv_out_extent(xs.w, kw, stride, pad)?;
        let out_shape = Shape::new(xs.n, cout, ho, wo);
        let kdim = cin * kh * kw;
        let grid = ho * wo;

        let mut out = vec![T::ZERO; out_shape.numel()];
        let mut cols = vec![T::ZERO; kdim * grid];
        for n in 0..xs.n {
            im2col(
                &tx.data()[n * cin * xs.h * xs.w..(n + 1) * cin * xs.h * xs.w],
                cin,
                xs.h,
                xs.w,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
                &mut cols,
            );
            let dst = &mut out[n * cout * grid..(n + 1) * cout * grid];
            gemm_strided(
                cout,
                kdim,
                grid,
                T::ONE,
                tw.data(),
                (kdim as isize, 1),
                &cols,
                (grid as isize, 1),
                T::ZERO,
                dst,
                (grid as isize, 1),
            );
            for co in 0..cout {
                let bias = tb.data()[co];
                for v in &mut dst[co * grid..(co + 1) * grid] {
                    *v += bias;
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        let (need_x, need_w, need_b) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(b),
        );
        Ok(self.record(out, need_x || need_w || need_b, move |g| {
            let mut res = Vec::new();
            let mut cols = vec![T::ZERO; kdim * grid];
            if need_b {
                let mut db = vec![T::ZERO; cout];
                for n in 0..xs.n {
                    let gn = &g.data()[n * cout * grid..(n + 1) * cout * grid];
                    for co in 0..cout {
                        let mut acc = T::ZERO;
                        for &v in &gn[co * grid..(co + 1) * grid] {
                            acc += v;
                        }
                        db[co] += acc;
                    }
                }
                res.push((
                    b,
                    Tensor::from_vec(Shape::new(1, cout, 1, 1), db).expect("shape"),
                ));
            }
            if need_w {
                let mut dw = vec![T::ZERO; cout * kdim];
                for n in 0..xs.n {
                    im2col(
                        &tx.data()[n * cin * xs.h * xs.w..(n + 1) * cin * xs.h * xs.w],
                        cin,
                        xs.h,
                        xs.w,
                        kh,
                        kw,
                        stride,
                        pad,
                        ho,
                        wo,
                        &mut cols,
                    );
                    let gn = &g.data()[n * cout * grid..(n + 1) * cout * grid];
                    // dW(cout,kdim) += g_n(cout,grid) * cols(kdim,grid)^T
                    gemm_strided(
                        cout,
                        grid,
                        kdim,
                        T::ONE,
                        gn,
                        (grid as isize, 1),
                        &cols,
                        (1, grid as isize),
                        T::ONE,
                        &mut dw,
                        (kdim as isize, 1),
                    );
                }
                res.push((w, Tensor::from_vec(ws, dw).expect("shape")));
            }
            if need_x {
                let mut dx = vec![T::ZERO; xs.numel()];
                for n in 0..xs.n {
                    let gn = &g.data()[n * cout * grid..(n + 1) * cout * grid];
                    // dcols(kdim,grid) = W(cout,kdim)^T * g_n(cout,grid)
                    gemm_strided(
                        kdim,
                        cout,
                        grid,
                        T::ONE,
                        tw.data(),
                        (1, kdim as isize),
                        gn,
                        (grid as isize, 1),
                        T::ZERO,
                        &mut cols,
                        (grid as isize, 1),
                    );
                    col2im_add(
                        &cols,
                        cin,
                        xs.h,
                        xs.w,
                        kh,
                        kw,
                        stride,
                        pad,
                        ho,
                        wo,
                        &mut dx[n * cin * xs.h * xs.w..(n + 1) * cin * xs.h * xs.w],
                    );
                }
                res.push((x, Tensor::from_vec(xs, dx).expect("shape")));
            }
            res
        }))
    }

    /// Transposed 2-D convolution (adjoint of [`Tape::conv2d`]): weights
    /// `(in_ch, out_ch, kh, kw)`, output extent
    /// `(H-1)*stride - 2*pad + kh + output_padding`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_transpose(
        &mut self,
        x: Val,
        w: Val,
        b: Val,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Val> {
        if stride == 0 {
            return Err(Error::parameter("stride", "must be >= 1".to_string()));
        }
        if output_padding >= stride {
            return Err(Error::parameter(
                "output_padding",
                format!("{output_padding} must be < stride {stride}"),
            ));
        }
        let (tx, tw, tb) = (
            self.value(x).clone(),
            self.value(w).clone(),
            self.value(b).clone(),
        );
        let (xs, ws) = (tx.shape(), tw.shape());
        // Weight layout: n = in channels, c = out channels.
        let (cin, cout, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        if xs.c != cin {
            return Err(Error::dimension(
                "conv2d_transpose",
                format!("input channel axis {} != weight in-channel axis {cin}", xs.c),
            ));
        }
        if tb.shape() != Shape::new(1, cout, 1, 1) {
            return Err(Error::dimension(
                "conv2d_transpose",
                format!("bias shape {} != 1x{cout}x1x1", tb.shape()),
            ));
        }
        let extent = |i: usize, k: usize| -> Result<usize> {
            let grown = (i - 1) * stride + k + output_padding;
            if grown < 2 * pad + 1 {
                return Err(Error::dimension(
                    "conv2d_transpose",
                    format!("output extent ({i}-1)*{stride} - 2*{pad} + {k} not positive"),
                ));
            }
            Ok(grown - 2 * pad)
        };
        let ho = extent(xs.h, kh)?;
        let wo = extent(xs.w, kw)?;
        let out_shape = Shape::new(xs.n, cout, ho, wo);
        let kdim = cout * kh * kw;
        let grid = xs.h * xs.w;

        let mut out = vec![T::ZERO; out_shape.numel()];
        let mut cols = vec![T::ZERO; kdim * grid];
        for n in 0..xs.n {
            let xn = &tx.data()[n * cin * grid..(n + 1) * cin * grid];
            // cols(kdim,grid) = W(cin,kdim)^T * x_n(cin,grid)
            gemm_strided(
                kdim,
                cin,
                grid,
                T::ONE,
                tw.data(),
                (1, kdim as isize),
                xn,
                (grid as isize, 1),
                T::ZERO,
                &mut cols,
                (grid as isize, 1),
            );
            let dst = &mut out[n * cout * ho * wo..(n + 1) * cout * ho * wo];
            col2im_add(&cols, cout, ho, wo, kh, kw, stride, pad, xs.h, xs.w, dst);
            for co in 0..cout {
                let bias = tb.data()[co];
                for v in &mut dst[co * ho * wo..(co + 1) * ho * wo] {
                    *v += bias;
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        let (need_x, need_w, need_b) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(b),
        );
        Ok(self.record(out, need_x || need_w || need_b, move |g| {
            let mut res = Vec::new();
            let mut gcols = vec![T::ZERO; kdim * grid];
            let mut gcols_ready = false;
            let mut fill_gcols = |gcols: &mut Vec<T>, n: usize| {
                im2col(
                    &g.data()[n * cout * ho * wo..(n + 1) * cout * ho * wo],
                    cout,
                    ho,
                    wo,
                    kh,
                    kw,
                    stride,
                    pad,
                    xs.h,
                    xs.w,
                    gcols,
                );
            };
            if need_b {
                let mut db = vec![T::ZERO; cout];
                for n in 0..xs.n {
                    let gn = &g.data()[n * cout * ho * wo..(n + 1) * cout * ho * wo];
                    for co in 0..cout {
                        let mut acc = T::ZERO;
                        for &v in &gn[co * ho * wo..(co + 1) * ho * wo] {
                            acc += v;
                        }
                        db[co] += acc;
                    }
                }
                res.push((
                    b,
                    Tensor::from_vec(Shape::new(1, cout, 1, 1), db).expect("shape"),
                ));
            }
            if need_w {
                let mut dw = vec![T::ZERO; cin * kdim];
                for n in 0..xs.n {
                    fill_gcols(&mut gcols, n);
                    gcols_ready = xs.n == 1;
                    let xn = &tx.data()[n * cin * grid..(n + 1) * cin * grid];
                    // dW(cin,kdim) += x_n(cin,grid) * gcols(kdim,grid)^T
                    gemm_strided(
                        cin,
                        grid,
                        kdim,
                        T::ONE,
                        xn,
                        (grid as isize, 1),
                        &gcols,
                        (1, grid as isize),
                        T::ONE,
                        &mut dw,
                        (kdim as isize, 1),
                    );
                }
                res.push((w, Tensor::from_vec(ws, dw).expect("shape")));
            }
            if need_x {
                let mut dx = vec![T::ZERO; xs.numel()];
                for n in 0..xs.n {
                    if !(gcols_ready && n == 0) {
                        fill_gcols(&mut gcols, n);
                    }
                    // dx_n(cin,grid) = W(cin,kdim) * gcols(kdim,grid)
                    gemm_strided(
                        cin,
                        kdim,
                        grid,
                        T::ONE,
                        tw.data(),
                        (kdim as isize, 1),
                        &gcols,
                        (grid as isize, 1),
                        T::ZERO,
                        &mut dx[n * cin * grid..(n + 1) * cin * grid],
                        (grid as isize, 1),
                    );
                }
                res.push((x, Tensor::from_vec(xs, dx).expect("shape")));
            }
            res
        }))
    }

    /// 2x2 stride-2 max pooling that records per-window argmax offsets.
    /// Ties break to the first element in row-major window order.
    pub fn maxpool2_indices(&mut self, x: Val) -> Result<(Val, PoolingIndices)> {
        let tx = self.value(x).clone();
        let s = tx.shape();
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::dimension(
                "maxpool2_indices",
                format!("spatial axes must be even, got {}x{}", s.h, s.w),
            ));
        }
        let ps = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
        let mut pooled = vec![T::ZERO; ps.numel()];
        let mut offsets = vec![0u8; ps.numel()];
        for nc in 0..s.n * s.c {
            let src = &tx.data()[nc * s.h * s.w..(nc + 1) * s.h * s.w];
            let dst = &mut pooled[nc * ps.h * ps.w..(nc + 1) * ps.h * ps.w];
            let offs = &mut offsets[nc * ps.h * ps.w..(nc + 1) * ps.h * ps.w];
            for i in 0..ps.h {
                for j in 0..ps.w {
                    let base = (2 * i) * s.w + 2 * j;
                    let window = [
                        src[base],
                        src[base + 1],
                        src[base + s.w],
                        src[base + s.w + 1],
                    ];
                    let mut best = 0usize;
                    for (k, &v) in window.iter().enumerate().skip(1) {
                        if v > window[best] {
                            best = k;
                        }
                    }
                    dst[i * ps.w + j] = window[best];
                    offs[i * ps.w + j] = best as u8;
                }
            }
        }
        let indices = PoolingIndices {
            input_shape: s,
            pooled_shape: ps,
            offsets: Arc::new(offsets),
        };
        let out = Tensor::from_vec(ps, pooled)?;
        let need = self.requires_grad(x);
        let back_idx = indices.clone();
        let val = self.record(out, need, move |g| {
            let mut dx = vec![T::ZERO; s.numel()];
            for n in 0..ps.n {
                for c in 0..ps.c {
                    for i in 0..ps.h {
                        for j in 0..ps.w {
                            dx[back_idx.source_index(n, c, i, j)] += g.at(n, c, i, j);
                        }
                    }
                }
            }
            vec![(x, Tensor::from_vec(s, dx).expect("shape"))]
        });
        Ok((val, indices))
    }

    /// Places each pooled value back at its recorded argmax position; every
    /// other position is exactly zero.
    pub fn maxunpool2(&mut self, y: Val, indices: &PoolingIndices, out_shape: Shape) -> Result<Val> {
        let ty = self.value(y).clone();
        if ty.shape() != indices.pooled_shape {
            return Err(Error::dimension(
                "maxunpool2",
                format!(
                    "input shape {} != recorded pooled shape {}",
                    ty.shape(),
                    indices.pooled_shape
                ),
            ));
        }
        if out_shape != indices.input_shape {
            return Err(Error::dimension(
                "maxunpool2",
                format!(
                    "requested output shape {out_shape} != recorded input shape {}",
                    indices.input_shape
                ),
            ));
        }
        let ps = indices.pooled_shape;
        let mut out = vec![T::ZERO; out_shape.numel()];
        for n in 0..ps.n {
            for c in 0..ps.c {
                for i in 0..ps.h {
                    for j in 0..ps.w {
                        out[indices.source_index(n, c, i, j)] = ty.at(n, c, i, j);
                    }
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        let need = self.requires_grad(y);
        let back_idx = indices.clone();
        Ok(self.record(out, need, move |g| {
            let mut dy = vec![T::ZERO; ps.numel()];
            for n in 0..ps.n {
                for c in 0..ps.c {
                    for i in 0..ps.h {
                        for j in 0..ps.w {
                            dy[ps.index(n, c, i, j)] = g.data()[back_idx.source_index(n, c, i, j)];
                        }
                    }
                }
            }
            vec![(y, Tensor::from_vec(ps, dy).expect("shape"))]
        }))
    }

    /// Batch normalization over `(batch, height, width)` per channel.
    ///
    /// Train mode normalizes by batch statistics and folds them into
    /// `running` with the given momentum; eval mode normalizes by the
    /// running statistics. Differentiable w.r.t. input, gamma and beta.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Val,
        gamma: Val,
        beta: Val,
        running: &mut BatchNormStats<T>,
        mode: Mode,
        eps: T,
        momentum: T,
    ) -> Result<Val> {
        let (tx, tg, tb) = (
            self.value(x).clone(),
            self.value(gamma).clone(),
            self.value(beta).clone(),
        );
        let s = tx.shape();
        let per_channel = Shape::new(1, s.c, 1, 1);
        if tg.shape() != per_channel || tb.shape() != per_channel {
            return Err(Error::dimension(
                "batchnorm",
                format!(
                    "gamma/beta must be 1x{}x1x1, got {} and {}",
                    s.c,
                    tg.shape(),
                    tb.shape()
                ),
            ));
        }
        if running.mean.len() != s.c {
            return Err(Error::dimension(
                "batchnorm",
                format!("running stats track {} channels, input has {}", running.mean.len(), s.c),
            ));
        }
        let m = (s.n * s.h * s.w) as f64;
        let hw = s.h * s.w;

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::ZERO; s.c];
                let mut var = vec![T::ZERO; s.c];
                for c in 0..s.c {
                    let mut acc = T::ZERO;
                    for n in 0..s.n {
                        let base = (n * s.c + c) * hw;
                        for &v in &tx.data()[base..base + hw] {
                            acc += v;
                        }
                    }
                    let mu = acc / T::from_f64(m);
                    let mut acc2 = T::ZERO;
                    for n in 0..s.n {
                        let base = (n * s.c + c) * hw;
                        for &v in &tx.data()[base..base + hw] {
                            let d = v - mu;
                            acc2 += d * d;
                        }
                    }
                    mean[c] = mu;
                    var[c] = acc2 / T::from_f64(m);
                }
                // Fold into running stats (unbiased variance, torch-style).
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for c in 0..s.c {
                    running.mean[c] = (T::ONE - momentum) * running.mean[c] + momentum * mean[c];
                    running.var[c] =
                        (T::ONE - momentum) * running.var[c] + momentum * var[c] * T::from_f64(unbias);
                }
                (mean, var)
            }
            Mode::Eval => (running.mean.clone(), running.var.clone()),
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::ZERO; s.numel()];
        let mut out = vec![T::ZERO; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * hw;
                let (mu, is, ga, be) = (mean[c], inv_std[c], tg.data()[c], tb.data()[c]);
                for k in 0..hw {
                    let xh = (tx.data()[base + k] - mu) * is;
                    xhat[base + k] = xh;
                    out[base + k] = ga * xh + be;
                }
            }
        }
        let xhat = Tensor::from_vec(s, xhat)?;
        let out = Tensor::from_vec(s, out)?;
        let (need_x, need_g, need_b) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let batch_stats = mode == Mode::Train;
        Ok(self.record(out, need_x || need_g || need_b, move |g| {
            let mut res = Vec::new();
            let mut sum_g = vec![T::ZERO; s.c];
            let mut sum_gx = vec![T::ZERO; s.c];
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = (n * s.c + c) * hw;
                    let mut a = T::ZERO;
                    let mut b2 = T::ZERO;
                    for k in 0..hw {
                        let gv = g.data()[base + k];
                        a += gv;
                        b2 += gv * xhat.data()[base + k];
                    }
                    sum_g[c] += a;
                    sum_gx[c] += b2;
                }
            }
            if need_b {
                res.push((
                    beta,
                    Tensor::from_vec(per_channel, sum_g.clone()).expect("shape"),
                ));
            }
            if need_g {
                res.push((
                    gamma,
                    Tensor::from_vec(per_channel, sum_gx.clone()).expect("shape"),
                ));
            }
            if need_x {
                let mut dx = vec![T::ZERO; s.numel()];
                let inv_m = T::ONE / T::from_f64(m);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * hw;
                        let k_scale = tg.data()[c] * inv_std[c];
                        if batch_stats {
                            let mg = sum_g[c] * inv_m;
                            let mgx = sum_gx[c] * inv_m;
                            for k in 0..hw {
                                let gv = g.data()[base + k];
                                let xh = xhat.data()[base + k];
                                dx[base + k] = k_scale * (gv - mg - xh * mgx);
                            }
                        } else {
                            for k in 0..hw {
                                dx[base + k] = k_scale * g.data()[base + k];
                            }
                        }
                    }
                }
                res.push((x, Tensor::from_vec(s, dx).expect("shape")));
            }
            res
        }))
    }

    /// Adds zero-mean Gaussian noise with the given standard deviation.
    /// Identity when `sigma == 0`; the gradient passes through unchanged.
    pub fn add_gaussian_noise<R: Rng>(&mut self, x: Val, sigma: f64, rng: &mut R) -> Result<Val> {
        if sigma < 0.0 {
            return Err(Error::parameter(
                "sigma",
                format!("noise stddev must be >= 0, got {sigma}"),
            ));
        }
        let tx = self.value(x).clone();
        let need = self.requires_grad(x);
        let out = if sigma == 0.0 {
            tx
        } else {
            let data = tx
                .iter()
                .map(|&v| {
                    let eps: f64 = StandardNormal.sample(rng);
                    v + T::from_f64(eps * sigma)
                })
                .collect::<Vec<_>>();
            Tensor::from_vec(tx.shape(), data)?
        };
        Ok(self.record(out, need, move |g| vec![(x, g.clone())]))
    }
}

/// Running first/second moments for a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T: Elem> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Elem> BatchNormStats<T> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
        }
    }
}

/// Per-pixel channel argmax of a `(n, c, h, w)` tensor, as class ids.
pub fn argmax_channels<T: Elem>(t: &Tensor<T>) -> ClassMap {
    let s = t.shape();
    let mut data = vec![0u8; s.n * s.h * s.w];
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                let mut best = 0usize;
                let mut best_v = t.at(n, 0, h, w);
                for c in 1..s.c {
                    let v = t.at(n, c, h, w);
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                data[(n * s.h + h) * s.w + w] = best as u8;
            }
        }
    }
    ClassMap {
        n: s.n,
        h: s.h,
        w: s.w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor4<T: Elem>(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Tensor<T> {
        Tensor::from_vec(Shape::new(n, c, h, w), data).unwrap()
    }

    #[test]
    fn conv2d_all_ones_center_is_nine() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let w = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(tape.value(y).at(0, 0, 1, 1), 9.0);
        // Corner sees a 2x2 valid patch.
        assert_eq!(tape.value(y).at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn conv2d_1x1_kernel_scales() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(tensor4(1, 1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let w = tape.constant(tensor4(1, 1, 1, 1, vec![2.0]));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv2d_shape_and_channel_mismatch() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(2, 3, 8, 8)));
        let w = tape.constant(Tensor::zeros(Shape::new(4, 3, 3, 3)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(2, 4, 8, 8));

        let w_bad = tape.constant(Tensor::zeros(Shape::new(4, 2, 3, 3)));
        let err = tape.conv2d(x, w_bad, b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel axis"));
    }

    #[test]
    fn conv2d_transpose_spreads_single_tap() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(tensor4(1, 1, 1, 1, vec![1.0]));
        let w = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv2d_transpose(x, w, b, 2, 0, 0).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv2d_transpose_doubles_spatial_extent() {
        // Decoder-direction shape contract: 8x8 -> 16x16 with k5 s2 p2 op1.
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(6, 512, 8, 8)));
        let w = tape.constant(Tensor::zeros(Shape::new(512, 4, 5, 5)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let y = tape.conv2d_transpose(x, w, b, 2, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(6, 4, 16, 16));
    }

    #[test]
    fn maxpool_unique_max_and_tie_break() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let (y, idx) = tape.maxpool2_indices(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        assert_eq!(idx.offsets(), &[3]);

        let t = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), 5.0));
        let (y2, idx2) = tape.maxpool2_indices(t).unwrap();
        assert_eq!(tape.value(y2).data(), &[5.0]);
        assert_eq!(idx2.offsets(), &[0], "tie breaks to first in scan order");
    }

    #[test]
    fn maxpool_ramp_matches_hand_enumeration() {
        // Hand oracle: enumerate each 2x2 window of the 4x4 ramp 0..16.
        let ramp: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let mut expected_vals = Vec::new();
        let mut expected_offs = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                let window = [
                    ramp[(2 * i) * 4 + 2 * j],
                    ramp[(2 * i) * 4 + 2 * j + 1],
                    ramp[(2 * i + 1) * 4 + 2 * j],
                    ramp[(2 * i + 1) * 4 + 2 * j + 1],
                ];
                let (best, &v) = window
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap();
                expected_vals.push(v);
                expected_offs.push(best as u8);
            }
        }
        assert_eq!(expected_vals, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(expected_offs, vec![3, 3, 3, 3]);

        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(tensor4(1, 1, 4, 4, ramp));
        let (y, idx) = tape.maxpool2_indices(x).unwrap();
        assert_eq!(tape.value(y).data(), expected_vals.as_slice());
        assert_eq!(idx.offsets(), expected_offs.as_slice());
    }

    #[test]
    fn maxpool_rejects_odd_spatial() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 3, 4)));
        assert!(tape.maxpool2_indices(x).is_err());
    }

    #[test]
    fn unpool_places_value_and_zeroes_rest() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let (y, idx) = tape.maxpool2_indices(x).unwrap();
        let u = tape.maxunpool2(y, &idx, Shape::new(1, 1, 2, 2)).unwrap();
        assert_eq!(tape.value(u).data(), &[0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn pool_unpool_pool_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(tensor4(2, 3, 4, 4, data));
        let (p1, i1) = tape.maxpool2_indices(x).unwrap();
        let u = tape.maxunpool2(p1, &i1, Shape::new(2, 3, 4, 4)).unwrap();
        let (p2, i2) = tape.maxpool2_indices(u).unwrap();
        assert_eq!(tape.value(p1).data(), tape.value(p2).data());
        assert_eq!(i1.offsets(), i2.offsets());
    }

    #[test]
    fn unpool_of_zeros_is_zeros() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 2, 4, 4), 1.0));
        let (_, idx) = tape.maxpool2_indices(x).unwrap();
        let z = tape.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let u = tape.maxunpool2(z, &idx, Shape::new(1, 2, 4, 4)).unwrap();
        assert!(tape.value(u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unpool_shape_inconsistency_errors() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        let (y, idx) = tape.maxpool2_indices(x).unwrap();
        assert!(tape.maxunpool2(y, &idx, Shape::new(1, 1, 8, 8)).is_err());
        let bad = tape.constant(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        assert!(tape.maxunpool2(bad, &idx, Shape::new(1, 1, 4, 4)).is_err());
    }

    #[test]
    fn batchnorm_constant_channel_outputs_beta() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(4, 2, 3, 3), 7.5));
        let gamma = tape.constant(Tensor::full(Shape::new(1, 2, 1, 1), 1.0));
        let beta = tape.constant(Tensor::full(Shape::new(1, 2, 1, 1), 0.25));
        let mut stats = BatchNormStats::new(2);
        let y = tape
            .batchnorm(x, gamma, beta, &mut stats, Mode::Train, 1e-5, 0.1)
            .unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_normalizes_standard_normal_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape::new(64, 2, 8, 8);
        let data: Vec<f32> = (0..shape.numel())
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                (v * 1.7 + 0.4) as f32
            })
            .collect();
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::from_vec(shape, data).unwrap());
        let gamma = tape.constant(Tensor::full(Shape::new(1, 2, 1, 1), 1.0));
        let beta = tape.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let mut stats = BatchNormStats::new(2);
        let y = tape
            .batchnorm(x, gamma, beta, &mut stats, Mode::Train, 1e-5, 0.1)
            .unwrap();
        let out = tape.value(y);
        let n = out.numel() as f64;
        let mean: f64 = out.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn relu_and_leaky_relu_pointwise() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(tensor4(1, 1, 1, 2, vec![-1.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let l = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(l).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn gaussian_noise_contracts() {
        let shape = Shape::new(1, 1, 10, 10);
        let base = Tensor::full(shape, 0.5);
        // sigma = 0 is bit-identical.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(base.clone());
        let y = tape.add_gaussian_noise(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), base.data());
        // Fixed seed reproduces.
        let sample = |seed: u64| -> Vec<f32> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.constant(base.clone());
            let y = tape.add_gaussian_noise(x, 0.5, &mut rng).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(sample(42), sample(42));
        assert_ne!(sample(42), sample(43));
        // Negative sigma rejected.
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(base);
        assert!(tape.add_gaussian_noise(x, -0.1, &mut rng).is_err());
    }

    #[test]
    fn gaussian_noise_sample_stddev() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let shape = Shape::new(1, 1, 1000, 1000);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(shape));
        let y = tape.add_gaussian_noise(x, 0.5, &mut rng).unwrap();
        let out = tape.value(y);
        let n = out.numel() as f64;
        let mean: f64 = out.iter().sum::<f64>() / n;
        let std = (out.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(std > 0.497 && std < 0.503, "sample std {std}");
    }

    #[test]
    fn gaussian_noise_gradient_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 0.3));
        let y = tape.add_gaussian_noise(x, 0.5, &mut rng).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn argmax_channels_picks_largest() {
        let t = tensor4(1, 3, 1, 2, vec![0.1, 0.9, 0.5, 0.2, 0.3, 0.1]);
        let m = argmax_channels(&t);
        assert_eq!(m.data, vec![1, 0]);
    }

    #[test]
    fn upsample_nearest_doubles() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(tensor4(1, 1, 1, 2, vec![1.0, 2.0]));
        let y = tape.upsample_nearest2(x);
        assert_eq!(tape.value(y).shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn gradient_accumulates_for_shared_input() {
        // y = x*x + x: dy/dx = 2x + 1; x used on three paths.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 7.0);
    }
}
