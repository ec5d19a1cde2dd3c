//! 2-d convolution family and nearest-neighbour resampling.
//!
//! `conv2d`, `conv2d_input_grad` and `conv2d_weight_grad` are the three
//! partial maps of one bilinear form, so each one's backward pass is written
//! in terms of the other two. That keeps the family closed under
//! differentiation, which higher-order gradients (gradient penalties) need.

use crate::scalar::{with_scratch, Scalar};
use crate::tensor::Tensor;

/// Stride and symmetric zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        assert!(stride >= 1, "stride must be positive");
        ConvGeometry { stride, padding }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        let padded = input + 2 * self.padding;
        assert!(
            padded >= kernel,
            "kernel {kernel} larger than padded input {padded}"
        );
        (padded - kernel) / self.stride + 1
    }
}

struct Layout {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
}

impl Layout {
    fn new(x_shape: &[usize], w_shape: &[usize], geom: ConvGeometry) -> Layout {
        assert_eq!(x_shape.len(), 4, "conv input must be [N, C, H, W]");
        assert_eq!(w_shape.len(), 4, "conv weight must be [O, C, kh, kw]");
        assert_eq!(
            x_shape[1], w_shape[1],
            "conv channel mismatch: input {:?}, weight {:?}",
            x_shape, w_shape
        );
        let (kh, kw) = (w_shape[2], w_shape[3]);
        Layout {
            n: x_shape[0],
            c: x_shape[1],
            h: x_shape[2],
            w: x_shape[3],
            o: w_shape[0],
            kh,
            kw,
            ho: geom.output_size(x_shape[2], kh),
            wo: geom.output_size(x_shape[3], kw),
            geom,
        }
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * s + kj - p` lies
    /// inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
        let hi = if self.w + p > kj {
            ((self.w - 1 + p - kj) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Input row read by output row `oy` at kernel row `ki`, if any.
    fn input_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.geom.stride + ki).checked_sub(self.geom.padding)?;
        (iy < self.h).then_some(iy)
    }

    /// Unfolds one sample `[C, H, W]` into `[C*kh*kw, Ho*Wo]`.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        let hw = self.spatial_out();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kj);
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let Some(iy) = self.input_row(oy, ki) else {
                            line.fill(T::zero());
                            continue;
                        };
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo < hi {
                            let first = lo * s + kj - p;
                            if s == 1 {
                                line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (v, &x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                    *v = x;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Folds `[C*kh*kw, Ho*Wo]` back into one sample, accumulating overlaps.
    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        let hw = self.spatial_out();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kj);
                    let src = &cols[row * hw..(row + 1) * hw];
                    row += 1;
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * s + kj - p;
                    for oy in 0..self.ho {
                        let Some(iy) = self.input_row(oy, ki) else {
                            continue;
                        };
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let line = &src[oy * self.wo + lo..oy * self.wo + hi];
                        for (d, &v) in dst[first..].iter_mut().step_by(s).zip(line) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Below this many output channels the im2col + gemm route is memory bound
/// and shifted row loops are faster.
const DIRECT_MAX_OUT: usize = 8;

impl Layout {
    fn use_direct(&self) -> bool {
        self.o < DIRECT_MAX_OUT && !self.is_pointwise()
    }

    /// Calls `f(oy, iy, lo, hi, first)` for every output row `oy` whose
    /// input row `iy` at kernel offset `(ki, kj)` exists; output columns
    /// `lo..hi` read input columns `first, first + stride, ...`.
    fn for_rows(&self, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (lo, hi) = self.valid_cols(kj);
        if lo >= hi {
            return;
        }
        let first = lo * self.geom.stride + kj - self.geom.padding;
        for oy in 0..self.ho {
            if let Some(iy) = self.input_row(oy, ki) {
                f(oy, iy, lo, hi, first);
            }
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = *d + a * v;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] = lanes[k] + x[k] * y[k];
        }
    }
    let tail = ra.iter().zip(rb).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    lanes.iter().fold(tail, |acc, &v| acc + v)
}

/// Stride-1 direct convolution on zero-padded planes: with the output laid
/// out at the padded width `wp`, each kernel tap becomes a single long axpy
/// (or dot product) over the whole plane. Columns `wo..wp` of a wide row
/// are scratch and get discarded.
struct Wide {
    hp: usize,
    wp: usize,
    /// Length of the wide output that covers every valid position.
    span: usize,
}

impl Layout {
    fn wide(&self) -> Wide {
        let (hp, wp) = (self.h + 2 * self.geom.padding, self.w + 2 * self.geom.padding);
        Wide {
            hp,
            wp,
            span: (self.ho - 1) * wp + self.wo,
        }
    }

    fn pad_plane<T: Scalar>(&self, plane: &[T], wd: &Wide) -> Vec<T> {
        let p = self.geom.padding;
        let mut out = vec![T::zero(); wd.hp * wd.wp];
        for y in 0..self.h {
            out[(y + p) * wd.wp + p..(y + p) * wd.wp + p + self.w].copy_from_slice(&plane[y * self.w..(y + 1) * self.w]);
        }
        out
    }
}

fn wide_forward<T: Scalar>(x: &[T], w: &[T], l: &Layout) -> Vec<T> {
    let (hw, kk, wd) = (l.spatial_out(), l.kh * l.kw, l.wide());
    let mut out = vec![T::zero(); l.n * l.o * hw];
    let mut acc = vec![T::zero(); l.o * wd.span];
    for n in 0..l.n {
        acc.fill(T::zero());
        for c in 0..l.c {
            let padded = l.pad_plane(&x[(n * l.c + c) * l.h * l.w..(n * l.c + c + 1) * l.h * l.w], &wd);
            for o in 0..l.o {
                let dst = &mut acc[o * wd.span..(o + 1) * wd.span];
                for ki in 0..l.kh {
                    for kj in 0..l.kw {
                        let start = ki * wd.wp + kj;
                        axpy(dst, w[(o * l.c + c) * kk + ki * l.kw + kj], &padded[start..start + wd.span]);
                    }
                }
            }
        }
        for o in 0..l.o {
            let src = &acc[o * wd.span..(o + 1) * wd.span];
            let dst = &mut out[(n * l.o + o) * hw..(n * l.o + o + 1) * hw];
            for oy in 0..l.ho {
                dst[oy * l.wo..(oy + 1) * l.wo].copy_from_slice(&src[oy * wd.wp..oy * wd.wp + l.wo]);
            }
        }
    }
    out
}

/// Upstream plane `[Ho, Wo]` spread to the wide layout, zeros elsewhere.
fn widen<T: Scalar>(g: &[T], l: &Layout, wd: &Wide) -> Vec<T> {
    let mut out = vec![T::zero(); wd.span];
    for oy in 0..l.ho {
        out[oy * wd.wp..oy * wd.wp + l.wo].copy_from_slice(&g[oy * l.wo..(oy + 1) * l.wo]);
    }
    out
}

fn wide_input_grad<T: Scalar>(g: &[T], w: &[T], l: &Layout) -> Vec<T> {
    let (hw, kk, wd) = (l.spatial_out(), l.kh * l.kw, l.wide());
    let p = l.geom.padding;
    let mut dx = vec![T::zero(); l.n * l.c * l.h * l.w];
    let mut padded = vec![T::zero(); wd.hp * wd.wp];
    for n in 0..l.n {
        let wide_g: Vec<Vec<T>> = (0..l.o)
            .map(|o| widen(&g[(n * l.o + o) * hw..(n * l.o + o + 1) * hw], l, &wd))
            .collect();
        for c in 0..l.c {
            padded.fill(T::zero());
            for (o, gw) in wide_g.iter().enumerate() {
                for ki in 0..l.kh {
                    for kj in 0..l.kw {
                        let start = ki * wd.wp + kj;
                        axpy(&mut padded[start..start + wd.span], w[(o * l.c + c) * kk + ki * l.kw + kj], gw);
                    }
                }
            }
            let plane = &mut dx[(n * l.c + c) * l.h * l.w..(n * l.c + c + 1) * l.h * l.w];
            for y in 0..l.h {
                plane[y * l.w..(y + 1) * l.w].copy_from_slice(&padded[(y + p) * wd.wp + p..(y + p) * wd.wp + p + l.w]);
            }
        }
    }
    dx
}

fn wide_weight_grad<T: Scalar>(x: &[T], g: &[T], l: &Layout) -> Vec<T> {
    let (hw, kk, wd) = (l.spatial_out(), l.kh * l.kw, l.wide());
    let mut dw = vec![T::zero(); l.o * l.c * kk];
    for n in 0..l.n {
        let wide_g: Vec<Vec<T>> = (0..l.o)
            .map(|o| widen(&g[(n * l.o + o) * hw..(n * l.o + o + 1) * hw], l, &wd))
            .collect();
        for c in 0..l.c {
            let padded = l.pad_plane(&x[(n * l.c + c) * l.h * l.w..(n * l.c + c + 1) * l.h * l.w], &wd);
            for (o, gw) in wide_g.iter().enumerate() {
                for ki in 0..l.kh {
                    for kj in 0..l.kw {
                        let start = ki * wd.wp + kj;
                        let slot = &mut dw[(o * l.c + c) * kk + ki * l.kw + kj];
                        *slot = *slot + dot(gw, &padded[start..start + wd.span]);
                    }
                }
            }
        }
    }
    dw
}

fn direct_forward<T: Scalar>(x: &[T], w: &[T], l: &Layout) -> Vec<T> {
    let (s, hw, kk) = (l.geom.stride, l.spatial_out(), l.kh * l.kw);
    let mut out = vec![T::zero(); l.n * l.o * hw];
    for n in 0..l.n {
        for o in 0..l.o {
            let dst = &mut out[(n * l.o + o) * hw..(n * l.o + o + 1) * hw];
            for c in 0..l.c {
                let plane = &x[(n * l.c + c) * l.h * l.w..(n * l.c + c + 1) * l.h * l.w];
                for ki in 0..l.kh {
                    for kj in 0..l.kw {
                        let wv = w[(o * l.c + c) * kk + ki * l.kw + kj];
                        l.for_rows(ki, kj, |oy, iy, lo, hi, first| {
                            let d = &mut dst[oy * l.wo + lo..oy * l.wo + hi];
                            let src = &plane[iy * l.w + first..];
                            if s == 1 {
                                axpy(d, wv, &src[..d.len()]);
                            } else {
                                for (d, &v) in d.iter_mut().zip(src.iter().step_by(s)) {
                                    *d = *d + wv * v;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

fn direct_input_grad<T: Scalar>(g: &[T], w: &[T], l: &Layout) -> Vec<T> {
    let (s, hw, kk) = (l.geom.stride, l.spatial_out(), l.kh * l.kw);
    let mut dx = vec![T::zero(); l.n * l.c * l.h * l.w];
    for n in 0..l.n {
        for c in 0..l.c {
            let plane = &mut dx[(n * l.c + c) * l.h * l.w..(n * l.c + c + 1) * l.h * l.w];
            for o in 0..l.o {
                let gp = &g[(n * l.o + o) * hw..(n * l.o + o + 1) * hw];
                for ki in 0..l.kh {
                    for kj in 0..l.kw {
                        let wv = w[(o * l.c + c) * kk + ki * l.kw + kj];
                        l.for_rows(ki, kj, |oy, iy, lo, hi, first| {
                            let src = &gp[oy * l.wo + lo..oy * l.wo + hi];
                            let dst = &mut plane[iy * l.w + first..];
                            if s == 1 {
                                axpy(&mut dst[..src.len()], wv, src);
                            } else {
                                for (d, &v) in dst.iter_mut().step_by(s).zip(src) {
                                    *d = *d + wv * v;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    dx
}

fn direct_weight_grad<T: Scalar>(x: &[T], g: &[T], l: &Layout) -> Vec<T> {
    let (s, hw, kk) = (l.geom.stride, l.spatial_out(), l.kh * l.kw);
    let mut dw = vec![T::zero(); l.o * l.c * kk];
    for n in 0..l.n {
        for o in 0..l.o {
            let gp = &g[(n * l.o + o) * hw..(n * l.o + o + 1) * hw];
            for c in 0..l.c {
                let plane = &x[(n * l.c + c) * l.h * l.w..(n * l.c + c + 1) * l.h * l.w];
                for ki in 0..l.kh {
                    for kj in 0..l.kw {
                        let mut acc = T::zero();
                        l.for_rows(ki, kj, |oy, iy, lo, hi, first| {
                            let gr = &gp[oy * l.wo + lo..oy * l.wo + hi];
                            let src = &plane[iy * l.w + first..];
                            acc = acc
                                + if s == 1 {
                                    dot(gr, &src[..gr.len()])
                                } else {
                                    gr.iter()
                                        .zip(src.iter().step_by(s))
                                        .fold(T::zero(), |a, (&gv, &xv)| a + gv * xv)
                                };
                        });
                        let slot = &mut dw[(o * l.c + c) * kk + ki * l.kw + kj];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    }
    dw
}

/// Allocates `len` elements and lets `fill` initialise all of them through
/// `gemm` calls with `beta = 0`, which never read the destination.
fn gemm_output<T: Scalar>(len: usize, fill: impl FnOnce(*mut T)) -> Vec<T> {
    let mut out = Vec::with_capacity(len);
    fill(out.as_mut_ptr());
    // SAFETY: every caller writes all `len` elements in `fill`
    unsafe { out.set_len(len) };
    out
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, l: &Layout) -> Vec<T> {
    if l.use_direct() && l.geom.stride == 1 {
        return wide_forward(&x.data, &w.data, l);
    }
    if l.use_direct() {
        return direct_forward(&x.data, &w.data, l);
    }
    let (ckk, hw) = (l.ckk(), l.spatial_out());
    let x_block = l.c * l.h * l.w;
    let scratch_len = if l.is_pointwise() { 0 } else { ckk * hw };
    with_scratch(scratch_len, |cols: &mut [T]| {
        gemm_output(l.n * l.o * hw, |out: *mut T| {
            for n in 0..l.n {
                let xs = &x.data[n * x_block..(n + 1) * x_block];
                let b: &[T] = if l.is_pointwise() {
                    xs
                } else {
                    l.im2col(xs, cols);
                    cols
                };
                // SAFETY: W is [O, ckk], cols is [ckk, hw], the output block
                // of sample n is [O, hw] and lies inside `out`
                unsafe {
                    T::gemm(
                        l.o,
                        ckk,
                        hw,
                        T::one(),
                        w.data.as_ptr(),
                        ckk as isize,
                        1,
                        b.as_ptr(),
                        hw as isize,
                        1,
                        T::zero(),
                        out.add(n * l.o * hw),
                        hw as isize,
                        1,
                    );
                }
            }
        })
    })
}

fn conv_input_grad_values<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>, l: &Layout) -> Vec<T> {
    if l.use_direct() && l.geom.stride == 1 {
        return wide_input_grad(&g.data, &w.data, l);
    }
    if l.use_direct() {
        return direct_input_grad(&g.data, &w.data, l);
    }
    let (ckk, hw) = (l.ckk(), l.spatial_out());
    let x_block = l.c * l.h * l.w;
    if l.is_pointwise() {
        return gemm_output(l.n * x_block, |dx: *mut T| {
            for n in 0..l.n {
                let gs = &g.data[n * l.o * hw..(n + 1) * l.o * hw];
                // SAFETY: dx block n = W^T [C, O] @ g_n [O, hw]
                unsafe {
                    T::gemm(
                        ckk,
                        l.o,
                        hw,
                        T::one(),
                        w.data.as_ptr(),
                        1,
                        ckk as isize,
                        gs.as_ptr(),
                        hw as isize,
                        1,
                        T::zero(),
                        dx.add(n * x_block),
                        hw as isize,
                        1,
                    );
                }
            }
        });
    }
    let mut dx = vec![T::zero(); l.n * x_block];
    with_scratch(ckk * hw, |dcols: &mut [T]| {
        for n in 0..l.n {
            let gs = &g.data[n * l.o * hw..(n + 1) * l.o * hw];
            // SAFETY: dcols = W^T [ckk, O] @ g_n [O, hw]
            unsafe {
                T::gemm(
                    ckk,
                    l.o,
                    hw,
                    T::one(),
                    w.data.as_ptr(),
                    1,
                    ckk as isize,
                    gs.as_ptr(),
                    hw as isize,
                    1,
                    T::zero(),
                    dcols.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            l.col2im(dcols, &mut dx[n * x_block..(n + 1) * x_block]);
        }
    });
    dx
}

fn conv_weight_grad_values<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, l: &Layout) -> Vec<T> {
    if l.use_direct() && l.geom.stride == 1 {
        return wide_weight_grad(&x.data, &g.data, l);
    }
    if l.use_direct() {
        return direct_weight_grad(&x.data, &g.data, l);
    }
    let (ckk, hw) = (l.ckk(), l.spatial_out());
    if l.n == 0 {
        return vec![T::zero(); l.o * ckk];
    }
    let x_block = l.c * l.h * l.w;
    let scratch_len = if l.is_pointwise() { 0 } else { ckk * hw };
    with_scratch(scratch_len, |cols: &mut [T]| {
        gemm_output(l.o * ckk, |dw: *mut T| {
            for n in 0..l.n {
                let xs = &x.data[n * x_block..(n + 1) * x_block];
                let b: &[T] = if l.is_pointwise() {
                    xs
                } else {
                    l.im2col(xs, cols);
                    cols
                };
                let gs = &g.data[n * l.o * hw..(n + 1) * l.o * hw];
                // the first sample initialises dw, later ones accumulate
                let beta = if n == 0 { T::zero() } else { T::one() };
                // SAFETY: dw [O, ckk] += g_n [O, hw] @ cols^T [hw, ckk]
                unsafe {
                    T::gemm(
                        l.o,
                        hw,
                        ckk,
                        T::one(),
                        gs.as_ptr(),
                        hw as isize,
                        1,
                        b.as_ptr(),
                        1,
                        hw as isize,
                        beta,
                        dw,
                        ckk as isize,
                        1,
                    );
                }
            }
        })
    })
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlation of `[N, C, H, W]` with weights `[O, C, kh, kw]`.
    pub fn conv2d(&self, weight: &Tensor<T>, geom: ConvGeometry) -> Tensor<T> {
        let l = Layout::new(&self.shape, &weight.shape, geom);
        let data = conv_forward(self, weight, &l);
        let (x, w) = (self.clone(), weight.clone());
        Tensor::from_op(
            data,
            vec![l.n, l.o, l.ho, l.wo],
            "conv2d",
            vec![self.clone(), weight.clone()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.conv2d_input_grad(&w, &x.shape, geom)),
                    need[1].then(|| x.conv2d_weight_grad(g, &w.shape, geom)),
                ]
            }),
        )
    }

    /// Gradient of `<conv2d(x, w), self>` with respect to `x` (a transposed
    /// convolution of `self` by `weight`). `input_shape` is the shape of `x`.
    pub fn conv2d_input_grad(
        &self,
        weight: &Tensor<T>,
        input_shape: &[usize],
        geom: ConvGeometry,
    ) -> Tensor<T> {
        let l = Layout::new(input_shape, &weight.shape, geom);
        assert_eq!(
            self.shape,
            vec![l.n, l.o, l.ho, l.wo],
            "conv2d_input_grad: upstream shape does not match geometry"
        );
        let data = conv_input_grad_values(self, weight, &l);
        let (g, w) = (self.clone(), weight.clone());
        Tensor::from_op(
            data,
            input_shape.to_vec(),
            "conv2d_input_grad",
            vec![self.clone(), weight.clone()],
            Box::new(move |gu, need| {
                vec![
                    need[0].then(|| gu.conv2d(&w, geom)),
                    need[1].then(|| gu.conv2d_weight_grad(&g, &w.shape, geom)),
                ]
            }),
        )
    }

    /// Gradient of `<conv2d(self, w), upstream>` with respect to `w`.
    pub fn conv2d_weight_grad(
        &self,
        upstream: &Tensor<T>,
        weight_shape: &[usize],
        geom: ConvGeometry,
    ) -> Tensor<T> {
        let l = Layout::new(&self.shape, weight_shape, geom);
        assert_eq!(
            upstream.shape,
            vec![l.n, l.o, l.ho, l.wo],
            "conv2d_weight_grad: upstream shape does not match geometry"
        );
        let data = conv_weight_grad_values(self, upstream, &l);
        let (x, g) = (self.clone(), upstream.clone());
        Tensor::from_op(
            data,
            weight_shape.to_vec(),
            "conv2d_weight_grad",
            vec![self.clone(), upstream.clone()],
            Box::new(move |gv, need| {
                vec![
                    need[0].then(|| g.conv2d_input_grad(gv, &x.shape, geom)),
                    need[1].then(|| x.conv2d(gv, geom)),
                ]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample_nearest2x(&self) -> Tensor<T> {
        assert_eq!(self.ndim(), 4, "upsample expects [N, C, H, W]");
        let (nc, h, w) = (self.shape[0] * self.shape[1], self.shape[2], self.shape[3]);
        let mut data = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        Tensor::from_op(
            data,
            vec![self.shape[0], self.shape[1], 2 * h, 2 * w],
            "upsample_nearest2x",
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.sum_pool2x2())]),
        )
    }

    /// Sums non-overlapping 2x2 windows; spatial extents must be even.
    pub fn sum_pool2x2(&self) -> Tensor<T> {
        assert_eq!(self.ndim(), 4, "sum_pool2x2 expects [N, C, H, W]");
        let (nc, h, w) = (self.shape[0] * self.shape[1], self.shape[2], self.shape[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2x2 needs even extents");
        let (ho, wo) = (h / 2, w / 2);
        let mut data = vec![T::zero(); nc * ho * wo];
        for p in 0..nc {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..h {
                for x in 0..w {
                    let d = &mut dst[(y / 2) * wo + x / 2];
                    *d = *d + src[y * w + x];
                }
            }
        }
        Tensor::from_op(
            data,
            vec![self.shape[0], self.shape[1], ho, wo],
            "sum_pool2x2",
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.upsample_nearest2x())]),
        )
    }

    /// Mean over non-overlapping 2x2 windows.
    pub fn avg_pool2x2(&self) -> Tensor<T> {
        self.sum_pool2x2().mul_scalar(0.25)
    }
}
