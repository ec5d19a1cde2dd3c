use std::sync::Arc;

use crate::scalar::{matmul_into, Scalar};
use crate::strided::{broadcast_shape, broadcast_strides, walk, walk_rows};
use crate::tensor::{contiguous_strides, numel_of, Tensor};

fn reduce_shape_ok(src: &[usize], target: &[usize]) -> bool {
    if target.len() > src.len() {
        return false;
    }
    let off = src.len() - target.len();
    target
        .iter()
        .enumerate()
        .all(|(i, &t)| t == src[i + off] || t == 1)
}

impl<T: Scalar> Tensor<T> {
    fn binary_values(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> (Vec<T>, Vec<usize>) {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return (data, self.shape.clone());
        }
        let out = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!(
                "cannot broadcast shapes {:?} and {:?}",
                self.shape, other.shape
            )
        });
        let so = contiguous_strides(&out);
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let mut data = vec![T::zero(); numel_of(&out)];
        let (a, b) = (&self.data, &other.data);
        walk_rows(&out, [&so, &sa, &sb], |[o, i, j], n, [_, si, sj]| {
            let dst = &mut data[o..o + n];
            match (si, sj) {
                (1, 1) => {
                    for ((d, &x), &y) in dst.iter_mut().zip(&a[i..i + n]).zip(&b[j..j + n]) {
                        *d = f(x, y);
                    }
                }
                (1, 0) => {
                    let y = b[j];
                    for (d, &x) in dst.iter_mut().zip(&a[i..i + n]) {
                        *d = f(x, y);
                    }
                }
                (0, 1) => {
                    let x = a[i];
                    for (d, &y) in dst.iter_mut().zip(&b[j..j + n]) {
                        *d = f(x, y);
                    }
                }
                _ => {
                    for (k, d) in dst.iter_mut().enumerate() {
                        *d = f(a[i + k * si], b[j + k * sj]);
                    }
                }
            }
        });
        (data, out)
    }

    fn map_values(&self, f: impl Fn(T) -> T) -> Vec<T> {
        self.data.iter().map(|&v| f(v)).collect()
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        let (data, shape) = self.binary_values(other, |a, b| a + b);
        let (sa, sb) = (self.shape.clone(), other.shape.clone());
        Tensor::from_op(
            data,
            shape,
            "add",
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.sum_to(&sa)),
                    need[1].then(|| g.sum_to(&sb)),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        let (data, shape) = self.binary_values(other, |a, b| a - b);
        let (sa, sb) = (self.shape.clone(), other.shape.clone());
        Tensor::from_op(
            data,
            shape,
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.sum_to(&sa)),
                    need[1].then(|| g.neg().sum_to(&sb)),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (data, shape) = self.binary_values(other, |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            shape,
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.mul(&b).sum_to(&a.shape)),
                    need[1].then(|| g.mul(&a).sum_to(&b.shape)),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        let (data, shape) = self.binary_values(other, |a, b| a / b);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            shape,
            "div",
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.div(&b).sum_to(&a.shape)),
                    need[1].then(|| g.mul(&a).div(&b.mul(&b)).neg().sum_to(&b.shape)),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        Tensor::from_op(
            self.map_values(|v| -v),
            self.shape.clone(),
            "neg",
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.neg())]),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let cv = T::from_f64_lossy(c);
        Tensor::from_op(
            self.map_values(|v| v * cv),
            self.shape.clone(),
            "mul_scalar",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.mul_scalar(c))]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let cv = T::from_f64_lossy(c);
        Tensor::from_op(
            self.map_values(|v| v + cv),
            self.shape.clone(),
            "add_scalar",
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    pub fn square(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::from_op(
            self.map_values(|v| v * v),
            self.shape.clone(),
            "square",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.mul(&x).mul_scalar(2.0))]),
        )
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::from_op(
            self.map_values(|v| v.sqrt()),
            self.shape.clone(),
            "sqrt",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.div(&x.sqrt()).mul_scalar(0.5))]),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::from_op(
            self.map_values(|v| v.tanh()),
            self.shape.clone(),
            "tanh",
            vec![self.clone()],
            Box::new(move |g, _| {
                let t = x.tanh();
                vec![Some(g.sub(&g.mul(&t.square())))]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::from_op(
            self.map_values(|v| v.exp()),
            self.shape.clone(),
            "exp",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.mul(&x.exp()))]),
        )
    }

    pub fn ln(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::from_op(
            self.map_values(|v| v.ln()),
            self.shape.clone(),
            "ln",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.div(&x))]),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::from_op(
            self.map_values(sigmoid),
            self.shape.clone(),
            "sigmoid",
            vec![self.clone()],
            Box::new(move |g, _| {
                let s = x.sigmoid();
                vec![Some(g.mul(&s).mul(&s.neg().add_scalar(1.0)))]
            }),
        )
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::from_op(
            self.map_values(|v| {
                if v > T::zero() {
                    v + (-v).exp().ln_1p()
                } else {
                    v.exp().ln_1p()
                }
            }),
            self.shape.clone(),
            "softplus",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.mul(&x.sigmoid()))]),
        )
    }

    /// Multiplies by a gradient-free mask derived from `self`.
    fn masked_by(&self, g: &Tensor<T>, mask: impl Fn(T) -> T) -> Tensor<T> {
        g.mul(&Tensor::constant(self.map_values(mask), self.shape.clone()))
    }

    pub fn abs(&self) -> Tensor<T> {
        let x = self.clone();
        Tensor::from_op(
            self.map_values(|v| v.abs()),
            self.shape.clone(),
            "abs",
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(x.masked_by(g, |v| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let s = T::from_f64_lossy(slope);
        let x = self.clone();
        Tensor::from_op(
            self.map_values(|v| if v > T::zero() { v } else { v * s }),
            self.shape.clone(),
            "leaky_relu",
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(x.masked_by(g, |v| if v > T::zero() { T::one() } else { s }))]
            }),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.leaky_relu(0.0)
    }

    /// Sums broadcast axes away so the result has `target` shape
    /// (right-aligned, numpy rules). Inverse of [`broadcast_to`](Self::broadcast_to).
    pub fn sum_to(&self, target: &[usize]) -> Tensor<T> {
        if self.shape == target {
            return self.clone();
        }
        assert!(
            reduce_shape_ok(&self.shape, target),
            "cannot reduce shape {:?} to {:?}",
            self.shape,
            target
        );
        let src_strides = contiguous_strides(&self.shape);
        let out_strides = broadcast_strides(target, &self.shape);
        let mut data = vec![T::zero(); numel_of(target)];
        let src = &self.data;
        walk_rows(&self.shape, [&src_strides, &out_strides], |[i, o], n, [_, so]| {
            let row = &src[i..i + n];
            if so == 0 {
                data[o] = data[o] + row.iter().copied().sum::<T>();
            } else {
                for (d, &v) in data[o..o + n].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        });
        let src_shape = self.shape.clone();
        Tensor::from_op(
            data,
            target.to_vec(),
            "sum_to",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.broadcast_to(&src_shape))]),
        )
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Tensor<T> {
        if self.shape == target {
            return self.clone();
        }
        assert!(
            reduce_shape_ok(target, &self.shape),
            "cannot broadcast shape {:?} to {:?}",
            self.shape,
            target
        );
        let out_strides = contiguous_strides(target);
        let src_strides = broadcast_strides(&self.shape, target);
        let mut data = vec![T::zero(); numel_of(target)];
        let src = &self.data;
        walk_rows(target, [&out_strides, &src_strides], |[o, i], n, [_, si]| {
            let dst = &mut data[o..o + n];
            if si == 0 {
                dst.fill(src[i]);
            } else {
                dst.copy_from_slice(&src[i..i + n]);
            }
        });
        let src_shape = self.shape.clone();
        Tensor::from_op(
            data,
            target.to_vec(),
            "broadcast_to",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.sum_to(&src_shape))]),
        )
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Tensor<T> {
        let mut target = self.shape.clone();
        for &a in axes {
            target[a] = 1;
        }
        self.sum_to(&target)
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes_keepdim(&self, axes: &[usize]) -> Tensor<T> {
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        self.sum_axes_keepdim(axes).mul_scalar(1.0 / count as f64)
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Tensor<T> {
        self.sum_to(&[])
    }

    /// Mean of all elements as a 0-d tensor.
    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "cannot reshape {:?} to {:?}",
            self.shape,
            shape
        );
        let src_shape = self.shape.clone();
        Tensor::from_op(
            Arc::clone(&self.data),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.reshape(&src_shape))]),
        )
    }

    /// Generic axis permutation; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Tensor<T> {
        assert_eq!(axes.len(), self.ndim(), "permute rank mismatch");
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides = contiguous_strides(&self.shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let out_strides = contiguous_strides(&out_shape);
        let mut data = vec![T::zero(); self.numel()];
        let src = &self.data;
        walk(&out_shape, [&out_strides, &perm_strides], |[o, i]| {
            data[o] = src[i]
        });
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op(
            data,
            out_shape,
            "permute",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.permute(&inverse))]),
        )
    }

    /// Transpose of a 2-d tensor.
    pub fn t(&self) -> Tensor<T> {
        assert_eq!(self.ndim(), 2, "t() expects a matrix");
        self.permute(&[1, 0])
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(
            self.ndim() == 2 && other.ndim() == 2 && self.shape[1] == other.shape[0],
            "matmul shape mismatch {:?} x {:?}",
            self.shape,
            other.shape
        );
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut data = vec![T::zero(); m * n];
        matmul_into(m, k, n, &self.data, &other.data, &mut data);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![m, n],
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.matmul(&b.t())),
                    need[1].then(|| a.t().matmul(g)),
                ]
            }),
        )
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = &parts[0].shape;
        for p in parts {
            assert_eq!(p.ndim(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in p.shape.iter().zip(first.iter()).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch on axis {d}");
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
        Tensor::from_op(
            data,
            out_shape,
            "concat",
            parts.to_vec(),
            Box::new(move |g, need| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(need.iter())
                    .map(|(&len, &n)| {
                        let piece = n.then(|| g.narrow(axis, start, len));
                        start += len;
                        piece
                    })
                    .collect()
            }),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let extent = self.shape[axis];
        assert!(start + len <= extent, "narrow out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let after = extent - start - len;
        Tensor::from_op(
            data,
            out_shape,
            "narrow",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.pad_axis(axis, start, after))]),
        )
    }

    /// Zero-pads `before`/`after` entries along `axis`.
    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Tensor<T> {
        let extent = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = extent + before + after;
        let mut data = vec![T::zero(); numel_of(&out_shape)];
        let out_block = out_shape[axis] * inner;
        for o in 0..outer {
            let src = &self.data[o * extent * inner..(o + 1) * extent * inner];
            let dst = o * out_block + before * inner;
            data[dst..dst + extent * inner].copy_from_slice(src);
        }
        Tensor::from_op(
            data,
            out_shape,
            "pad_axis",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.narrow(axis, before, extent))]),
        )
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
