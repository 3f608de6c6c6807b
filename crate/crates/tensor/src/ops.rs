//! Differentiable operations on [`Var`].

use crate::kernels::{self, PadMode};
use crate::tensor::Tensor;
use crate::var::Var;

fn unary(x: &Var, value: Tensor, dydx: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    // dydx(input, output)
    Var::from_op(value, vec![x.clone()], move |ctx| {
        let xin = ctx.input(0).data();
        let g = ctx
            .grad
            .data()
            .iter()
            .zip(xin)
            .zip(ctx.out.data())
            .map(|((&g, &xv), &yv)| g * dydx(xv, yv))
            .collect();
        vec![Some(Tensor::from_vec(ctx.out.shape(), g))]
    })
}

impl Var {
    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Var {
        unary(self, self.value().map(|v| v * s), move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        unary(self, self.value().map(|v| v + s), |_, _| 1.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        unary(
            self,
            self.value().map(|v| if v > 0.0 { v } else { slope * v }),
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Var {
        unary(
            self,
            self.value().map(|v| 1.0 / (1.0 + (-v).exp())),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh(&self) -> Var {
        unary(self, self.value().map(f64::tanh), |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Var {
        unary(self, self.value().map(f64::exp), |_, y| y)
    }

    pub fn ln(&self) -> Var {
        unary(self, self.value().map(f64::ln), |x, _| 1.0 / x)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Var {
        unary(self, self.value().map(f64::sqrt), |_, y| {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        })
    }

    pub fn abs(&self) -> Var {
        unary(self, self.value().map(f64::abs), |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Var {
        unary(self, self.value().map(|v| v * v), |x, _| 2.0 * x)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        unary(self, self.value().map(|v| v.clamp(lo, hi)), move |x, _| {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn add(&self, other: &Var) -> Var {
        let value = kernels::binary_broadcast(self.value(), other.value(), |a, b| a + b);
        Var::from_op(value, vec![self.clone(), other.clone()], |ctx| {
            vec![
                ctx.needs(0)
                    .then(|| kernels::reduce_to_shape(ctx.grad, ctx.input(0).shape())),
                ctx.needs(1)
                    .then(|| kernels::reduce_to_shape(ctx.grad, ctx.input(1).shape())),
            ]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = kernels::binary_broadcast(self.value(), other.value(), |a, b| a - b);
        Var::from_op(value, vec![self.clone(), other.clone()], |ctx| {
            vec![
                ctx.needs(0)
                    .then(|| kernels::reduce_to_shape(ctx.grad, ctx.input(0).shape())),
                ctx.needs(1).then(|| {
                    kernels::reduce_to_shape(&ctx.grad.map(|v| -v), ctx.input(1).shape())
                }),
            ]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = kernels::binary_broadcast(self.value(), other.value(), |a, b| a * b);
        Var::from_op(value, vec![self.clone(), other.clone()], |ctx| {
            let (a, b) = (ctx.input(0), ctx.input(1));
            vec![
                ctx.needs(0).then(|| {
                    let g = kernels::binary_broadcast(ctx.grad, b, |g, b| g * b);
                    kernels::reduce_to_shape(&g, a.shape())
                }),
                ctx.needs(1).then(|| {
                    let g = kernels::binary_broadcast(ctx.grad, a, |g, a| g * a);
                    kernels::reduce_to_shape(&g, b.shape())
                }),
            ]
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = kernels::binary_broadcast(self.value(), other.value(), |a, b| a / b);
        Var::from_op(value, vec![self.clone(), other.clone()], |ctx| {
            let (a, b) = (ctx.input(0), ctx.input(1));
            vec![
                ctx.needs(0).then(|| {
                    let g = kernels::binary_broadcast(ctx.grad, b, |g, b| g / b);
                    kernels::reduce_to_shape(&g, a.shape())
                }),
                ctx.needs(1).then(|| {
                    // d(a/b)/db = -out/b
                    let q = kernels::binary_broadcast(ctx.out, b, |y, b| -y / b);
                    let g = ctx.grad.zip_map(&q, |g, q| g * q);
                    kernels::reduce_to_shape(&g, b.shape())
                }),
            ]
        })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var {
        let value = Tensor::scalar(self.value().sum());
        Var::from_op(value, vec![self.clone()], |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.input(0).shape(), g))]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 axes.
    pub fn sum_keep(&self, axes: &[usize]) -> Var {
        let value = kernels::sum_axes_keep(self.value(), axes);
        Var::from_op(value, vec![self.clone()], |ctx| {
            let x = ctx.input(0);
            vec![Some(kernels::binary_broadcast(
                &Tensor::zeros(x.shape()),
                ctx.grad,
                |_, g| g,
            ))]
        })
    }

    pub fn mean_keep(&self, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_keep(axes).scale(1.0 / count as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = self.value().reshape(shape);
        Var::from_op(value, vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.reshape(ctx.input(0).shape()))]
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Var {
        let value = kernels::permute(self.value(), perm);
        let inv = kernels::inverse_perm(perm);
        Var::from_op(value, vec![self.clone()], move |ctx| {
            vec![Some(kernels::permute(ctx.grad, &inv))]
        })
    }

    /// Batched matrix product of rank-3 operands, optional transposes on the
    /// last two axes.
    pub fn bmm(&self, ta: bool, other: &Var, tb: bool) -> Var {
        let value = kernels::bmm(self.value(), ta, other.value(), tb);
        Var::from_op(value, vec![self.clone(), other.clone()], move |ctx| {
            let (a, b, g) = (ctx.input(0), ctx.input(1), ctx.grad);
            // C = op(A)·op(B)
            let ga = ctx.needs(0).then(|| {
                if ta {
                    kernels::bmm(b, tb, g, true)
                } else {
                    kernels::bmm(g, false, b, !tb)
                }
            });
            let gb = ctx.needs(1).then(|| {
                if tb {
                    kernels::bmm(g, true, a, ta)
                } else {
                    kernels::bmm(a, !ta, g, false)
                }
            });
            vec![ga, gb]
        })
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var) -> Var {
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        self.reshape(&[1, m, k])
            .bmm(false, &other.reshape(&[1, k, n]), false)
            .reshape(&[m, n])
    }

    /// Valid cross-correlation; `self: [N,C,H,W]`, `w: [O,C,kh,kw]`.
    pub fn conv2d(&self, w: &Var, stride: usize) -> Var {
        let value = kernels::conv2d_forward(self.value(), w.value(), stride);
        Var::from_op(value, vec![self.clone(), w.clone()], move |ctx| {
            let (gx, gw) = kernels::conv2d_backward(
                ctx.input(0),
                ctx.input(1),
                ctx.grad,
                stride,
                ctx.needs(0),
                ctx.needs(1),
            );
            vec![gx, gw]
        })
    }

    pub fn pad2d(&self, p: usize, mode: PadMode) -> Var {
        if p == 0 {
            return self.clone();
        }
        let value = kernels::pad2d(self.value(), p, mode);
        Var::from_op(value, vec![self.clone()], move |ctx| {
            let s = ctx.input(0).shape();
            vec![Some(kernels::pad2d_backward(ctx.grad, s[2], s[3], p, mode))]
        })
    }

    pub fn upsample_nearest(&self, factor: usize) -> Var {
        let value = kernels::upsample_nearest(self.value(), factor);
        Var::from_op(value, vec![self.clone()], move |ctx| {
            vec![Some(kernels::upsample_nearest_backward(ctx.grad, factor))]
        })
    }

    pub fn softmax_last(&self) -> Var {
        let value = kernels::softmax_last(self.value());
        Var::from_op(value, vec![self.clone()], |ctx| {
            let y = ctx.out.data();
            let g = ctx.grad.data();
            let k = *ctx.out.shape().last().unwrap();
            let mut out = vec![0.0; y.len()];
            for ((orow, yrow), grow) in out.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_vec(ctx.out.shape(), out))]
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let value = kernels::narrow(self.value(), axis, start, len);
        Var::from_op(value, vec![self.clone()], move |ctx| {
            let full = ctx.input(0).dim(axis);
            vec![Some(kernels::pad_axis(
                ctx.grad,
                axis,
                start,
                full - start - len,
            ))]
        })
    }

    /// Rectangle `[y0,y1) × [x0,x1)` of the last two axes.
    pub fn crop2d(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Var {
        let r = self.rank_axes();
        self.narrow(r - 2, y0, y1 - y0).narrow(r - 1, x0, x1 - x0)
    }

    fn rank_axes(&self) -> usize {
        self.shape().len()
    }

    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Var {
        let value = kernels::pad_axis(self.value(), axis, before, after);
        Var::from_op(value, vec![self.clone()], move |ctx| {
            let len = ctx.input(0).dim(axis);
            vec![Some(kernels::narrow(ctx.grad, axis, before, len))]
        })
    }

    /// Zero canvas of size `h × w` with `self` placed at `(y0, x0)`.
    pub fn embed2d(&self, h: usize, w: usize, y0: usize, x0: usize) -> Var {
        let r = self.rank_axes();
        let (sh, sw) = (self.shape()[r - 2], self.shape()[r - 1]);
        assert!(y0 + sh <= h && x0 + sw <= w, "embed2d out of canvas");
        self.pad_axis(r - 2, y0, h - y0 - sh)
            .pad_axis(r - 1, x0, w - x0 - sw)
    }

    pub fn concat(items: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor> = items.iter().map(Var::value).collect();
        let value = kernels::concat(&values, axis);
        let sizes: Vec<usize> = items.iter().map(|v| v.shape()[axis]).collect();
        Var::from_op(value, items.to_vec(), move |ctx| {
            let mut start = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &len)| {
                    let g = ctx
                        .needs(i)
                        .then(|| kernels::narrow(ctx.grad, axis, start, len));
                    start += len;
                    g
                })
                .collect()
        })
    }
}
