//! Numeric kernels behind the autodiff ops. Batch-level loops go through
//! [`crate::par`] so they run on rayon when it is enabled.

use crate::par;
use crate::tensor::{numel, strides, Tensor};

/// `c = a·b + beta·c` for row-major matrices; `ta`/`tb` transpose the inputs.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above and strides describe exactly those
    // row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Self {
        assert!(h >= kh && w >= kw, "conv kernel {kh}x{kw} larger than input {h}x{w}");
        Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            ho: (h - kh) / stride + 1,
            wo: (w - kw) / stride + 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * plane..(r + 1) * plane];
                for oy in 0..g.ho {
                    let src = &xc[(oy * g.stride + ki) * g.w..];
                    let row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        row.copy_from_slice(&src[kj..kj + g.wo]);
                    } else {
                        for (ox, v) in row.iter_mut().enumerate() {
                            *v = src[ox * g.stride + kj];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[r * plane..(r + 1) * plane];
                for oy in 0..g.ho {
                    let base = (oy * g.stride + ki) * g.w + kj;
                    let row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, v) in row.iter().enumerate() {
                        xc[base + ox * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Valid (unpadded) cross-correlation. `x: [N,C,H,W]`, `w: [O,C,kh,kw]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let (n, c, h, wd) = dims4(x);
    let (o, wc, kh, kw) = dims4(w);
    assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
    let g = ConvGeom::new(c, h, wd, kh, kw, stride);
    let in_len = c * h * wd;
    let out_len = o * g.ho * g.wo;
    let mut out = vec![0.0; n * out_len];
    let xd = x.data();
    let wdata = w.data();
    par::for_each_chunk_mut(&mut out, out_len.max(1), |i, dst| {
        let xs = &xd[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            gemm(o, c, g.ho * g.wo, wdata, false, xs, false, dst, 0.0);
        } else {
            let mut cols = vec![0.0; g.rows() * g.ho * g.wo];
            im2col(xs, &g, &mut cols);
            gemm(o, g.rows(), g.ho * g.wo, wdata, false, &cols, false, dst, 0.0);
        }
    });
    Tensor::from_vec(&[n, o, g.ho, g.wo], out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, h, wd) = dims4(x);
    let (o, _, kh, kw) = dims4(w);
    let g = ConvGeom::new(c, h, wd, kh, kw, stride);
    let plane = g.ho * g.wo;
    let in_len = c * h * wd;
    let xd = x.data();
    let wdata = w.data();
    let gyd = gy.data();
    let per_sample = par::map_range(n, |i| {
        let xs = &xd[i * in_len..(i + 1) * in_len];
        let gys = &gyd[i * o * plane..(i + 1) * o * plane];
        let mut gw = None;
        let mut gx = None;
        if g.is_pointwise() {
            if need_gw {
                let mut acc = vec![0.0; o * c];
                gemm(o, plane, c, gys, false, xs, true, &mut acc, 0.0);
                gw = Some(acc);
            }
            if need_gx {
                let mut acc = vec![0.0; in_len];
                gemm(c, o, plane, wdata, true, gys, false, &mut acc, 0.0);
                gx = Some(acc);
            }
        } else {
            if need_gw {
                let mut cols = vec![0.0; g.rows() * plane];
                im2col(xs, &g, &mut cols);
                let mut acc = vec![0.0; o * g.rows()];
                gemm(o, plane, g.rows(), gys, false, &cols, true, &mut acc, 0.0);
                gw = Some(acc);
            }
            if need_gx {
                let mut gcols = vec![0.0; g.rows() * plane];
                gemm(g.rows(), o, plane, wdata, true, gys, false, &mut gcols, 0.0);
                let mut acc = vec![0.0; in_len];
                col2im(&gcols, &g, &mut acc);
                gx = Some(acc);
            }
        }
        (gx, gw)
    });
    let mut gx_all = need_gx.then(|| Vec::with_capacity(n * in_len));
    let mut gw_all = need_gw.then(|| vec![0.0; w.numel()]);
    for (gx, gw) in per_sample {
        if let (Some(all), Some(v)) = (gx_all.as_mut(), gx) {
            all.extend_from_slice(&v);
        }
        if let (Some(all), Some(v)) = (gw_all.as_mut(), gw) {
            for (a, b) in all.iter_mut().zip(&v) {
                *a += b;
            }
        }
    }
    (
        gx_all.map(|v| Tensor::from_vec(x.shape(), v)),
        gw_all.map(|v| Tensor::from_vec(w.shape(), v)),
    )
}

pub fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Batched matmul `[B,M,K]·[B,K,N]`, with optional transposes of the last
/// two axes of either operand.
pub fn bmm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    assert_eq!(a.rank(), 3, "bmm lhs must be rank 3");
    assert_eq!(b.rank(), 3, "bmm rhs must be rank 3");
    let batch = a.dim(0);
    assert_eq!(batch, b.dim(0), "bmm batch mismatch");
    let (m, k) = if ta { (a.dim(2), a.dim(1)) } else { (a.dim(1), a.dim(2)) };
    let (kb, n) = if tb { (b.dim(2), b.dim(1)) } else { (b.dim(1), b.dim(2)) };
    assert_eq!(k, kb, "bmm inner dimension mismatch: {:?} vs {:?}", a.shape(), b.shape());
    let mut out = vec![0.0; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_chunk_mut(&mut out, (m * n).max(1), |i, dst| {
        gemm(
            m,
            k,
            n,
            &ad[i * m * k..(i + 1) * m * k],
            ta,
            &bd[i * k * n..(i + 1) * k * n],
            tb,
            dst,
            0.0,
        );
    });
    Tensor::from_vec(&[batch, m, n], out)
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on
/// broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                st[i - pad]
            }
        })
        .collect()
}

/// Visits every index of `out` in row-major order, passing the linear
/// offsets into `a` and `b`.
fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut done = 0;
    while done < total {
        for j in 0..inner {
            f(oa + j * ia, ob + j * ib);
        }
        done += inner;
        // carry into the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binary_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = Vec::with_capacity(numel(&out));
    let (ad, bd) = (a.data(), b.data());
    walk2(&out, &sa, &sb, |ia, ib| data.push(f(ad[ia], bd[ib])));
    Tensor::from_vec(&out, data)
}

/// Sums `g` (of a broadcast shape) down to `shape`.
pub fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape().to_vec();
    let st = broadcast_strides(shape, &out);
    let ones = strides(&out);
    let mut acc = vec![0.0; numel(shape)];
    let gd = g.data();
    walk2(&out, &ones, &st, |ig, it| acc[it] += gd[ig]);
    Tensor::from_vec(shape, acc)
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    assert_eq!(perm.len(), x.rank(), "permute rank mismatch");
    let in_st = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.dim(p)).collect();
    let src_st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut data = Vec::with_capacity(x.numel());
    let xd = x.data();
    walk2(&out_shape, &src_st, &zeros, |i, _| data.push(xd[i]));
    Tensor::from_vec(&out_shape, data)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Sum over `axes`, keeping them as size-1 dimensions.
pub fn sum_axes_keep(x: &Tensor, axes: &[usize]) -> Tensor {
    let mut shape = x.shape().to_vec();
    for &a in axes {
        shape[a] = 1;
    }
    reduce_to_shape(x, &shape)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample; axes of length 1 fall back
    /// to edge replication.
    Reflect,
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Source row/column for each padded coordinate (`None` = zero fill).
fn pad_map(n: usize, before: usize, after: usize, mode: PadMode) -> Vec<Option<usize>> {
    (0..n + before + after)
        .map(|i| {
            let src = i as isize - before as isize;
            match mode {
                PadMode::Zero => (src >= 0 && (src as usize) < n).then_some(src as usize),
                PadMode::Reflect => Some(reflect_index(src, n)),
            }
        })
        .collect()
}

/// Pads the last two axes of a rank-4 tensor by `p` on every side.
pub fn pad2d(x: &Tensor, p: usize, mode: PadMode) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let rows = pad_map(h, p, p, mode);
    let cols = pad_map(w, p, p, mode);
    let mut out = vec![0.0; n * c * hp * wp];
    let xd = x.data();
    par::for_each_chunk_mut(&mut out, hp * wp, |plane, dst| {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for (i, r) in rows.iter().enumerate() {
            let Some(r) = r else { continue };
            for (j, cc) in cols.iter().enumerate() {
                if let Some(cc) = cc {
                    dst[i * wp + j] = src[r * w + cc];
                }
            }
        }
    });
    Tensor::from_vec(&[n, c, hp, wp], out)
}

pub fn pad2d_backward(gy: &Tensor, h: usize, w: usize, p: usize, mode: PadMode) -> Tensor {
    let (n, c, hp, wp) = dims4(gy);
    let rows = pad_map(h, p, p, mode);
    let cols = pad_map(w, p, p, mode);
    let mut out = vec![0.0; n * c * h * w];
    let gd = gy.data();
    par::for_each_chunk_mut(&mut out, h * w, |plane, dst| {
        let src = &gd[plane * hp * wp..(plane + 1) * hp * wp];
        for (i, r) in rows.iter().enumerate() {
            let Some(r) = r else { continue };
            for (j, cc) in cols.iter().enumerate() {
                if let Some(cc) = cc {
                    dst[r * w + cc] += src[i * wp + j];
                }
            }
        }
    });
    Tensor::from_vec(&[n, c, h, w], out)
}

pub fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; n * c * ho * wo];
    let xd = x.data();
    par::for_each_chunk_mut(&mut out, ho * wo, |plane, dst| {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = src[(i / f) * w + j / f];
            }
        }
    });
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub fn upsample_nearest_backward(gy: &Tensor, f: usize) -> Tensor {
    let (n, c, ho, wo) = dims4(gy);
    let (h, w) = (ho / f, wo / f);
    let mut out = vec![0.0; n * c * h * w];
    let gd = gy.data();
    par::for_each_chunk_mut(&mut out, h * w, |plane, dst| {
        let src = &gd[plane * ho * wo..(plane + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                dst[(i / f) * w + j / f] += src[i * wo + j];
            }
        }
    });
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let k = *x.shape().last().expect("softmax of a scalar");
    let mut out = x.data().to_vec();
    par::for_each_chunk_mut(&mut out, k.max(1), |_, row| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    });
    Tensor::from_vec(x.shape(), out)
}

/// Copies a sub-range `[start, start+len)` of `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = x.shape();
    assert!(start + len <= shape[axis], "narrow out of range");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(numel(&out_shape));
    let xd = x.data();
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        data.extend_from_slice(&xd[base..base + len * inner]);
    }
    Tensor::from_vec(&out_shape, data)
}

/// Zero-pads `axis` with `before`/`after` entries.
pub fn pad_axis(x: &Tensor, axis: usize, before: usize, after: usize) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] += before + after;
    let mut data = vec![0.0; numel(&out_shape)];
    let xd = x.data();
    let run = shape[axis] * inner;
    for o in 0..outer {
        let dst = (o * out_shape[axis] + before) * inner;
        data[dst..dst + run].copy_from_slice(&xd[o * run..(o + 1) * run]);
    }
    Tensor::from_vec(&out_shape, data)
}

pub fn concat(items: &[&Tensor], axis: usize) -> Tensor {
    assert!(!items.is_empty(), "concat of zero tensors");
    let first = items[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out_shape = first.to_vec();
    out_shape[axis] = 0;
    for t in items {
        let s = t.shape();
        assert_eq!(s.len(), first.len(), "concat rank mismatch");
        for (i, (&a, &b)) in s.iter().zip(first).enumerate() {
            assert!(i == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
        }
        out_shape[axis] += s[axis];
    }
    let mut data = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for t in items {
            let run = t.dim(axis) * inner;
            data.extend_from_slice(&t.data()[o * run..(o + 1) * run]);
        }
    }
    Tensor::from_vec(&out_shape, data)
}
