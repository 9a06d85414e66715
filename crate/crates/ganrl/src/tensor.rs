//! Dense row-major tensors and the numeric kernels behind the graph ops.
//!
//! Everything here is deterministic: parallel kernels only ever split work
//! into disjoint output regions, so results are bit-identical for a fixed
//! input regardless of thread count.

use num_traits::Float;
use rayon::prelude::*;
use std::fmt;

/// Scalar element type for tensors and graphs. `f32` for training,
/// `f64` for gradient-check tests.
pub trait Element:
    Float + num_traits::FromPrimitive + num_traits::ToPrimitive + Send + Sync + fmt::Debug + 'static
{
    fn fromf(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).unwrap()
    }
    fn tof(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Element for f32 {}
impl Element for f64 {}

/// Dense tensor, row-major. Rank 0 (`shape == []`) holds a single scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, ...]", &self.data[..8])
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(numel(&shape), data.len(), "shape/data length mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor<T> {
        assert_eq!(numel(&shape), self.data.len());
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Output spatial size of a strided convolution window sweep (floor mode).
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// C[m,n] = A[m,k] * B[k,n], accumulated row by row so the inner loop is
/// unit-stride over B and C.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2);
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(a.data(), b.data(), out.data_mut(), m, k, n);
    out
}

pub fn matmul_into<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let do_row = |i: usize, c_row: &mut [T]| {
        for kk in 0..k {
            let a_ik = a[i * k + kk];
            if a_ik == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..kk * n + n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row.iter()) {
                *cj = a_ik.mul_add(bj, *cj);
            }
        }
    };
    // Parallel split over disjoint output rows keeps results bit-identical.
    if m * k * n >= 1 << 16 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| do_row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            do_row(i, c_row);
        }
    }
}

pub fn transpose2<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    out
}

struct ConvDims {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

/// col[(c*kh+a)*kw+b][i*wo+j] = x[c][i*s-p+a][j*s-p+b], zero outside bounds.
fn im2col<T: Element>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let (h, w, ho, wo) = (d.h, d.w, d.ho, d.wo);
    for c in 0..d.ci {
        for a in 0..d.kh {
            for b in 0..d.kw {
                let row = &mut col[((c * d.kh + a) * d.kw + b) * ho * wo..][..ho * wo];
                for i in 0..ho {
                    let y = (i * d.stride + a) as isize - d.pad as isize;
                    let dst = &mut row[i * wo..i * wo + wo];
                    if y < 0 || y >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &x[(c * h + y as usize) * w..][..w];
                    for (j, v) in dst.iter_mut().enumerate() {
                        let xcol = (j * d.stride + b) as isize - d.pad as isize;
                        *v = if xcol < 0 || xcol >= w as isize {
                            T::zero()
                        } else {
                            src_row[xcol as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns back into the image.
fn col2im<T: Element>(col: &[T], d: &ConvDims, x: &mut [T]) {
    let (h, w, ho, wo) = (d.h, d.w, d.ho, d.wo);
    x.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..d.ci {
        for a in 0..d.kh {
            for b in 0..d.kw {
                let row = &col[((c * d.kh + a) * d.kw + b) * ho * wo..][..ho * wo];
                for i in 0..ho {
                    let y = (i * d.stride + a) as isize - d.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst_row = &mut x[(c * h + y as usize) * w..][..w];
                    for (j, &v) in row[i * wo..i * wo + wo].iter().enumerate() {
                        let xcol = (j * d.stride + b) as isize - d.pad as isize;
                        if xcol >= 0 && xcol < w as isize {
                            dst_row[xcol as usize] = dst_row[xcol as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Element>(
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> ConvDims {
    let (ci, h, wi) = (x.shape[1], x.shape[2], x.shape[3]);
    let (co, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let ho = conv_out_dim(h, kh, stride, pad).expect("conv shape checked at graph construction");
    let wo = conv_out_dim(wi, kw, stride, pad).expect("conv shape checked at graph construction");
    ConvDims {
        ci,
        h,
        w: wi,
        co,
        kh,
        kw,
        ho,
        wo,
        stride,
        pad,
    }
}

/// conv2d: x[N,Ci,H,W] * w[Co,Ci,kh,kw] -> y[N,Co,Ho,Wo].
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let d = conv_dims(x, w.shape(), stride, pad);
    let n = x.shape[0];
    let ckk = d.ci * d.kh * d.kw;
    let hw = d.ho * d.wo;
    let mut out = Tensor::zeros(&[n, d.co, d.ho, d.wo]);
    let x_stride = d.ci * d.h * d.w;
    out.data
        .par_chunks_mut(d.co * hw)
        .enumerate()
        .for_each(|(i, y_n)| {
            let mut col = vec![T::zero(); ckk * hw];
            im2col(&x.data[i * x_stride..(i + 1) * x_stride], &d, &mut col);
            matmul_into(w.data(), &col, y_n, d.co, ckk, hw);
        });
    out
}

/// conv_transpose2d: t[N,Co,Ho,Wo] * w[Co,Ci,kh,kw] -> y[N,Ci,out_h,out_w].
///
/// Exact adjoint of `conv2d` with the same stride/pad: `(out_h, out_w)` is
/// carried explicitly so gradients restore the true input extent even when
/// the forward conv floor-divided away a remainder.
pub fn conv_transpose2d<T: Element>(
    t: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor<T> {
    let (n, co, ho, wo) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
    let (ci, kh, kw) = (w.shape[1], w.shape[2], w.shape[3]);
    let d = ConvDims {
        ci,
        h: out_h,
        w: out_w,
        co,
        kh,
        kw,
        ho,
        wo,
        stride,
        pad,
    };
    let ckk = ci * kh * kw;
    let hw = ho * wo;
    // w^T once, shared across the batch.
    let mut wt = vec![T::zero(); ckk * co];
    for o in 0..co {
        for r in 0..ckk {
            wt[r * co + o] = w.data[o * ckk + r];
        }
    }
    let mut out = Tensor::zeros(&[n, ci, out_h, out_w]);
    let o_stride = ci * out_h * out_w;
    out.data
        .par_chunks_mut(o_stride)
        .enumerate()
        .for_each(|(i, y_n)| {
            let mut col = vec![T::zero(); ckk * hw];
            matmul_into(&wt, &t.data[i * co * hw..(i + 1) * co * hw], &mut col, ckk, co, hw);
            col2im(&col, &d, y_n);
        });
    out
}

/// Kernel gradient: x[N,Ci,H,W], g[N,Co,Ho,Wo] -> wg[Co,Ci,kh,kw].
pub fn conv2d_wgrad<T: Element>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Tensor<T> {
    let n = x.shape[0];
    let co = g.shape[1];
    let d = ConvDims {
        ci: x.shape[1],
        h: x.shape[2],
        w: x.shape[3],
        co,
        kh,
        kw,
        ho: g.shape[2],
        wo: g.shape[3],
        stride,
        pad,
    };
    let ckk = d.ci * kh * kw;
    let hw = d.ho * d.wo;
    let x_stride = d.ci * d.h * d.w;
    // Per-sample partials in parallel, then a fixed-order reduction.
    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut col = vec![T::zero(); ckk * hw];
            im2col(&x.data[i * x_stride..(i + 1) * x_stride], &d, &mut col);
            let g_n = &g.data[i * co * hw..(i + 1) * co * hw];
            let mut part = vec![T::zero(); co * ckk];
            for o in 0..co {
                let g_row = &g_n[o * hw..(o + 1) * hw];
                for r in 0..ckk {
                    let col_row = &col[r * hw..(r + 1) * hw];
                    let mut acc = T::zero();
                    for (&gv, &cv) in g_row.iter().zip(col_row.iter()) {
                        acc = gv.mul_add(cv, acc);
                    }
                    part[o * ckk + r] = acc;
                }
            }
            part
        })
        .collect();
    let mut out = Tensor::zeros(&[co, d.ci, kh, kw]);
    for part in partials {
        for (o, p) in out.data.iter_mut().zip(part.iter()) {
            *o = *o + *p;
        }
    }
    out
}

/// Reduce over `axes` (ascending, deduped), keeping them as size-1 dims.
pub fn sum_axes_keep<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let rank = x.shape.len();
    let mut out_shape = x.shape.clone();
    for &a in axes {
        out_shape[a] = 1;
    }
    let mut out = Tensor::zeros(&out_shape);
    // out strides in the input's coordinate system
    let mut out_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        out_strides[i] = if out_shape[i] == 1 { 0 } else { s };
        s *= out_shape[i];
    }
    reduce_apply(x, &out_strides, |acc: &mut T, v| *acc = *acc + v, out.data_mut());
    out
}

/// Walk `x` in order, accumulating into `out[sum(idx * strides)]` without
/// per-element index vectors. Specialized per rank for speed.
fn reduce_apply<T: Element>(
    x: &Tensor<T>,
    strides: &[usize],
    f: impl Fn(&mut T, T) + Copy,
    out: &mut [T],
) {
    let sh = &x.shape;
    let d = &x.data;
    match sh.len() {
        0 | 1 => {
            if strides.first().copied().unwrap_or(0) == 0 {
                for &v in d {
                    f(&mut out[0], v);
                }
            } else {
                for (o, &v) in out.iter_mut().zip(d.iter()) {
                    f(o, v);
                }
            }
        }
        2 => {
            let (s0, s1) = (strides[0], strides[1]);
            let mut it = d.iter();
            for i0 in 0..sh[0] {
                for i1 in 0..sh[1] {
                    f(&mut out[i0 * s0 + i1 * s1], *it.next().unwrap());
                }
            }
        }
        3 => {
            let (s0, s1, s2) = (strides[0], strides[1], strides[2]);
            let mut it = d.iter();
            for i0 in 0..sh[0] {
                for i1 in 0..sh[1] {
                    let base = i0 * s0 + i1 * s1;
                    if s2 == 0 {
                        let acc = &mut out[base];
                        for _ in 0..sh[2] {
                            f(acc, *it.next().unwrap());
                        }
                    } else {
                        for i2 in 0..sh[2] {
                            f(&mut out[base + i2 * s2], *it.next().unwrap());
                        }
                    }
                }
            }
        }
        4 => {
            let (s0, s1, s2, s3) = (strides[0], strides[1], strides[2], strides[3]);
            let hw = sh[2] * sh[3];
            for i0 in 0..sh[0] {
                for i1 in 0..sh[1] {
                    let base = i0 * s0 + i1 * s1;
                    let row = &d[(i0 * sh[1] + i1) * hw..][..hw];
                    if s2 == 0 && s3 == 0 {
                        let mut acc = out[base];
                        for &v in row {
                            f(&mut acc, v);
                        }
                        out[base] = acc;
                    } else if s3 == 0 {
                        for (i2, chunk) in row.chunks_exact(sh[3]).enumerate() {
                            let mut acc = out[base + i2 * s2];
                            for &v in chunk {
                                f(&mut acc, v);
                            }
                            out[base + i2 * s2] = acc;
                        }
                    } else {
                        for (i2, chunk) in row.chunks_exact(sh[3]).enumerate() {
                            for (i3, &v) in chunk.iter().enumerate() {
                                f(&mut out[base + i2 * s2 + i3 * s3], v);
                            }
                        }
                    }
                }
            }
        }
        _ => {
            // generic odometer fallback for rare high ranks
            let rank = sh.len();
            let mut idx = vec![0usize; rank];
            for &v in d {
                let mut o = 0;
                for i in 0..rank {
                    o += idx[i] * strides[i];
                }
                f(&mut out[o], v);
                for i in (0..rank).rev() {
                    idx[i] += 1;
                    if idx[i] < sh[i] {
                        break;
                    }
                    idx[i] = 0;
                }
            }
        }
    }
}

pub fn max_axes_keep<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let rank = x.shape.len();
    let mut out_shape = x.shape.clone();
    for &a in axes {
        out_shape[a] = 1;
    }
    let mut out = Tensor::full(&out_shape, T::neg_infinity());
    let mut out_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        out_strides[i] = if out_shape[i] == 1 { 0 } else { s };
        s *= out_shape[i];
    }
    reduce_apply(
        x,
        &out_strides,
        |acc: &mut T, v| {
            if v > *acc {
                *acc = v;
            }
        },
        out.data_mut(),
    );
    out
}

/// Expand `x` to `target`: ranks equal with per-dim size equal or 1, or `x`
/// is rank 0.
pub fn broadcast_to<T: Element>(x: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if x.shape.is_empty() || x.data.len() == 1 {
        return Tensor::full(target, x.data[0]);
    }
    assert_eq!(x.shape.len(), target.len());
    let rank = target.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        in_strides[i] = if x.shape[i] == 1 { 0 } else { s };
        s *= x.shape[i];
    }
    let mut out = Tensor::zeros(target);
    let o = out.data_mut();
    let d = &x.data;
    match rank {
        1 => o.copy_from_slice(d),
        2 => {
            let (s0, s1) = (in_strides[0], in_strides[1]);
            if s1 != 0 && s0 == 0 {
                for row in o.chunks_exact_mut(target[1]) {
                    row.copy_from_slice(d);
                }
            } else {
                let mut k = 0;
                for i0 in 0..target[0] {
                    for i1 in 0..target[1] {
                        o[k] = d[i0 * s0 + i1 * s1];
                        k += 1;
                    }
                }
            }
        }
        4 => {
            let (s0, s1, s2, s3) = (in_strides[0], in_strides[1], in_strides[2], in_strides[3]);
            let hw = target[2] * target[3];
            for i0 in 0..target[0] {
                for i1 in 0..target[1] {
                    let base = i0 * s0 + i1 * s1;
                    let row = &mut o[(i0 * target[1] + i1) * hw..][..hw];
                    if s2 == 0 && s3 == 0 {
                        let v = d[base];
                        row.iter_mut().for_each(|r| *r = v);
                    } else if s2 != 0 && s3 != 0 {
                        row.copy_from_slice(&d[base..base + hw]);
                    } else {
                        for i2 in 0..target[2] {
                            for i3 in 0..target[3] {
                                row[i2 * target[3] + i3] = d[base + i2 * s2 + i3 * s3];
                            }
                        }
                    }
                }
            }
        }
        _ => {
            let mut idx = vec![0usize; rank];
            for v in o.iter_mut() {
                let mut off = 0;
                for i in 0..rank {
                    off += idx[i] * in_strides[i];
                }
                *v = d[off];
                for i in (0..rank).rev() {
                    idx[i] += 1;
                    if idx[i] < target[i] {
                        break;
                    }
                    idx[i] = 0;
                }
            }
        }
    }
    out
}

pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let rank = parts[0].shape.len();
    let mut out_shape = parts[0].shape.clone();
    out_shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let out_row = out_shape[axis] * inner;
    let mut offset = 0;
    for p in parts {
        debug_assert_eq!(p.shape.len(), rank);
        let p_row = p.shape[axis] * inner;
        for o in 0..outer {
            out.data[o * out_row + offset..o * out_row + offset + p_row]
                .copy_from_slice(&p.data[o * p_row..(o + 1) * p_row]);
        }
        offset += p_row;
    }
    out
}

pub fn slice_axis<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let mut out_shape = x.shape.clone();
    out_shape[axis] = len;
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let in_row = x.shape[axis] * inner;
    let out_row = len * inner;
    for o in 0..outer {
        out.data[o * out_row..(o + 1) * out_row]
            .copy_from_slice(&x.data[o * in_row + start * inner..o * in_row + (start + len) * inner]);
    }
    out
}
