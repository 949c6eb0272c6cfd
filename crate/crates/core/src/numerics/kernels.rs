//! Forward kernels behind the differentiable primitives.
//!
//! Everything here is plain tensor-in, tensor-out. Reductions run in a fixed
//! order (row-major, left to right; batch images in index order) so results
//! are bit-reproducible on a given platform.

use crate::error::{shape_err, Result};
use crate::numerics::tensor::{numel, Tensor};

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

fn can_broadcast(from: &[usize], to: &[usize]) -> bool {
    from.len() <= to.len()
        && from
            .iter()
            .rev()
            .zip(to.iter().rev())
            .all(|(&f, &t)| f == t || f == 1)
}

/// Source strides for reading `from` as if it had shape `to` (0 on broadcast axes).
fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let off = to.len() - from.len();
    let mut strides = vec![0; to.len()];
    let mut acc = 1;
    for i in (0..from.len()).rev() {
        strides[i + off] = if from[i] == 1 { 0 } else { acc };
        acc *= from[i];
    }
    strides
}

/// Visits every output index of `shape` in row-major order, passing the
/// matching source offset for the given strides.
fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let rank = shape.len();
    let last = shape[rank - 1];
    let last_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut out = 0usize;
    loop {
        for j in 0..last {
            f(out, base + j * last_stride);
            out += 1;
        }
        // advance the odometer over all but the last axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if !can_broadcast(x.shape(), shape) {
        return Err(shape_err("broadcast", format!("{:?} -> {:?}", x.shape(), shape)));
    }
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let strides = broadcast_strides(x.shape(), shape);
    let src = x.data();
    let mut out = vec![0.0; numel(shape)];
    for_each_offset(shape, &strides, |o, s| out[o] = src[s]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Sums `x` down to `shape`, the adjoint of [`broadcast_to`].
pub fn sum_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if !can_broadcast(shape, x.shape()) {
        return Err(shape_err("sum_to", format!("{:?} -> {:?}", x.shape(), shape)));
    }
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let strides = broadcast_strides(shape, x.shape());
    let src = x.data();
    let mut out = vec![0.0; numel(shape)];
    for_each_offset(x.shape(), &strides, |o, s| out[s] += src[o]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

pub fn transpose2d(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(shape_err("transpose", format!("expected rank 2, got {:?}", x.shape())));
    }
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let src = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// Strided view of a row-major matrix for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols as isize, cs: 1 }
    }
    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols as isize }
    }
}

/// Row-by-row product for thin shapes (few rows or a short inner dimension), where packing dominates.
fn small_rows_gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            row.fill(0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|v| *v *= beta);
        }
        for r in 0..k {
            let av = a.data[(i as isize * a.rs + r as isize * a.cs) as usize];
            let start = (r as isize * b.rs) as usize;
            let brow = &b.data[start..start + n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    if (m <= 4 || k <= 4) && b.cs == 1 {
        small_rows_gemm(m, k, n, a, b, beta, c);
        return;
    }
    // SAFETY: the strides describe matrices that lie inside the given slices
    // (callers construct them from exact row-major buffers), and `c` does not
    // alias `a` or `b` because it is a unique borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        MatRef::row_major(a.data(), k),
        MatRef::row_major(b.data(), n),
        0.0,
        &mut out,
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {} out of range for {:?}", axis, shape)));
    }
    Ok(())
}

/// (outer, axis length, inner) decomposition around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", "no inputs"))?;
    check_axis("concat", first.shape(), axis)?;
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err("concat", format!("{:?} vs {:?} on axis {}", p.shape(), first.shape(), axis)));
        }
        out_shape[axis] += p.shape()[axis];
    }
    let (outer, total, inner) = split_dims(&out_shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("slice", x.shape(), axis)?;
    if start + len > x.shape()[axis] {
        return Err(shape_err(
            "slice",
            format!("range {}..{} on axis {} of {:?}", start, start + len, axis, x.shape()),
        ));
    }
    let (outer, full, inner) = split_dims(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Places `x` at `start` along `axis` inside zeros of length `full`; adjoint of [`slice`].
pub fn embed(x: &Tensor, axis: usize, start: usize, full: usize) -> Result<Tensor> {
    check_axis("embed", x.shape(), axis)?;
    let len = x.shape()[axis];
    if start + len > full {
        return Err(shape_err("embed", format!("{}..{} exceeds {}", start, start + len, full)));
    }
    let (outer, _, inner) = split_dims(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = full;
    let mut out = vec![0.0; numel(&shape)];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Static geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wshape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let bad = |why: &str| shape_err("conv2d", format!("input {:?}, kernel {:?}, stride {}, pad {}: {}", x, wshape, stride, pad, why));
        if x.len() != 4 || wshape.len() != 4 {
            return Err(bad("expected NCHW input and OCkk kernel"));
        }
        if wshape[1] != x[1] {
            return Err(bad("channel mismatch"));
        }
        if wshape[2] != wshape[3] {
            return Err(bad("kernel must be square"));
        }
        if stride == 0 {
            return Err(bad("stride must be positive"));
        }
        let k = wshape[2];
        if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            return Err(bad("kernel larger than padded input"));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: wshape[0],
            k,
            stride,
            pad,
            ho: (x[2] + 2 * pad - k) / stride + 1,
            wo: (x[3] + 2 * pad - k) / stride + 1,
        })
    }

    fn ck(&self) -> usize {
        self.c * self.k * self.k
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.o, self.c, self.k, self.k]
    }

    /// Output columns `ow` whose input column `ow*s - p + kj` lies inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let off = kj as isize - p;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((self.w as isize - 1 - off).div_euclid(s) + 1).clamp(0, self.wo as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    /// Unfolds one image `[C, H, W]` into `[C*k*k, Ho*Wo]`.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        if self.stride == 1 && self.wo == self.w {
            self.im2col_same(img, cols);
        } else {
            self.im2col_lines(img, cols);
        }
    }

    fn im2col_lines(&self, img: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let plen = self.p();
        for c in 0..self.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * plen..(row + 1) * plen];
                    let (lo, hi) = self.valid_cols(kj);
                    for oh in 0..self.ho {
                        let ih = (oh * s) as isize - p + ki as isize;
                        let line = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + ih as usize) * self.w..][..self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo < hi {
                            let first = lo * s + kj - self.pad;
                            if s == 1 {
                                line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                    *v = src[first + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Stride-1 "same" case: each kernel tap is the whole plane shifted, so one
    /// block copy per row of `cols`, then the wrapped border columns are zeroed.
    fn im2col_same(&self, img: &[f64], cols: &mut [f64]) {
        let (k, p, w) = (self.k as isize, self.pad as isize, self.w);
        let plen = self.p();
        for c in 0..self.c {
            let plane = &img[c * self.h * w..(c + 1) * self.h * w];
            for ki in 0..k {
                let rows_lo = (p - ki).max(0) as usize;
                let rows_hi = (self.h as isize + p - ki).clamp(0, self.ho as isize) as usize;
                for kj in 0..k {
                    let row = ((c as isize * k + ki) * k + kj) as usize;
                    let dst = &mut cols[row * plen..(row + 1) * plen];
                    let dc = kj - p;
                    let (lo, hi) = ((-dc).max(0) as usize, w - dc.max(0) as usize);
                    if rows_lo >= rows_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..rows_lo * w].fill(0.0);
                    dst[rows_hi * w..].fill(0.0);
                    let (f0, f1) = (rows_lo * w + lo, rows_hi * w - (w - hi));
                    let shift = (ki - p) * w as isize + dc;
                    let s0 = (f0 as isize + shift) as usize;
                    dst[f0..f1].copy_from_slice(&plane[s0..s0 + (f1 - f0)]);
                    for oh in rows_lo..rows_hi {
                        let line = &mut dst[oh * w..(oh + 1) * w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                    }
                }
            }
        }
    }

    /// Folds `[C*k*k, Ho*Wo]` back onto one image, accumulating overlaps.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let plen = self.p();
        for c in 0..self.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * plen..(row + 1) * plen];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * s + kj - self.pad;
                    for oh in 0..self.ho {
                        let ih = (oh * s) as isize - p + ki as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + ih as usize) * self.w..][..self.w];
                        let line = &src[oh * self.wo + lo..oh * self.wo + hi];
                        for (j, v) in line.iter().enumerate() {
                            dst[first + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let (ck, plen) = (g.ck(), g.p());
    let img_len = g.c * g.h * g.w;
    let mut cols = vec![0.0; ck * plen];
    let mut out = vec![0.0; g.n * g.o * plen];
    for n in 0..g.n {
        g.im2col(&x.data()[n * img_len..(n + 1) * img_len], &mut cols);
        gemm(
            g.o,
            ck,
            plen,
            MatRef::row_major(w.data(), ck),
            MatRef::row_major(&cols, plen),
            0.0,
            &mut out[n * g.o * plen..(n + 1) * g.o * plen],
        );
    }
    Ok(Tensor::from_parts(g.out_shape(), out))
}

/// Gradient of `conv2d` with respect to its input (a transposed convolution).
pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let expect = geom.out_shape();
    if gy.shape()[1..] != expect[1..] || gy.rank() != 4 || w.shape() != geom.kernel_shape().as_slice() {
        return Err(shape_err(
            "conv_transpose",
            format!("grad {:?}, kernel {:?}, geometry {:?}", gy.shape(), w.shape(), geom),
        ));
    }
    let geom = ConvGeom { n: gy.shape()[0], ..*geom };
    let (ck, plen) = (geom.ck(), geom.p());
    let img_len = geom.c * geom.h * geom.w;
    let mut cols = vec![0.0; ck * plen];
    let mut out = vec![0.0; geom.n * img_len];
    for n in 0..geom.n {
        gemm(
            ck,
            geom.o,
            plen,
            MatRef::transposed(w.data(), ck),
            MatRef::row_major(&gy.data()[n * geom.o * plen..(n + 1) * geom.o * plen], plen),
            0.0,
            &mut cols,
        );
        geom.col2im(&cols, &mut out[n * img_len..(n + 1) * img_len]);
    }
    Ok(Tensor::from_parts(geom.in_shape(), out))
}

/// Gradient of `conv2d` with respect to its kernel; batch images summed in order.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    if x.rank() != 4 || gy.rank() != 4 || x.shape()[0] != gy.shape()[0] || x.shape()[1..] != geom.in_shape()[1..] || gy.shape()[1..] != geom.out_shape()[1..] {
        return Err(shape_err(
            "conv_weight_grad",
            format!("input {:?}, grad {:?}, geometry {:?}", x.shape(), gy.shape(), geom),
        ));
    }
    let geom = ConvGeom { n: x.shape()[0], ..*geom };
    let (ck, plen) = (geom.ck(), geom.p());
    let img_len = geom.c * geom.h * geom.w;
    let mut cols = vec![0.0; ck * plen];
    let mut out = vec![0.0; geom.o * ck];
    for n in 0..geom.n {
        geom.im2col(&x.data()[n * img_len..(n + 1) * img_len], &mut cols);
        gemm(
            geom.o,
            plen,
            ck,
            MatRef::row_major(&gy.data()[n * geom.o * plen..(n + 1) * geom.o * plen], plen),
            MatRef::transposed(&cols, plen),
            1.0,
            &mut out,
        );
    }
    Ok(Tensor::from_parts(geom.kernel_shape(), out))
}
