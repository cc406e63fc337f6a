//! Forward evaluation and vector-Jacobian products for every primitive.
//!
//! All kernels are deterministic: parallel sections split work so that each
//! output element is accumulated in a fixed order, so results are
//! bit-identical regardless of thread count.

use crate::error::{Result, TensorError};
use crate::op::{OpAttrs, Primitive};
use crate::scalar::Scalar;
use rayon::prelude::*;

/// Guard floor for division denominators and log arguments.
pub const GUARD_EPS: f64 = 1e-12;

type View<'a, T> = (&'a [T], &'a [usize]);

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ── raw linear algebra ──────────────────────────────────────────────

const PAR_FLOP_THRESHOLD: usize = 1 << 17;

/// C = A(m,k) · B(k,n)
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                let brow = &b[p * n..(p + 1) * n];
                for (cj, bj) in row.iter_mut().zip(brow) {
                    *cj += av * *bj;
                }
            }
        }
    };
    if m > 1 && m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// C = A(m,k) · B(n,k)ᵀ
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cj) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            *cj = acc;
        }
    };
    if m > 1 && m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// C = A(p,m)ᵀ · B(p,n)
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], p: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        for q in 0..p {
            let av = a[q * m + i];
            if av != T::zero() {
                let brow = &b[q * n..(q + 1) * n];
                for (cj, bj) in row.iter_mut().zip(brow) {
                    *cj += av * *bj;
                }
            }
        }
    };
    if m > 1 && p * m * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

// ── broadcasting ────────────────────────────────────────────────────

/// NumPy-style right-aligned broadcast of two shapes.
pub fn broadcast_shape(prim: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::shape(
                prim,
                format!("cannot broadcast {a:?} with {b:?} (dim {i}: {da} vs {db})"),
            ));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides padded to `rank`, zeroed on broadcast dimensions.
fn bcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; rank];
    let offset = rank - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Odometer over the broadcast output space yielding offsets into both inputs.
struct BcastIter {
    shape: Vec<usize>,
    idx: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    oa: usize,
    ob: usize,
    remaining: usize,
    first: bool,
}

impl BcastIter {
    fn new(out_shape: &[usize], a_shape: &[usize], b_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        BcastIter {
            shape: out_shape.to_vec(),
            idx: vec![0; rank],
            sa: bcast_strides(a_shape, rank),
            sb: bcast_strides(b_shape, rank),
            oa: 0,
            ob: 0,
            remaining: numel(out_shape),
            first: true,
        }
    }
}

impl Iterator for BcastIter {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        if self.first {
            self.first = false;
            self.remaining -= 1;
            return Some((self.oa, self.ob));
        }
        for d in (0..self.shape.len()).rev() {
            self.idx[d] += 1;
            self.oa += self.sa[d];
            self.ob += self.sb[d];
            if self.idx[d] < self.shape[d] {
                self.remaining -= 1;
                return Some((self.oa, self.ob));
            }
            self.oa -= self.sa[d] * self.shape[d];
            self.ob -= self.sb[d] * self.shape[d];
            self.idx[d] = 0;
        }
        None
    }
}

fn ew_forward<T: Scalar>(
    prim: &'static str,
    a: View<T>,
    b: View<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>)> {
    let out_shape = broadcast_shape(prim, a.1, b.1)?;
    let n = numel(&out_shape);
    let mut out = Vec::with_capacity(n);
    if a.1 == b.1 {
        out.extend(a.0.iter().zip(b.0).map(|(&x, &y)| f(x, y)));
    } else if b.0.len() == 1 {
        let y = b.0[0];
        out.extend(a.0.iter().map(|&x| f(x, y)));
    } else if a.0.len() == 1 {
        let x = a.0[0];
        out.extend(b.0.iter().map(|&y| f(x, y)));
    } else {
        for (oa, ob) in BcastIter::new(&out_shape, a.1, b.1) {
            out.push(f(a.0[oa], b.0[ob]));
        }
    }
    Ok((out, out_shape))
}

/// Accumulate broadcast-aware input gradients for a binary elementwise op.
/// `da` and `db` map (upstream, a value, b value) to the local gradient term.
fn ew_backward<T: Scalar>(
    a: View<T>,
    b: View<T>,
    out_shape: &[usize],
    out_grad: &[T],
    da: impl Fn(T, T, T) -> T,
    db: impl Fn(T, T, T) -> T,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); a.0.len()];
    let mut gb = vec![T::zero(); b.0.len()];
    if a.1 == b.1 {
        for i in 0..out_grad.len() {
            let g = out_grad[i];
            ga[i] += da(g, a.0[i], b.0[i]);
            gb[i] += db(g, a.0[i], b.0[i]);
        }
    } else {
        for (i, (oa, ob)) in BcastIter::new(out_shape, a.1, b.1).enumerate() {
            let g = out_grad[i];
            ga[oa] += da(g, a.0[oa], b.0[ob]);
            gb[ob] += db(g, a.0[oa], b.0[ob]);
        }
    }
    (ga, gb)
}

#[inline]
fn guard_den<T: Scalar>(b: T) -> T {
    let eps = T::from_f64c(GUARD_EPS);
    if b.abs() < eps {
        if b < T::zero() {
            -eps
        } else {
            eps
        }
    } else {
        b
    }
}

#[inline]
fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ── convolution ─────────────────────────────────────────────────────

pub fn conv_out_extent(h: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = h + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Unfold (C,H,W) into a (C·kh·kw, oh·ow) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * kh * kw * oh * ow];
    let rows = c * kh * kw;
    let fill_row = |r: usize, row: &mut [T]| {
        let ci = r / (kh * kw);
        let dy = (r / kw) % kh;
        let dx = r % kw;
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let iy = (oy * stride + dy) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let src = &plane[iy as usize * w..(iy as usize + 1) * w];
            let dst = &mut row[oy * ow..(oy + 1) * ow];
            for ox in 0..ow {
                let ix = (ox * stride + dx) as isize - pad as isize;
                if ix >= 0 && ix < w as isize {
                    dst[ox] = src[ix as usize];
                }
            }
        }
    };
    if rows > 1 && cols.len() >= PAR_FLOP_THRESHOLD {
        cols.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(r, row)| fill_row(r, row));
    } else {
        for (r, row) in cols.chunks_mut(oh * ow).enumerate() {
            fill_row(r, row);
        }
    }
    cols
}

/// Fold a (C·kh·kw, oh·ow) gradient matrix back onto the (C,H,W) input.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut x = vec![T::zero(); c * h * w];
    for r in 0..c * kh * kw {
        let ci = r / (kh * kw);
        let dy = (r / kw) % kh;
        let dx = r % kw;
        let row = &cols[r * oh * ow..(r + 1) * oh * ow];
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let iy = (oy * stride + dy) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let ix = (ox * stride + dx) as isize - pad as isize;
                if ix >= 0 && ix < w as isize {
                    plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                }
            }
        }
    }
    x
}

fn conv2d_check<'a>(
    x_shape: &'a [usize],
    k_shape: &'a [usize],
    attrs: &OpAttrs,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    if x_shape.len() != 3 || k_shape.len() != 4 {
        return Err(TensorError::shape(
            "conv2d",
            format!("expected input (C,H,W) and kernel (O,C,kh,kw), got {x_shape:?} and {k_shape:?}"),
        ));
    }
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (o, kc, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    if kc != c {
        return Err(TensorError::shape(
            "conv2d",
            format!("kernel expects {kc} input channels, input has {c}"),
        ));
    }
    let oh = conv_out_extent(h, attrs.pad, kh, attrs.stride)
        .ok_or_else(|| TensorError::shape("conv2d", format!("kernel {kh}x{kw} too large for input {h}x{w} with pad {}", attrs.pad)))?;
    let ow = conv_out_extent(w, attrs.pad, kw, attrs.stride)
        .ok_or_else(|| TensorError::shape("conv2d", format!("kernel {kh}x{kw} too large for input {h}x{w} with pad {}", attrs.pad)))?;
    Ok((c, h, w, o, kh, kw, oh, ow))
}

/// Adaptive pooling window along one axis: `[lo, hi)` for output cell `i`.
#[inline]
pub fn adaptive_window(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = i * in_len / out_len;
    let hi = ((i + 1) * in_len + out_len - 1) / out_len;
    (lo, hi)
}

// ── forward dispatch ────────────────────────────────────────────────

pub fn forward<T: Scalar>(
    prim: Primitive,
    inputs: &[View<T>],
    attrs: &OpAttrs,
) -> Result<(Vec<T>, Vec<usize>)> {
    let arity = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(TensorError::shape(
                prim.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    };
    match prim {
        Primitive::Add => {
            arity(2)?;
            ew_forward(prim.name(), inputs[0], inputs[1], |a, b| a + b)
        }
        Primitive::Sub => {
            arity(2)?;
            ew_forward(prim.name(), inputs[0], inputs[1], |a, b| a - b)
        }
        Primitive::Mul => {
            arity(2)?;
            ew_forward(prim.name(), inputs[0], inputs[1], |a, b| a * b)
        }
        Primitive::Div => {
            arity(2)?;
            ew_forward(prim.name(), inputs[0], inputs[1], |a, b| a / guard_den(b))
        }
        Primitive::Neg => {
            arity(1)?;
            Ok((inputs[0].0.iter().map(|&x| -x).collect(), inputs[0].1.to_vec()))
        }
        Primitive::Exp => {
            arity(1)?;
            Ok((inputs[0].0.iter().map(|&x| x.exp()).collect(), inputs[0].1.to_vec()))
        }
        Primitive::Log => {
            arity(1)?;
            let eps = T::from_f64c(GUARD_EPS);
            Ok((
                inputs[0].0.iter().map(|&x| x.max(eps).ln()).collect(),
                inputs[0].1.to_vec(),
            ))
        }
        Primitive::Sqrt => {
            arity(1)?;
            Ok((
                inputs[0].0.iter().map(|&x| x.max(T::zero()).sqrt()).collect(),
                inputs[0].1.to_vec(),
            ))
        }
        Primitive::Relu => {
            arity(1)?;
            Ok((
                inputs[0].0.iter().map(|&x| x.max(T::zero())).collect(),
                inputs[0].1.to_vec(),
            ))
        }
        Primitive::Sigmoid => {
            arity(1)?;
            Ok((
                inputs[0].0.iter().map(|&x| sigmoid_stable(x)).collect(),
                inputs[0].1.to_vec(),
            ))
        }
        Primitive::MatMul => {
            arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.1.len() != 2 || b.1.len() != 2 || a.1[1] != b.1[0] {
                return Err(TensorError::shape(
                    "matmul",
                    format!("incompatible shapes {:?} x {:?}", a.1, b.1),
                ));
            }
            let (m, k, n) = (a.1[0], a.1[1], b.1[1]);
            Ok((matmul(a.0, b.0, m, k, n), vec![m, n]))
        }
        Primitive::Conv2d => {
            arity(2)?;
            let (x, kern) = (inputs[0], inputs[1]);
            let (c, h, w, o, kh, kw, oh, ow) = conv2d_check(x.1, kern.1, attrs)?;
            let cols = im2col(x.0, c, h, w, kh, kw, attrs.stride, attrs.pad, oh, ow);
            let out = matmul(kern.0, &cols, o, c * kh * kw, oh * ow);
            Ok((out, vec![o, oh, ow]))
        }
        Primitive::AvgPool2d => {
            arity(1)?;
            let (x, s) = inputs[0];
            if s.len() != 3 {
                return Err(TensorError::shape("avg_pool2d", format!("expected (C,H,W), got {s:?}")));
            }
            let (oh, ow) = attrs
                .out_hw
                .ok_or_else(|| TensorError::attr("avg_pool2d", "missing output size"))?;
            let (c, h, w) = (s[0], s[1], s[2]);
            if oh == 0 || ow == 0 || oh > h || ow > w {
                return Err(TensorError::shape(
                    "avg_pool2d",
                    format!("output {oh}x{ow} invalid for input {h}x{w}"),
                ));
            }
            let mut out = vec![T::zero(); c * oh * ow];
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for oy in 0..oh {
                    let (y0, y1) = adaptive_window(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = adaptive_window(ox, w, ow);
                        let mut acc = T::zero();
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc += plane[iy * w + ix];
                            }
                        }
                        let count = T::from_f64c(((y1 - y0) * (x1 - x0)) as f64);
                        out[(ci * oh + oy) * ow + ox] = acc / count;
                    }
                }
            }
            Ok((out, vec![c, oh, ow]))
        }
        Primitive::GlobalAvgPool => {
            arity(1)?;
            let (x, s) = inputs[0];
            if s.len() != 3 {
                return Err(TensorError::shape("global_avg_pool", format!("expected (C,H,W), got {s:?}")));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            let denom = T::from_f64c((h * w) as f64);
            let out = (0..c)
                .map(|ci| {
                    let mut acc = T::zero();
                    for &v in &x[ci * h * w..(ci + 1) * h * w] {
                        acc += v;
                    }
                    acc / denom
                })
                .collect();
            Ok((out, vec![c]))
        }
        Primitive::NearestUpsample2d => {
            arity(1)?;
            let (x, s) = inputs[0];
            if s.len() != 3 {
                return Err(TensorError::shape("nearest_upsample2d", format!("expected (C,H,W), got {s:?}")));
            }
            let f = attrs.factor;
            if f == 0 {
                return Err(TensorError::attr("nearest_upsample2d", "factor must be positive"));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            let (nh, nw) = (h * f, w * f);
            let mut out = vec![T::zero(); c * nh * nw];
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                let oplane = &mut out[ci * nh * nw..(ci + 1) * nh * nw];
                for oy in 0..nh {
                    let iy = oy / f;
                    for ox in 0..nw {
                        oplane[oy * nw + ox] = plane[iy * w + ox / f];
                    }
                }
            }
            Ok((out, vec![c, nh, nw]))
        }
        Primitive::Concat => {
            if inputs.is_empty() {
                return Err(TensorError::shape("concat", "no inputs"));
            }
            let axis = attrs.axis;
            let rank = inputs[0].1.len();
            if axis >= rank {
                return Err(TensorError::attr("concat", format!("axis {axis} out of range for rank {rank}")));
            }
            let mut out_shape = inputs[0].1.to_vec();
            let mut axis_total = 0usize;
            for (_, s) in inputs {
                if s.len() != rank {
                    return Err(TensorError::shape("concat", format!("rank mismatch: {:?} vs {s:?}", inputs[0].1)));
                }
                for d in 0..rank {
                    if d != axis && s[d] != out_shape[d] {
                        return Err(TensorError::shape(
                            "concat",
                            format!("dim {d} mismatch: {:?} vs {s:?}", inputs[0].1),
                        ));
                    }
                }
                axis_total += s[axis];
            }
            out_shape[axis] = axis_total;
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let mut out = vec![T::zero(); numel(&out_shape)];
            let out_block = axis_total * inner;
            let mut axis_off = 0usize;
            for (data, s) in inputs {
                let block = s[axis] * inner;
                for o in 0..outer {
                    let src = &data[o * block..(o + 1) * block];
                    let dst = &mut out[o * out_block + axis_off..o * out_block + axis_off + block];
                    dst.copy_from_slice(src);
                }
                axis_off += block;
            }
            Ok((out, out_shape))
        }
        Primitive::GatherRows => {
            arity(1)?;
            let (x, s) = inputs[0];
            if s.len() != 2 {
                return Err(TensorError::shape("gather_rows", format!("expected (M,D), got {s:?}")));
            }
            let idx = attrs
                .indices
                .as_ref()
                .ok_or_else(|| TensorError::attr("gather_rows", "missing index table"))?;
            let (m, d) = (s[0], s[1]);
            let mut out = Vec::with_capacity(idx.len() * d);
            for &i in idx.iter() {
                if i >= m {
                    return Err(TensorError::attr("gather_rows", format!("index {i} out of range for {m} rows")));
                }
                out.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
            Ok((out, vec![idx.len(), d]))
        }
        Primitive::ReduceSum => {
            arity(1)?;
            let mut acc = T::zero();
            for &v in inputs[0].0 {
                acc += v;
            }
            Ok((vec![acc], vec![1]))
        }
        Primitive::ReduceMean => {
            arity(1)?;
            let n = inputs[0].0.len();
            if n == 0 {
                return Err(TensorError::shape("reduce_mean", "empty input"));
            }
            let mut acc = T::zero();
            for &v in inputs[0].0 {
                acc += v;
            }
            Ok((vec![acc / T::from_f64c(n as f64)], vec![1]))
        }
        Primitive::MaxStack => {
            arity(1)?;
            let (x, s) = inputs[0];
            let axis = attrs.axis;
            if axis >= s.len() {
                return Err(TensorError::attr("max_stack", format!("axis {axis} out of range for shape {s:?}")));
            }
            if s[axis] == 0 {
                return Err(TensorError::shape("max_stack", "cannot reduce over empty axis"));
            }
            let outer: usize = s[..axis].iter().product();
            let len = s[axis];
            let inner: usize = s[axis + 1..].iter().product();
            let mut out_shape = s.to_vec();
            out_shape.remove(axis);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = x[o * len * inner + i];
                    for t in 1..len {
                        let v = x[(o * len + t) * inner + i];
                        if v > best {
                            best = v;
                        }
                    }
                    out[o * inner + i] = best;
                }
            }
            Ok((out, out_shape))
        }
        Primitive::LayerNorm => {
            arity(3)?;
            let (x, xs) = inputs[0];
            let (gamma, gs) = inputs[1];
            let (beta, bs) = inputs[2];
            if xs.is_empty() {
                return Err(TensorError::shape("layer_norm", "input must have rank >= 1"));
            }
            let d = xs[xs.len() - 1];
            if gs != [d] || bs != [d] {
                return Err(TensorError::shape(
                    "layer_norm",
                    format!("affine params must have shape [{d}], got {gs:?} and {bs:?}"),
                ));
            }
            let eps = T::from_f64c(attrs.eps);
            let rows = x.len() / d;
            let mut out = vec![T::zero(); x.len()];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mut mean = T::zero();
                for &v in row {
                    mean += v;
                }
                mean = mean / T::from_f64c(d as f64);
                let mut var = T::zero();
                for &v in row {
                    let c = v - mean;
                    var += c * c;
                }
                var = var / T::from_f64c(d as f64);
                let rstd = T::one() / (var + eps).sqrt();
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
                }
            }
            Ok((out, xs.to_vec()))
        }
        Primitive::Reshape => {
            arity(1)?;
            let target = attrs
                .shape
                .as_ref()
                .ok_or_else(|| TensorError::attr("reshape", "missing target shape"))?;
            if numel(target) != inputs[0].0.len() {
                return Err(TensorError::shape(
                    "reshape",
                    format!("cannot reshape {:?} into {target:?}", inputs[0].1),
                ));
            }
            Ok((inputs[0].0.to_vec(), target.clone()))
        }
        Primitive::Transpose2d => {
            arity(1)?;
            let (x, s) = inputs[0];
            if s.len() != 2 {
                return Err(TensorError::shape("transpose2d", format!("expected rank 2, got {s:?}")));
            }
            Ok((transpose(x, s[0], s[1]), vec![s[1], s[0]]))
        }
    }
}

// ── backward dispatch ───────────────────────────────────────────────

/// Gradients of each input given the upstream gradient of the output.
/// Entries are `None` only when the corresponding input needs no gradient
/// (the caller filters afterwards; kernels compute all of them).
pub fn input_grads<T: Scalar>(
    prim: Primitive,
    inputs: &[View<T>],
    out: View<T>,
    out_grad: &[T],
    attrs: &OpAttrs,
) -> Result<Vec<Vec<T>>> {
    match prim {
        Primitive::Add => {
            let (ga, gb) = ew_backward(inputs[0], inputs[1], out.1, out_grad, |g, _, _| g, |g, _, _| g);
            Ok(vec![ga, gb])
        }
        Primitive::Sub => {
            let (ga, gb) = ew_backward(inputs[0], inputs[1], out.1, out_grad, |g, _, _| g, |g, _, _| -g);
            Ok(vec![ga, gb])
        }
        Primitive::Mul => {
            let (ga, gb) =
                ew_backward(inputs[0], inputs[1], out.1, out_grad, |g, _, b| g * b, |g, a, _| g * a);
            Ok(vec![ga, gb])
        }
        Primitive::Div => {
            let (ga, gb) = ew_backward(
                inputs[0],
                inputs[1],
                out.1,
                out_grad,
                |g, _, b| g / guard_den(b),
                |g, a, b| {
                    let d = guard_den(b);
                    -g * a / (d * d)
                },
            );
            Ok(vec![ga, gb])
        }
        Primitive::Neg => Ok(vec![out_grad.iter().map(|&g| -g).collect()]),
        Primitive::Exp => Ok(vec![out_grad.iter().zip(out.0).map(|(&g, &y)| g * y).collect()]),
        Primitive::Log => {
            let eps = T::from_f64c(GUARD_EPS);
            Ok(vec![out_grad
                .iter()
                .zip(inputs[0].0)
                .map(|(&g, &x)| if x >= eps { g / x } else { T::zero() })
                .collect()])
        }
        Primitive::Sqrt => Ok(vec![out_grad
            .iter()
            .zip(inputs[0].0.iter().zip(out.0))
            .map(|(&g, (&x, &y))| {
                if x > T::zero() {
                    g * T::from_f64c(0.5) / y
                } else {
                    T::zero()
                }
            })
            .collect()]),
        Primitive::Relu => Ok(vec![out_grad
            .iter()
            .zip(inputs[0].0)
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect()]),
        Primitive::Sigmoid => Ok(vec![out_grad
            .iter()
            .zip(out.0)
            .map(|(&g, &y)| g * y * (T::one() - y))
            .collect()]),
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.1[0], a.1[1], b.1[1]);
            let ga = matmul_nt(out_grad, b.0, m, n, k);
            let gb = matmul_tn(a.0, out_grad, m, k, n);
            Ok(vec![ga, gb])
        }
        Primitive::Conv2d => {
            let (x, kern) = (inputs[0], inputs[1]);
            let (c, h, w, o, kh, kw, oh, ow) = conv2d_check(x.1, kern.1, attrs)?;
            let ckk = c * kh * kw;
            let cols = im2col(x.0, c, h, w, kh, kw, attrs.stride, attrs.pad, oh, ow);
            // dK = dOut (o, ohw) · colsᵀ (ohw, ckk)
            let gk = matmul_nt(out_grad, &cols, o, oh * ow, ckk);
            // dcols = Kᵀ (ckk, o) · dOut (o, ohw)
            let gcols = matmul_tn(kern.0, out_grad, o, ckk, oh * ow);
            let gx = col2im(&gcols, c, h, w, kh, kw, attrs.stride, attrs.pad, oh, ow);
            Ok(vec![gx, gk])
        }
        Primitive::AvgPool2d => {
            let (_, s) = inputs[0];
            let (c, h, w) = (s[0], s[1], s[2]);
            let (oh, ow) = attrs.out_hw.expect("validated in forward");
            let mut gx = vec![T::zero(); c * h * w];
            for ci in 0..c {
                let gplane = &mut gx[ci * h * w..(ci + 1) * h * w];
                for oy in 0..oh {
                    let (y0, y1) = adaptive_window(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = adaptive_window(ox, w, ow);
                        let count = T::from_f64c(((y1 - y0) * (x1 - x0)) as f64);
                        let g = out_grad[(ci * oh + oy) * ow + ox] / count;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                gplane[iy * w + ix] += g;
                            }
                        }
                    }
                }
            }
            Ok(vec![gx])
        }
        Primitive::GlobalAvgPool => {
            let (_, s) = inputs[0];
            let (c, h, w) = (s[0], s[1], s[2]);
            let denom = T::from_f64c((h * w) as f64);
            let mut gx = vec![T::zero(); c * h * w];
            for ci in 0..c {
                let g = out_grad[ci] / denom;
                for v in &mut gx[ci * h * w..(ci + 1) * h * w] {
                    *v = g;
                }
            }
            Ok(vec![gx])
        }
        Primitive::NearestUpsample2d => {
            let (_, s) = inputs[0];
            let (c, h, w) = (s[0], s[1], s[2]);
            let f = attrs.factor;
            let (nh, nw) = (h * f, w * f);
            let mut gx = vec![T::zero(); c * h * w];
            for ci in 0..c {
                let gplane = &mut gx[ci * h * w..(ci + 1) * h * w];
                let oplane = &out_grad[ci * nh * nw..(ci + 1) * nh * nw];
                for oy in 0..nh {
                    let iy = oy / f;
                    for ox in 0..nw {
                        gplane[iy * w + ox / f] += oplane[oy * nw + ox];
                    }
                }
            }
            Ok(vec![gx])
        }
        Primitive::Concat => {
            let axis = attrs.axis;
            let out_shape = out.1;
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let out_block = out_shape[axis] * inner;
            let mut grads = Vec::with_capacity(inputs.len());
            let mut axis_off = 0usize;
            for (_, s) in inputs {
                let block = s[axis] * inner;
                let mut g = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    let src = &out_grad[o * out_block + axis_off..o * out_block + axis_off + block];
                    g[o * block..(o + 1) * block].copy_from_slice(src);
                }
                axis_off += block;
                grads.push(g);
            }
            Ok(grads)
        }
        Primitive::GatherRows => {
            let (_, s) = inputs[0];
            let (m, d) = (s[0], s[1]);
            let idx = attrs.indices.as_ref().expect("validated in forward");
            let mut gx = vec![T::zero(); m * d];
            for (row, &i) in idx.iter().enumerate() {
                let src = &out_grad[row * d..(row + 1) * d];
                let dst = &mut gx[i * d..(i + 1) * d];
                for (dv, sv) in dst.iter_mut().zip(src) {
                    *dv += *sv;
                }
            }
            Ok(vec![gx])
        }
        Primitive::ReduceSum => {
            let g = out_grad[0];
            Ok(vec![vec![g; inputs[0].0.len()]])
        }
        Primitive::ReduceMean => {
            let n = inputs[0].0.len();
            let g = out_grad[0] / T::from_f64c(n as f64);
            Ok(vec![vec![g; n]])
        }
        Primitive::MaxStack => {
            let (x, s) = inputs[0];
            let axis = attrs.axis;
            let outer: usize = s[..axis].iter().product();
            let len = s[axis];
            let inner: usize = s[axis + 1..].iter().product();
            let mut gx = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = x[o * len * inner + i];
                    let mut arg = 0usize;
                    for t in 1..len {
                        let v = x[(o * len + t) * inner + i];
                        if v > best {
                            best = v;
                            arg = t;
                        }
                    }
                    gx[(o * len + arg) * inner + i] += out_grad[o * inner + i];
                }
            }
            Ok(vec![gx])
        }
        Primitive::LayerNorm => {
            let (x, xs) = inputs[0];
            let (gamma, _) = inputs[1];
            let d = xs[xs.len() - 1];
            let rows = x.len() / d;
            let eps = T::from_f64c(attrs.eps);
            let dn = T::from_f64c(d as f64);
            let mut gx = vec![T::zero(); x.len()];
            let mut ggamma = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let grow = &out_grad[r * d..(r + 1) * d];
                let mut mean = T::zero();
                for &v in row {
                    mean += v;
                }
                mean = mean / dn;
                let mut var = T::zero();
                for &v in row {
                    let c = v - mean;
                    var += c * c;
                }
                var = var / dn;
                let rstd = T::one() / (var + eps).sqrt();
                // xhat_j = (x_j - mean) * rstd ; dy_j = grow_j * gamma_j
                let mut mean_dy = T::zero();
                let mut mean_dy_xhat = T::zero();
                for j in 0..d {
                    let xhat = (row[j] - mean) * rstd;
                    let dy = grow[j] * gamma[j];
                    mean_dy += dy;
                    mean_dy_xhat += dy * xhat;
                    ggamma[j] += grow[j] * xhat;
                    gbeta[j] += grow[j];
                }
                mean_dy = mean_dy / dn;
                mean_dy_xhat = mean_dy_xhat / dn;
                let gxrow = &mut gx[r * d..(r + 1) * d];
                for j in 0..d {
                    let xhat = (row[j] - mean) * rstd;
                    let dy = grow[j] * gamma[j];
                    gxrow[j] = rstd * (dy - mean_dy - xhat * mean_dy_xhat);
                }
            }
            Ok(vec![gx, ggamma, gbeta])
        }
        Primitive::Reshape => Ok(vec![out_grad.to_vec()]),
        Primitive::Transpose2d => {
            let (_, s) = inputs[0];
            Ok(vec![transpose(out_grad, s[1], s[0])])
        }
    }
}
