//! Elementwise, contraction, reduction, and movement operations.
//!
//! Conventions shared by every op here:
//! * broadcasting is numpy-style: shapes align from the right, an extent of
//!   one stretches, anything else must match exactly;
//! * reductions visit elements in row-major order, and `max` resolves ties
//!   to the first position in that order;
//! * every op produces a fresh tensor (inputs are never mutated).

use crate::error::{Error, Result};
use crate::tape::{record, BinaryKind, OpRecord, ReduceKind, UnaryKind};
use crate::tensor::{contiguous_strides, numel_of, Element, Tensor};

// ── strided iteration ────────────────────────────────────────────────

/// Walks `shape` in row-major order calling `f(flat, ia, ib)` where `ia`/`ib`
/// advance by the given per-axis strides (zero stride = broadcast axis).
pub(crate) fn for_each_2strided(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    let total = numel_of(shape);
    if rank == 0 {
        if total == 1 {
            f(0, 0, 0);
        }
        return;
    }
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, ia, ib);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
            ia -= sa[ax] * shape[ax];
            ib -= sb[ax] * shape[ax];
        }
    }
}

/// Strides for reading a tensor of `shape` as if broadcast to rank
/// `out_rank` (left-padded with ones; stretched axes get stride zero).
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - shape.len();
    let strides = contiguous_strides(shape);
    let mut out = vec![0usize; out_shape.len()];
    for (ax, &extent) in shape.iter().enumerate() {
        out[pad + ax] = if extent == 1 { 0 } else { strides[ax] };
    }
    out
}

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize], context: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for ax in 0..rank {
        let ea = if ax + a.len() >= rank { a[ax + a.len() - rank] } else { 1 };
        let eb = if ax + b.len() >= rank { b[ax + b.len() - rank] } else { 1 };
        out[ax] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    context,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

// ── unary ────────────────────────────────────────────────────────────

fn sigmoid_val<T: Element>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

pub(crate) fn unary_forward<T: Element>(kind: UnaryKind, x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| match kind {
            UnaryKind::Relu => {
                if v > T::ZERO {
                    v
                } else {
                    T::ZERO
                }
            }
            UnaryKind::Silu => v * sigmoid_val(v),
            UnaryKind::Sigmoid => sigmoid_val(v),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Ln => v.ln(),
            UnaryKind::Sqrt => v.sqrt(),
        })
        .collect()
}

pub(crate) fn unary_backward<T: Element>(
    kind: UnaryKind,
    x: &[T],
    y: &[T],
    grad: &[T],
    gx: &mut [T],
) {
    let two = T::from_f64(2.0);
    for i in 0..gx.len() {
        let d = match kind {
            // Zero subgradient at the kink.
            UnaryKind::Relu => {
                if x[i] > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            UnaryKind::Silu => {
                let s = sigmoid_val(x[i]);
                s * (T::ONE + x[i] * (T::ONE - s))
            }
            UnaryKind::Sigmoid => y[i] * (T::ONE - y[i]),
            UnaryKind::Exp => y[i],
            UnaryKind::Ln => T::ONE / x[i],
            UnaryKind::Sqrt => T::ONE / (two * y[i]),
        };
        gx[i] += grad[i] * d;
    }
}

// ── binary with broadcasting ─────────────────────────────────────────

fn binary_apply<T: Element>(kind: BinaryKind, a: T, b: T) -> T {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
    }
}

pub(crate) fn binary_forward<T: Element>(
    kind: BinaryKind,
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
) -> Vec<T> {
    let mut out = vec![T::ZERO; numel_of(out_shape)];
    if a_shape == out_shape && b_shape == out_shape {
        for i in 0..out.len() {
            out[i] = binary_apply(kind, a[i], b[i]);
        }
        return out;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    for_each_2strided(out_shape, &sa, &sb, |flat, ia, ib| {
        out[flat] = binary_apply(kind, a[ia], b[ib]);
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn binary_backward_lhs<T: Element>(
    kind: BinaryKind,
    _a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    grad: &[T],
    out_shape: &[usize],
    ga: &mut [T],
) {
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    for_each_2strided(out_shape, &sa, &sb, |flat, ia, ib| {
        let g = grad[flat];
        ga[ia] += match kind {
            BinaryKind::Add | BinaryKind::Sub => g,
            BinaryKind::Mul => g * b[ib],
            BinaryKind::Div => g / b[ib],
        };
    });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn binary_backward_rhs<T: Element>(
    kind: BinaryKind,
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    grad: &[T],
    out_shape: &[usize],
    gb: &mut [T],
) {
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    for_each_2strided(out_shape, &sa, &sb, |flat, ia, ib| {
        let g = grad[flat];
        gb[ib] += match kind {
            BinaryKind::Add => g,
            BinaryKind::Sub => -g,
            BinaryKind::Mul => g * a[ia],
            BinaryKind::Div => -g * a[ia] / (b[ib] * b[ib]),
        };
    });
}

// ── matmul (rank 2, or rank 3 with a leading batch axis) ─────────────

fn mm_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &alv) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += alv * brow[j];
            }
        }
    }
}

/// `ga += g · bᵀ` where g is [m,n], b is [k,n].
fn mm_nt_acc<T: Element>(g: &[T], b: &[T], m: usize, k: usize, n: usize, ga: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let garow = &mut ga[i * k..(i + 1) * k];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut s = T::ZERO;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            garow[l] += s;
        }
    }
}

/// `gb += aᵀ · g` where a is [m,k], g is [m,n].
fn mm_tn_acc<T: Element>(a: &[T], g: &[T], m: usize, k: usize, n: usize, gb: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (l, &alv) in arow.iter().enumerate() {
            let gbrow = &mut gb[l * n..(l + 1) * n];
            for j in 0..n {
                gbrow[j] += alv * grow[j];
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    batched: bool,
}

fn matmul_dims(a_shape: &[usize], b_shape: &[usize]) -> Result<MatmulDims> {
    match (a_shape.len(), b_shape.len()) {
        (2, 2) => {
            if a_shape[1] != b_shape[0] {
                return Err(Error::ShapeMismatch {
                    context: "matmul",
                    lhs: a_shape.to_vec(),
                    rhs: b_shape.to_vec(),
                });
            }
            Ok(MatmulDims {
                batch: 1,
                m: a_shape[0],
                k: a_shape[1],
                n: b_shape[1],
                batched: false,
            })
        }
        (3, 3) => {
            if a_shape[0] != b_shape[0] || a_shape[2] != b_shape[1] {
                return Err(Error::ShapeMismatch {
                    context: "matmul",
                    lhs: a_shape.to_vec(),
                    rhs: b_shape.to_vec(),
                });
            }
            Ok(MatmulDims {
                batch: a_shape[0],
                m: a_shape[1],
                k: a_shape[2],
                n: b_shape[2],
                batched: true,
            })
        }
        _ => Err(Error::ShapeMismatch {
            context: "matmul (rank must be 2 or 3)",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        }),
    }
}

pub(crate) fn matmul_forward<T: Element>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
) -> Result<(Vec<T>, Vec<usize>)> {
    let d = matmul_dims(a_shape, b_shape)?;
    let mut out = vec![T::ZERO; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        mm_nn(
            &a[bi * d.m * d.k..],
            &b[bi * d.k * d.n..],
            d.m,
            d.k,
            d.n,
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
        );
    }
    let out_shape = if d.batched {
        vec![d.batch, d.m, d.n]
    } else {
        vec![d.m, d.n]
    };
    Ok((out, out_shape))
}

pub(crate) fn matmul_backward_lhs<T: Element>(
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    grad: &[T],
    ga: &mut [T],
) {
    let d = matmul_dims(a_shape, b_shape).expect("validated in forward");
    for bi in 0..d.batch {
        mm_nt_acc(
            &grad[bi * d.m * d.n..],
            &b[bi * d.k * d.n..],
            d.m,
            d.k,
            d.n,
            &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k],
        );
    }
}

pub(crate) fn matmul_backward_rhs<T: Element>(
    a: &[T],
    a_shape: &[usize],
    b_shape: &[usize],
    grad: &[T],
    gb: &mut [T],
) {
    let d = matmul_dims(a_shape, b_shape).expect("validated in forward");
    for bi in 0..d.batch {
        mm_tn_acc(
            &a[bi * d.m * d.k..],
            &grad[bi * d.m * d.n..],
            d.m,
            d.k,
            d.n,
            &mut gb[bi * d.k * d.n..(bi + 1) * d.k * d.n],
        );
    }
}

// ── softmax ──────────────────────────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically stable softmax (per-group max subtraction).
pub(crate) fn softmax_forward<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut hi = x[base];
            for j in 1..len {
                let v = x[base + j * inner];
                if v > hi {
                    hi = v;
                }
            }
            let mut sum = T::ZERO;
            for j in 0..len {
                let e = (x[base + j * inner] - hi).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Element>(
    y: &[T],
    shape: &[usize],
    axis: usize,
    grad: &[T],
    gx: &mut [T],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::ZERO;
            for j in 0..len {
                let p = base + j * inner;
                dot += grad[p] * y[p];
            }
            for j in 0..len {
                let p = base + j * inner;
                gx[p] += y[p] * (grad[p] - dot);
            }
        }
    }
}

// ── reductions ───────────────────────────────────────────────────────

fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    for &ax in axes {
        if ax >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis: ax,
                rank: shape.len(),
            });
        }
        if seen[ax] {
            return Err(Error::invalid(format!("duplicate reduce axis {ax}")));
        }
        seen[ax] = true;
    }
    Ok(())
}

fn keepdims_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out = shape.to_vec();
    for &ax in axes {
        out[ax] = 1;
    }
    out
}

pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize], keep_dims: bool) -> Vec<usize> {
    if keep_dims {
        keepdims_shape(shape, axes)
    } else {
        shape
            .iter()
            .enumerate()
            .filter(|(ax, _)| !axes.contains(ax))
            .map(|(_, &e)| e)
            .collect()
    }
}

fn group_size(shape: &[usize], axes: &[usize]) -> usize {
    axes.iter().map(|&ax| shape[ax]).product()
}

pub(crate) fn reduce_forward<T: Element>(
    kind: ReduceKind,
    x: &[T],
    shape: &[usize],
    axes: &[usize],
) -> Vec<T> {
    let kshape = keepdims_shape(shape, axes);
    let out_len = numel_of(&kshape);
    let sa = contiguous_strides(shape);
    let sb = broadcast_strides(&kshape, shape);
    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            let mut out = vec![T::ZERO; out_len];
            for_each_2strided(shape, &sa, &sb, |_, ia, ib| {
                out[ib] += x[ia];
            });
            if kind == ReduceKind::Mean {
                let inv = T::from_f64(1.0 / group_size(shape, axes) as f64);
                for v in out.iter_mut() {
                    *v = *v * inv;
                }
            }
            out
        }
        ReduceKind::Max => {
            // Row-major scan with strict `>` keeps the first maximum.
            let mut out = vec![T::ZERO; out_len];
            let mut init = vec![false; out_len];
            for_each_2strided(shape, &sa, &sb, |_, ia, ib| {
                if !init[ib] || x[ia] > out[ib] {
                    out[ib] = x[ia];
                    init[ib] = true;
                }
            });
            out
        }
    }
}

pub(crate) fn reduce_backward<T: Element>(
    kind: ReduceKind,
    x: &[T],
    shape: &[usize],
    axes: &[usize],
    grad: &[T],
    gx: &mut [T],
) {
    let kshape = keepdims_shape(shape, axes);
    let sa = contiguous_strides(shape);
    let sb = broadcast_strides(&kshape, shape);
    match kind {
        ReduceKind::Sum => {
            for_each_2strided(shape, &sa, &sb, |_, ia, ib| {
                gx[ia] += grad[ib];
            });
        }
        ReduceKind::Mean => {
            let inv = T::from_f64(1.0 / group_size(shape, axes) as f64);
            for_each_2strided(shape, &sa, &sb, |_, ia, ib| {
                gx[ia] += grad[ib] * inv;
            });
        }
        ReduceKind::Max => {
            // Recompute the first-argmax of each group, then route grads.
            let out_len = numel_of(&kshape);
            let mut best = vec![T::ZERO; out_len];
            let mut arg = vec![usize::MAX; out_len];
            for_each_2strided(shape, &sa, &sb, |_, ia, ib| {
                if arg[ib] == usize::MAX || x[ia] > best[ib] {
                    best[ib] = x[ia];
                    arg[ib] = ia;
                }
            });
            for ib in 0..out_len {
                gx[arg[ib]] += grad[ib];
            }
        }
    }
}

// ── movement ─────────────────────────────────────────────────────────

pub(crate) fn permute_forward<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&ax| shape[ax]).collect();
    let in_strides = contiguous_strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&ax| in_strides[ax]).collect();
    let mut out = vec![T::ZERO; x.len()];
    let zero = vec![0usize; out_shape.len()];
    for_each_2strided(&out_shape, &src_strides, &zero, |flat, src, _| {
        out[flat] = x[src];
    });
    (out, out_shape)
}

pub(crate) fn permute_backward<T: Element>(
    in_shape: &[usize],
    perm: &[usize],
    grad: &[T],
    gx: &mut [T],
) {
    let out_shape: Vec<usize> = perm.iter().map(|&ax| in_shape[ax]).collect();
    let in_strides = contiguous_strides(in_shape);
    let src_strides: Vec<usize> = perm.iter().map(|&ax| in_strides[ax]).collect();
    let zero = vec![0usize; out_shape.len()];
    for_each_2strided(&out_shape, &src_strides, &zero, |flat, src, _| {
        gx[src] += grad[flat];
    });
}

pub(crate) fn slice_axis_forward<T: Element>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> (Vec<T>, Vec<usize>) {
    let (outer, extent, inner) = axis_split(shape, axis);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = vec![T::ZERO; outer * len * inner];
    for o in 0..outer {
        let src = o * extent * inner + start * inner;
        let dst = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
    }
    (out, out_shape)
}

pub(crate) fn slice_axis_backward<T: Element>(
    in_shape: &[usize],
    out_shape: &[usize],
    axis: usize,
    start: usize,
    grad: &[T],
    gx: &mut [T],
) {
    let (outer, extent, inner) = axis_split(in_shape, axis);
    let len = out_shape[axis];
    for o in 0..outer {
        let dst = o * extent * inner + start * inner;
        let src = o * len * inner;
        for i in 0..len * inner {
            gx[dst + i] += grad[src + i];
        }
    }
}

pub(crate) fn concat_forward<T: Element>(
    parts: &[(&[T], &[usize])],
    axis: usize,
    out_shape: &[usize],
) -> Vec<T> {
    let (outer, total, inner) = axis_split(out_shape, axis);
    let mut out = vec![T::ZERO; outer * total * inner];
    let mut offset = 0usize;
    for (data, shape) in parts {
        let extent = shape[axis];
        for o in 0..outer {
            let src = o * extent * inner;
            let dst = o * total * inner + offset * inner;
            out[dst..dst + extent * inner].copy_from_slice(&data[src..src + extent * inner]);
        }
        offset += extent;
    }
    out
}

pub(crate) fn concat_backward_part<T: Element>(
    out_shape: &[usize],
    part_shape: &[usize],
    axis: usize,
    offset: usize,
    grad: &[T],
    gpart: &mut [T],
) {
    let (outer, total, inner) = axis_split(out_shape, axis);
    let extent = part_shape[axis];
    for o in 0..outer {
        let src = o * total * inner + offset * inner;
        let dst = o * extent * inner;
        for i in 0..extent * inner {
            gpart[dst + i] += grad[src + i];
        }
    }
}

// ── public tensor methods ────────────────────────────────────────────

impl<T: Element> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinaryKind, context: &'static str) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes(self.shape(), other.shape(), context)?;
        let out = binary_forward(
            kind,
            self.data(),
            self.shape(),
            other.data(),
            other.shape(),
            &out_shape,
        );
        record(&[self, other], out_shape, out, |ids| OpRecord::Binary {
            kind,
            lhs: ids[0],
            rhs: ids[1],
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    fn unary(&self, kind: UnaryKind) -> Tensor<T> {
        let out = unary_forward(kind, self.data());
        record(&[self], self.shape().to_vec(), out, |ids| OpRecord::Unary {
            kind,
            input: ids[0],
        })
        .expect("single-input op cannot mismatch tapes")
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(UnaryKind::Relu)
    }

    pub fn silu(&self) -> Tensor<T> {
        self.unary(UnaryKind::Silu)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(UnaryKind::Ln)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(UnaryKind::Sqrt)
    }

    /// `x * scale + offset` with compile-time constants.
    pub fn affine(&self, scale: f64, offset: f64) -> Tensor<T> {
        let s = T::from_f64(scale);
        let o = T::from_f64(offset);
        let out = self.data().iter().map(|&v| v * s + o).collect();
        record(&[self], self.shape().to_vec(), out, |ids| OpRecord::Affine {
            input: ids[0],
            scale,
        })
        .expect("single-input op cannot mismatch tapes")
    }

    /// Elementwise `max(x, min)`. Gradient passes only where `x > min`.
    pub fn clamp_min(&self, min: f64) -> Tensor<T> {
        let m = T::from_f64(min);
        let out = self
            .data()
            .iter()
            .map(|&v| if v > m { v } else { m })
            .collect();
        record(&[self], self.shape().to_vec(), out, |ids| OpRecord::ClampMin {
            input: ids[0],
            min,
        })
        .expect("single-input op cannot mismatch tapes")
    }

    /// Matrix product: `[m,k]·[k,n]`, or `[b,m,k]·[b,k,n]` batched.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, out_shape) =
            matmul_forward(self.data(), self.shape(), other.data(), other.shape())?;
        record(&[self, other], out_shape, out, |ids| OpRecord::Matmul {
            lhs: ids[0],
            rhs: ids[1],
        })
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let out = softmax_forward(self.data(), self.shape(), axis);
        record(&[self], self.shape().to_vec(), out, |ids| OpRecord::Softmax {
            input: ids[0],
            axis,
        })
    }

    fn reduce(&self, kind: ReduceKind, axes: &[usize], keep_dims: bool) -> Result<Tensor<T>> {
        validate_axes(self.shape(), axes)?;
        let out = reduce_forward(kind, self.data(), self.shape(), axes);
        let out_shape = reduced_shape(self.shape(), axes, keep_dims);
        record(&[self], out_shape, out, |ids| OpRecord::Reduce {
            kind,
            input: ids[0],
            axes: axes.to_vec(),
        })
    }

    pub fn sum_axes(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Sum, axes, keep_dims)
    }

    pub fn mean_axes(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Mean, axes, keep_dims)
    }

    pub fn max_axes(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Max, axes, keep_dims)
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(ReduceKind::Sum, &axes, false)
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(ReduceKind::Mean, &axes, false)
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                context: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        // Row-major data is identical; share the buffer.
        crate::tape::record_arc(&[self], shape.to_vec(), self.data_arc(), |ids| {
            OpRecord::Reshape { input: ids[0] }
        })
    }

    /// Axis permutation with a real copy, e.g. `[B,C,N].permute(&[0,2,1])`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        if perm.len() != self.rank() {
            return Err(Error::invalid(format!(
                "permutation {perm:?} does not match rank {}",
                self.rank()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &ax in perm {
            if ax >= perm.len() || seen[ax] {
                return Err(Error::invalid(format!("invalid permutation {perm:?}")));
            }
            seen[ax] = true;
        }
        let (out, out_shape) = permute_forward(self.data(), self.shape(), perm);
        record(&[self], out_shape, out, |ids| OpRecord::Permute {
            input: ids[0],
            perm: perm.to_vec(),
        })
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        if len == 0 || start + len > self.shape()[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} with extent {}",
                start + len,
                self.shape()[axis]
            )));
        }
        let (out, out_shape) = slice_axis_forward(self.data(), self.shape(), axis, start, len);
        record(&[self], out_shape, out, |ids| OpRecord::SliceAxis {
            input: ids[0],
            axis,
            start,
        })
    }
}

/// Concatenates tensors along `axis`; all other extents must match.
pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: first.rank(),
        });
    }
    let mut out_shape = first.shape().to_vec();
    for part in &parts[1..] {
        if part.rank() != first.rank() {
            return Err(Error::ShapeMismatch {
                context: "concat",
                lhs: first.shape().to_vec(),
                rhs: part.shape().to_vec(),
            });
        }
        for ax in 0..first.rank() {
            if ax != axis && part.shape()[ax] != out_shape[ax] {
                return Err(Error::ShapeMismatch {
                    context: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: part.shape().to_vec(),
                });
            }
        }
        out_shape[axis] += part.shape()[axis];
    }
    let views: Vec<(&[T], &[usize])> = parts.iter().map(|p| (p.data(), p.shape())).collect();
    let out = concat_forward(&views, axis, &out_shape);
    record(parts, out_shape, out, |ids| OpRecord::Concat {
        inputs: ids.to_vec(),
        axis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol * (1.0 + e.abs()),
                "index {i}: got {a}, want {e}"
            );
        }
    }

    #[test]
    fn add_broadcasts_trailing_axis() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_close(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0], 0.0);
    }

    #[test]
    fn mul_broadcasts_both_sides() {
        let a = t(&[2, 1], &[2.0, 3.0]);
        let b = t(&[1, 3], &[1.0, 10.0, 100.0]);
        let c = a.mul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_close(c.data(), &[2.0, 20.0, 200.0, 3.0, 30.0, 300.0], 0.0);
    }

    #[test]
    fn scalar_broadcasts_to_any_shape() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = Tensor::scalar(0.5);
        let c = a.mul(&s).unwrap();
        assert_close(c.data(), &[0.5, 1.0, 1.5, 2.0], 0.0);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn sub_and_div_values() {
        let a = t(&[2], &[6.0, 9.0]);
        let b = t(&[2], &[2.0, 3.0]);
        assert_close(a.sub(&b).unwrap().data(), &[4.0, 6.0], 0.0);
        assert_close(a.div(&b).unwrap().data(), &[3.0, 3.0], 0.0);
    }

    #[test]
    fn matmul_2d_known_values() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_close(c.data(), &[58.0, 64.0, 139.0, 154.0], 1e-12);
    }

    #[test]
    fn matmul_batched_matches_per_batch() {
        let a = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let b = t(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let c = a.matmul(&b).unwrap();
        assert_close(
            c.data(),
            &[1.0, 2.0, 3.0, 4.0, 10.0, 12.0, 14.0, 16.0],
            1e-12,
        );
    }

    #[test]
    fn matmul_rejects_bad_dims() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(a.matmul(&b).is_err());
        let c = t(&[2, 2, 2], &[0.0; 8]);
        let d = t(&[3, 2, 2], &[0.0; 12]);
        assert!(c.matmul(&d).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_closed_form() {
        let x = t(&[2, 2], &[0.0, 2f64.ln(), 1000.0, 1000.0]);
        let y = x.softmax(1).unwrap();
        assert_close(&y.data()[..2], &[1.0 / 3.0, 2.0 / 3.0], 1e-12);
        // Large equal inputs must not overflow.
        assert_close(&y.data()[2..], &[0.5, 0.5], 1e-12);
    }

    #[test]
    fn reductions_match_hand_values() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = x.sum_axes(&[1], false).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_close(s.data(), &[6.0, 15.0], 0.0);
        let m = x.mean_axes(&[0], true).unwrap();
        assert_eq!(m.shape(), &[1, 3]);
        assert_close(m.data(), &[2.5, 3.5, 4.5], 1e-12);
        let mx = x.max_axes(&[0, 1], false).unwrap();
        assert_eq!(mx.shape(), &[] as &[usize]);
        assert_close(mx.data(), &[6.0], 0.0);
        assert_close(x.sum_all().unwrap().data(), &[21.0], 0.0);
        assert_close(x.mean_all().unwrap().data(), &[3.5], 1e-12);
    }

    #[test]
    fn permute_transposes_values() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_close(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0], 0.0);
        let back = y.permute(&[1, 0]).unwrap();
        assert_close(back.data(), x.data(), 0.0);
    }

    #[test]
    fn permute_rejects_non_permutations() {
        let x = t(&[2, 3], &[0.0; 6]);
        assert!(x.permute(&[0, 0]).is_err());
        assert!(x.permute(&[0]).is_err());
    }

    #[test]
    fn reshape_shares_storage() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.reshape(&[3, 2]).unwrap();
        assert!(std::sync::Arc::ptr_eq(&x.data_arc(), &y.data_arc()));
        assert!(x.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn slice_axis_extracts_block() {
        let x = t(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let y = x.slice_axis(1, 1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_close(y.data(), &[1.0, 2.0, 5.0, 6.0], 0.0);
        assert!(x.slice_axis(1, 3, 2).is_err());
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_close(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0], 0.0);
        let a2 = c.slice_axis(1, 0, 2).unwrap();
        assert_close(a2.data(), a.data(), 0.0);
        let b2 = c.slice_axis(1, 2, 3).unwrap();
        assert_close(b2.data(), b.data(), 0.0);
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let a = t(&[2, 2], &[0.0; 4]);
        let b = t(&[3, 3], &[0.0; 9]);
        assert!(concat(&[&a, &b], 1).is_err());
    }

    #[test]
    fn unary_value_spots() {
        let x = t(&[4], &[-1.0, 0.0, 1.0, 2.0]);
        assert_close(x.relu().data(), &[0.0, 0.0, 1.0, 2.0], 0.0);
        let s = x.sigmoid();
        assert_close(
            s.data(),
            &[
                1.0 / (1.0 + 1f64.exp()),
                0.5,
                1.0 / (1.0 + (-1f64).exp()),
                1.0 / (1.0 + (-2f64).exp()),
            ],
            1e-13,
        );
        let si = x.silu();
        for i in 0..4 {
            assert!((si.data()[i] - x.data()[i] * s.data()[i]).abs() < 1e-13);
        }
        let p = t(&[2], &[1.0, 4.0]);
        assert_close(p.sqrt().data(), &[1.0, 2.0], 0.0);
        assert_close(p.ln().data(), &[0.0, 4f64.ln()], 1e-13);
        assert_close(p.exp().data(), &[1f64.exp(), 4f64.exp()], 1e-12);
    }

    #[test]
    fn affine_and_clamp_values() {
        let x = t(&[3], &[-2.0, 0.5, 3.0]);
        assert_close(x.affine(2.0, 1.0).data(), &[-3.0, 2.0, 7.0], 0.0);
        assert_close(x.clamp_min(0.0).data(), &[0.0, 0.5, 3.0], 0.0);
    }

    #[test]
    fn max_reduce_ties_take_first_in_row_major_order() {
        let x = t(&[2, 2], &[5.0, 5.0, 1.0, 5.0]);
        let tape = crate::tape::Tape::new();
        let xt = tape.watch("x", &x).unwrap();
        let loss = xt.max_axes(&[0, 1], false).unwrap();
        let grads = loss.backward().unwrap();
        assert_close(grads.get("x").unwrap().data(), &[1.0, 0.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn broadcast_gradient_sums_over_stretched_axes() {
        let tape = crate::tape::Tape::new();
        let a = tape.watch("a", &t(&[2, 3], &[1.0; 6])).unwrap();
        let b = tape.watch("b", &t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let loss = a.mul(&b).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_close(grads.get("a").unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0], 0.0);
        assert_close(grads.get("b").unwrap().data(), &[2.0, 2.0, 2.0], 0.0);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let tape = crate::tape::Tape::new();
        let x = tape.watch("x", &t(&[2], &[3.0, 4.0])).unwrap();
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        assert_close(grads.get("x").unwrap().data(), &[6.0, 8.0], 1e-12);
    }

    #[test]
    fn matmul_gradients_match_hand_derivation() {
        let tape = crate::tape::Tape::new();
        let a = tape.watch("a", &t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.watch("b", &t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let loss = a.matmul(&b).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        // d/dA sum(AB) = 1 B^T, d/dB = A^T 1.
        assert_close(grads.get("a").unwrap().data(), &[11.0, 15.0, 11.0, 15.0], 1e-12);
        assert_close(grads.get("b").unwrap().data(), &[4.0, 4.0, 6.0, 6.0], 1e-12);
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let tape = crate::tape::Tape::new();
        let _ = tape.watch("x", &t(&[2], &[1.0, 2.0])).unwrap();
        let free = t(&[2], &[3.0, 4.0]);
        let before = tape.len();
        let _ = free.mul(&free).unwrap();
        assert_eq!(tape.len(), before);
    }
}
