//! Spatial network operations: convolution, pooling, resampling,
//! normalization.
//!
//! Layouts: activations are `[B, C, spatial...]`, convolution weights are
//! `[C_out, C_in/groups, k...]`. Convolution is cross-correlation (no kernel
//! flip) with zero padding. Supported spatial ranks are 1 and 3.

use crate::error::{Error, Result};
use crate::ops::{broadcast_shapes, broadcast_strides, for_each_2strided};
use crate::tape::{record, OpRecord};
use crate::tensor::{contiguous_strides, numel_of, Element, Tensor};

/// Stride/padding/groups for a convolution; one entry per spatial axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    /// Unit-stride convolution with the given symmetric padding.
    pub fn same(spatial_rank: usize, padding: usize) -> Self {
        ConvSpec {
            stride: vec![1; spatial_rank],
            padding: vec![padding; spatial_rank],
            groups: 1,
        }
    }

    pub fn strided(spatial_rank: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride: vec![stride; spatial_rank],
            padding: vec![padding; spatial_rank],
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::invalid(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn validate_conv<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Vec<usize>> {
    let spatial = input.rank().checked_sub(2).ok_or_else(|| {
        Error::invalid(format!("conv input rank {} < 2", input.rank()))
    })?;
    if spatial != 1 && spatial != 3 {
        return Err(Error::invalid(format!(
            "conv supports spatial rank 1 or 3, got {spatial}"
        )));
    }
    if weight.rank() != spatial + 2 {
        return Err(Error::ShapeMismatch {
            context: "conv weight rank",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if spec.stride.len() != spatial
        || spec.padding.len() != spatial
        || spec.stride.iter().any(|&s| s == 0)
    {
        return Err(Error::invalid(format!(
            "conv spec {spec:?} does not fit spatial rank {spatial}"
        )));
    }
    let c_in = input.shape()[1];
    let c_out = weight.shape()[0];
    if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(Error::invalid(format!(
            "groups {} must divide C_in {c_in} and C_out {c_out}",
            spec.groups
        )));
    }
    if weight.shape()[1] != c_in / spec.groups {
        return Err(Error::ShapeMismatch {
            context: "conv weight channels",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if let Some(bias) = bias {
        if bias.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                context: "conv bias",
                lhs: vec![c_out],
                rhs: bias.shape().to_vec(),
            });
        }
    }
    let mut out_shape = vec![input.shape()[0], c_out];
    for ax in 0..spatial {
        out_shape.push(conv_out_extent(
            input.shape()[2 + ax],
            weight.shape()[2 + ax],
            spec.stride[ax],
            spec.padding[ax],
        )?);
    }
    Ok(out_shape)
}

/// Output index range `[lo, hi)` for which `o*stride + k - pad` stays inside
/// `[0, input_extent)`.
fn valid_out_range(
    out_extent: usize,
    input_extent: usize,
    kernel_offset: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let shift = kernel_offset as i64 - pad as i64;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize).div_ceil(stride)
    };
    let max_in = input_extent as i64 - 1 - shift;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv3_forward_kernel<T: Element>(
    x: &[T],
    x_shape: &[usize],
    w: &[T],
    w_shape: &[usize],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    out: &mut [T],
    out_shape: &[usize],
) {
    let (b_n, c_in, d, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3], x_shape[4]);
    let (c_out, cpg, kd, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3], w_shape[4]);
    let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);
    let (sd, sh, sw) = (spec.stride[0], spec.stride[1], spec.stride[2]);
    let (pd, ph, pw) = (spec.padding[0], spec.padding[1], spec.padding[2]);
    let opg = c_out / spec.groups;
    let in_chan = d * h * wd;
    let out_chan = od * oh * ow;

    for b in 0..b_n {
        for co in 0..c_out {
            let slab = &mut out[(b * c_out + co) * out_chan..(b * c_out + co + 1) * out_chan];
            if let Some(bias) = bias {
                slab.fill(bias[co]);
            }
            let group = co / opg;
            for cl in 0..cpg {
                let ci = group * cpg + cl;
                let xin = &x[(b * c_in + ci) * in_chan..(b * c_in + ci + 1) * in_chan];
                let wbase = (co * cpg + cl) * kd * kh * kw;
                for zd in 0..kd {
                    let (d_lo, d_hi) = valid_out_range(od, d, zd, sd, pd);
                    for zh in 0..kh {
                        let (h_lo, h_hi) = valid_out_range(oh, h, zh, sh, ph);
                        for zw in 0..kw {
                            let (w_lo, w_hi) = valid_out_range(ow, wd, zw, sw, pw);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let wv = w[wbase + (zd * kh + zh) * kw + zw];
                            for o_d in d_lo..d_hi {
                                let id = o_d * sd + zd - pd;
                                for o_h in h_lo..h_hi {
                                    let ih = o_h * sh + zh - ph;
                                    let orow = &mut slab[(o_d * oh + o_h) * ow..];
                                    let xrow = &xin[(id * h + ih) * wd..(id * h + ih + 1) * wd];
                                    if sw == 1 {
                                        let base = w_lo + zw - pw;
                                        let xs = &xrow[base..base + (w_hi - w_lo)];
                                        let os = &mut orow[w_lo..w_hi];
                                        for (o_v, &x_v) in os.iter_mut().zip(xs) {
                                            *o_v += wv * x_v;
                                        }
                                    } else {
                                        for o_w in w_lo..w_hi {
                                            let iw = o_w * sw + zw - pw;
                                            orow[o_w] += wv * xrow[iw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1_forward_kernel<T: Element>(
    x: &[T],
    x_shape: &[usize],
    w: &[T],
    w_shape: &[usize],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    out: &mut [T],
    out_shape: &[usize],
) {
    let (b_n, c_in, len) = (x_shape[0], x_shape[1], x_shape[2]);
    let (c_out, cpg, k) = (w_shape[0], w_shape[1], w_shape[2]);
    let o_len = out_shape[2];
    let (stride, pad) = (spec.stride[0], spec.padding[0]);
    let opg = c_out / spec.groups;
    for b in 0..b_n {
        for co in 0..c_out {
            let slab = &mut out[(b * c_out + co) * o_len..(b * c_out + co + 1) * o_len];
            if let Some(bias) = bias {
                slab.fill(bias[co]);
            }
            let group = co / opg;
            for cl in 0..cpg {
                let ci = group * cpg + cl;
                let xin = &x[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                for z in 0..k {
                    let (lo, hi) = valid_out_range(o_len, len, z, stride, pad);
                    let wv = w[(co * cpg + cl) * k + z];
                    for o in lo..hi {
                        slab[o] += wv * xin[o * stride + z - pad];
                    }
                }
            }
        }
    }
}

/// Convolution (cross-correlation) over 1 or 3 spatial axes.
pub fn conv<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = validate_conv(input, weight, bias, spec)?;
    let mut out = vec![T::ZERO; numel_of(&out_shape)];
    let kernel = if input.rank() == 5 {
        conv3_forward_kernel::<T>
    } else {
        conv1_forward_kernel::<T>
    };
    kernel(
        input.data(),
        input.shape(),
        weight.data(),
        weight.shape(),
        bias.map(|b| b.data()),
        spec,
        &mut out,
        &out_shape,
    );
    let spec = spec.clone();
    match bias {
        Some(bias) => record(&[input, weight, bias], out_shape, out, |ids| OpRecord::Conv {
            input: ids[0],
            weight: ids[1],
            bias: Some(ids[2]),
            spec,
        }),
        None => record(&[input, weight], out_shape, out, |ids| OpRecord::Conv {
            input: ids[0],
            weight: ids[1],
            bias: None,
            spec,
        }),
    }
}

pub(crate) fn conv_backward_input<T: Element>(
    w: &[T],
    w_shape: &[usize],
    grad: &[T],
    out_shape: &[usize],
    spec: &ConvSpec,
    x_shape: &[usize],
    gx: &mut [T],
) {
    let spatial = x_shape.len() - 2;
    let (b_n, c_in) = (x_shape[0], x_shape[1]);
    let c_out = w_shape[0];
    let cpg = w_shape[1];
    let opg = c_out / spec.groups;
    let in_sp: Vec<usize> = x_shape[2..].to_vec();
    let out_sp: Vec<usize> = out_shape[2..].to_vec();
    let k_sp: Vec<usize> = w_shape[2..].to_vec();
    let in_chan: usize = in_sp.iter().product();
    let out_chan: usize = out_sp.iter().product();
    let k_total: usize = k_sp.iter().product();
    let k_strides = contiguous_strides(&k_sp);
    let out_strides = contiguous_strides(&out_sp);
    let in_strides = contiguous_strides(&in_sp);
    let unit_stride3 = spatial == 3 && spec.stride.iter().all(|&s| s == 1);

    for b in 0..b_n {
        for ci in 0..c_in {
            let group = ci / cpg;
            let cl = ci % cpg;
            let gslab = &mut gx[(b * c_in + ci) * in_chan..(b * c_in + ci + 1) * in_chan];
            for co in group * opg..(group + 1) * opg {
                let go = &grad[(b * c_out + co) * out_chan..(b * c_out + co + 1) * out_chan];
                let wbase = (co * cpg + cl) * k_total;
                if unit_stride3 {
                    backward_input_rows3(w, wbase, &k_sp, go, &out_sp, &in_sp, spec, gslab);
                    continue;
                }
                for kf in 0..k_total {
                    let wv = w[wbase + kf];
                    // Per-axis output ranges valid for this kernel offset.
                    let mut ranges = Vec::with_capacity(spatial);
                    for ax in 0..spatial {
                        let z = kf / k_strides[ax] % k_sp[ax];
                        ranges.push((
                            valid_out_range(out_sp[ax], in_sp[ax], z, spec.stride[ax], spec.padding[ax]),
                            z,
                        ));
                    }
                    scatter_conv(
                        spatial,
                        &ranges,
                        &out_strides,
                        &in_strides,
                        spec,
                        |o_flat, i_flat| {
                            gslab[i_flat] += wv * go[o_flat];
                        },
                    );
                }
            }
        }
    }
}

/// Stride-1 input-gradient rows: contiguous axpy per (offset, output row).
#[allow(clippy::too_many_arguments)]
fn backward_input_rows3<T: Element>(
    w: &[T],
    wbase: usize,
    k_sp: &[usize],
    go: &[T],
    out_sp: &[usize],
    in_sp: &[usize],
    spec: &ConvSpec,
    gslab: &mut [T],
) {
    let (kd, kh, kw) = (k_sp[0], k_sp[1], k_sp[2]);
    let (od, oh, ow) = (out_sp[0], out_sp[1], out_sp[2]);
    let (d, h, wd) = (in_sp[0], in_sp[1], in_sp[2]);
    let (pd, ph, pw) = (spec.padding[0], spec.padding[1], spec.padding[2]);
    for zd in 0..kd {
        let (d_lo, d_hi) = valid_out_range(od, d, zd, 1, pd);
        for zh in 0..kh {
            let (h_lo, h_hi) = valid_out_range(oh, h, zh, 1, ph);
            for zw in 0..kw {
                let (w_lo, w_hi) = valid_out_range(ow, wd, zw, 1, pw);
                if w_lo >= w_hi {
                    continue;
                }
                let wv = w[wbase + (zd * kh + zh) * kw + zw];
                let base = w_lo + zw - pw;
                let span = w_hi - w_lo;
                for o_d in d_lo..d_hi {
                    let id = o_d + zd - pd;
                    for o_h in h_lo..h_hi {
                        let ih = o_h + zh - ph;
                        let gs = &go[(o_d * oh + o_h) * ow + w_lo..][..span];
                        let xs = &mut gslab[(id * h + ih) * wd + base..][..span];
                        for (x_v, &g_v) in xs.iter_mut().zip(gs) {
                            *x_v += wv * g_v;
                        }
                    }
                }
            }
        }
    }
}

/// Visits all (output, input) index pairs for one kernel offset.
fn scatter_conv(
    spatial: usize,
    ranges: &[((usize, usize), usize)],
    out_strides: &[usize],
    in_strides: &[usize],
    spec: &ConvSpec,
    mut f: impl FnMut(usize, usize),
) {
    match spatial {
        1 => {
            let ((lo, hi), z) = ranges[0];
            for o in lo..hi {
                f(o, o * spec.stride[0] + z - spec.padding[0]);
            }
        }
        3 => {
            let ((d_lo, d_hi), zd) = ranges[0];
            let ((h_lo, h_hi), zh) = ranges[1];
            let ((w_lo, w_hi), zw) = ranges[2];
            for od in d_lo..d_hi {
                let id = od * spec.stride[0] + zd - spec.padding[0];
                for oh in h_lo..h_hi {
                    let ih = oh * spec.stride[1] + zh - spec.padding[1];
                    let o_base = od * out_strides[0] + oh * out_strides[1];
                    let i_base = id * in_strides[0] + ih * in_strides[1];
                    for ow in w_lo..w_hi {
                        let iw = ow * spec.stride[2] + zw - spec.padding[2];
                        f(o_base + ow, i_base + iw);
                    }
                }
            }
        }
        _ => unreachable!("validated spatial rank"),
    }
}

pub(crate) fn conv_backward_weight<T: Element>(
    x: &[T],
    x_shape: &[usize],
    grad: &[T],
    out_shape: &[usize],
    spec: &ConvSpec,
    w_shape: &[usize],
    gw: &mut [T],
) {
    let spatial = x_shape.len() - 2;
    let (b_n, c_in) = (x_shape[0], x_shape[1]);
    let c_out = w_shape[0];
    let cpg = w_shape[1];
    let opg = c_out / spec.groups;
    let in_sp: Vec<usize> = x_shape[2..].to_vec();
    let out_sp: Vec<usize> = out_shape[2..].to_vec();
    let k_sp: Vec<usize> = w_shape[2..].to_vec();
    let in_chan: usize = in_sp.iter().product();
    let out_chan: usize = out_sp.iter().product();
    let k_total: usize = k_sp.iter().product();
    let k_strides = contiguous_strides(&k_sp);
    let out_strides = contiguous_strides(&out_sp);
    let in_strides = contiguous_strides(&in_sp);

    let unit_stride3 = spatial == 3 && spec.stride.iter().all(|&s| s == 1);
    for co in 0..c_out {
        let group = co / opg;
        for cl in 0..cpg {
            let ci = group * cpg + cl;
            if unit_stride3 {
                for b in 0..b_n {
                    let go = &grad[(b * c_out + co) * out_chan..(b * c_out + co + 1) * out_chan];
                    let xin = &x[(b * c_in + ci) * in_chan..(b * c_in + ci + 1) * in_chan];
                    backward_weight_rows3(
                        xin,
                        &in_sp,
                        go,
                        &out_sp,
                        spec,
                        &mut gw[(co * cpg + cl) * k_total..][..k_total],
                        &k_sp,
                    );
                }
                continue;
            }
            for kf in 0..k_total {
                let mut ranges = Vec::with_capacity(spatial);
                for ax in 0..spatial {
                    let z = kf / k_strides[ax] % k_sp[ax];
                    ranges.push((
                        valid_out_range(out_sp[ax], in_sp[ax], z, spec.stride[ax], spec.padding[ax]),
                        z,
                    ));
                }
                let mut acc = T::ZERO;
                for b in 0..b_n {
                    let go = &grad[(b * c_out + co) * out_chan..(b * c_out + co + 1) * out_chan];
                    let xin = &x[(b * c_in + ci) * in_chan..(b * c_in + ci + 1) * in_chan];
                    scatter_conv(spatial, &ranges, &out_strides, &in_strides, spec, |o, i| {
                        acc += go[o] * xin[i];
                    });
                }
                gw[(co * cpg + cl) * k_total + kf] += acc;
            }
        }
    }
}

/// Unrolled dot product; the lane split keeps the reduction vectorizable.
fn dot_rows<T: Element>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let av = &a[c * LANES..(c + 1) * LANES];
        let bv = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += av[l] * bv[l];
        }
    }
    let mut total = T::ZERO;
    for l in 0..LANES {
        total += acc[l];
    }
    for i in chunks * LANES..a.len() {
        total += a[i] * b[i];
    }
    total
}

/// Stride-1 weight-gradient rows: one contiguous dot per (offset, output row).
fn backward_weight_rows3<T: Element>(
    xin: &[T],
    in_sp: &[usize],
    go: &[T],
    out_sp: &[usize],
    spec: &ConvSpec,
    gw_k: &mut [T],
    k_sp: &[usize],
) {
    let (kd, kh, kw) = (k_sp[0], k_sp[1], k_sp[2]);
    let (od, oh, ow) = (out_sp[0], out_sp[1], out_sp[2]);
    let (d, h, wd) = (in_sp[0], in_sp[1], in_sp[2]);
    let (pd, ph, pw) = (spec.padding[0], spec.padding[1], spec.padding[2]);
    for zd in 0..kd {
        let (d_lo, d_hi) = valid_out_range(od, d, zd, 1, pd);
        for zh in 0..kh {
            let (h_lo, h_hi) = valid_out_range(oh, h, zh, 1, ph);
            for zw in 0..kw {
                let (w_lo, w_hi) = valid_out_range(ow, wd, zw, 1, pw);
                if w_lo >= w_hi {
                    continue;
                }
                let base = w_lo + zw - pw;
                let span = w_hi - w_lo;
                let mut acc = T::ZERO;
                for o_d in d_lo..d_hi {
                    let id = o_d + zd - pd;
                    for o_h in h_lo..h_hi {
                        let ih = o_h + zh - ph;
                        let gs = &go[(o_d * oh + o_h) * ow + w_lo..][..span];
                        let xs = &xin[(id * h + ih) * wd + base..][..span];
                        acc += dot_rows(gs, xs);
                    }
                }
                gw_k[(zd * kh + zh) * kw + zw] += acc;
            }
        }
    }
}

pub(crate) fn conv_backward_bias<T: Element>(grad: &[T], out_shape: &[usize], gb: &mut [T]) {
    let (b_n, c_out) = (out_shape[0], out_shape[1]);
    let out_chan: usize = out_shape[2..].iter().product();
    for b in 0..b_n {
        for co in 0..c_out {
            let go = &grad[(b * c_out + co) * out_chan..(b * c_out + co + 1) * out_chan];
            let mut acc = T::ZERO;
            for &g in go {
                acc += g;
            }
            gb[co] += acc;
        }
    }
}

// ── max pooling (window 2, stride 2) ─────────────────────────────────

fn validate_pool<T: Element>(input: &Tensor<T>) -> Result<Vec<usize>> {
    if input.rank() != 5 {
        return Err(Error::invalid(format!(
            "max_pool3 expects [B,C,D,H,W], got {:?}",
            input.shape()
        )));
    }
    let sp = &input.shape()[2..];
    if sp.iter().any(|&e| e % 2 != 0) {
        return Err(Error::invalid(format!(
            "max_pool3 needs even spatial extents, got {sp:?}"
        )));
    }
    let mut out = input.shape()[..2].to_vec();
    out.extend(sp.iter().map(|&e| e / 2));
    Ok(out)
}

/// 2x2x2 max pooling with stride 2. Ties resolve to the first element of the
/// window in row-major order.
pub fn max_pool3<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = validate_pool(input)?;
    let (d, h, w) = (input.shape()[2], input.shape()[3], input.shape()[4]);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let slabs = input.shape()[0] * input.shape()[1];
    let x = input.data();
    let mut out = vec![T::ZERO; numel_of(&out_shape)];
    for s in 0..slabs {
        let xin = &x[s * d * h * w..(s + 1) * d * h * w];
        let slab = &mut out[s * od * oh * ow..(s + 1) * od * oh * ow];
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = xin[((2 * zd) * h + 2 * zh) * w + 2 * zw];
                    for kd in 0..2 {
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let v = xin[((2 * zd + kd) * h + 2 * zh + kh) * w + 2 * zw + kw];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                    }
                    slab[(zd * oh + zh) * ow + zw] = best;
                }
            }
        }
    }
    record(&[input], out_shape, out, |ids| OpRecord::MaxPool3 {
        input: ids[0],
    })
}

pub(crate) fn max_pool3_backward<T: Element>(
    x: &[T],
    x_shape: &[usize],
    grad: &[T],
    gx: &mut [T],
) {
    let (d, h, w) = (x_shape[2], x_shape[3], x_shape[4]);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let slabs = x_shape[0] * x_shape[1];
    for s in 0..slabs {
        let xin = &x[s * d * h * w..(s + 1) * d * h * w];
        let gxs = &mut gx[s * d * h * w..(s + 1) * d * h * w];
        let gs = &grad[s * od * oh * ow..(s + 1) * od * oh * ow];
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best_idx = ((2 * zd) * h + 2 * zh) * w + 2 * zw;
                    let mut best = xin[best_idx];
                    for kd in 0..2 {
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let idx = ((2 * zd + kd) * h + 2 * zh + kh) * w + 2 * zw + kw;
                                if xin[idx] > best {
                                    best = xin[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    gxs[best_idx] += gs[(zd * oh + zh) * ow + zw];
                }
            }
        }
    }
}

// ── trilinear upsampling (factor 2, align_corners = false) ───────────

/// Per-axis sample table: output index -> (lower src, upper src, fraction).
fn upsample_axis_table(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|i| {
            // Sample centers: src = (i + 0.5) / 2 - 0.5, clamped to the edge.
            let src = (i as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let i0 = (floor.max(0.0) as usize).min(n_in - 1);
            let i1 = ((floor + 1.0).max(0.0) as usize).min(n_in - 1);
            (i0, i1, t)
        })
        .collect()
}

/// Doubles each spatial extent of `[B,C,D,H,W]` by trilinear interpolation.
pub fn upsample3_x2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 5 {
        return Err(Error::invalid(format!(
            "upsample3_x2 expects [B,C,D,H,W], got {:?}",
            input.shape()
        )));
    }
    let (d, h, w) = (input.shape()[2], input.shape()[3], input.shape()[4]);
    let mut out_shape = input.shape()[..2].to_vec();
    out_shape.extend([2 * d, 2 * h, 2 * w]);
    let td = upsample_axis_table(d);
    let th = upsample_axis_table(h);
    let tw = upsample_axis_table(w);
    let slabs = input.shape()[0] * input.shape()[1];
    let x = input.data();
    let mut out = vec![T::ZERO; numel_of(&out_shape)];
    for s in 0..slabs {
        let xin = &x[s * d * h * w..(s + 1) * d * h * w];
        let slab = &mut out[s * 8 * d * h * w..(s + 1) * 8 * d * h * w];
        for (odi, &(d0, d1, fd)) in td.iter().enumerate() {
            for (ohi, &(h0, h1, fh)) in th.iter().enumerate() {
                for (owi, &(w0, w1, fw)) in tw.iter().enumerate() {
                    let mut acc = 0.0f64;
                    for (di, wd_) in [(d0, 1.0 - fd), (d1, fd)] {
                        if wd_ == 0.0 {
                            continue;
                        }
                        for (hi, wh_) in [(h0, 1.0 - fh), (h1, fh)] {
                            if wh_ == 0.0 {
                                continue;
                            }
                            for (wi, ww_) in [(w0, 1.0 - fw), (w1, fw)] {
                                if ww_ == 0.0 {
                                    continue;
                                }
                                acc += wd_ * wh_ * ww_ * xin[(di * h + hi) * w + wi].to_f64();
                            }
                        }
                    }
                    slab[(odi * 2 * h + ohi) * 2 * w + owi] = T::from_f64(acc);
                }
            }
        }
    }
    record(&[input], out_shape, out, |ids| OpRecord::Upsample3 {
        input: ids[0],
    })
}

pub(crate) fn upsample3_backward<T: Element>(x_shape: &[usize], grad: &[T], gx: &mut [T]) {
    let (d, h, w) = (x_shape[2], x_shape[3], x_shape[4]);
    let td = upsample_axis_table(d);
    let th = upsample_axis_table(h);
    let tw = upsample_axis_table(w);
    let slabs = x_shape[0] * x_shape[1];
    for s in 0..slabs {
        let gxs = &mut gx[s * d * h * w..(s + 1) * d * h * w];
        let gs = &grad[s * 8 * d * h * w..(s + 1) * 8 * d * h * w];
        for (odi, &(d0, d1, fd)) in td.iter().enumerate() {
            for (ohi, &(h0, h1, fh)) in th.iter().enumerate() {
                for (owi, &(w0, w1, fw)) in tw.iter().enumerate() {
                    let g = gs[(odi * 2 * h + ohi) * 2 * w + owi].to_f64();
                    for (di, wd_) in [(d0, 1.0 - fd), (d1, fd)] {
                        if wd_ == 0.0 {
                            continue;
                        }
                        for (hi, wh_) in [(h0, 1.0 - fh), (h1, fh)] {
                            if wh_ == 0.0 {
                                continue;
                            }
                            for (wi, ww_) in [(w0, 1.0 - fw), (w1, fw)] {
                                if ww_ == 0.0 {
                                    continue;
                                }
                                gxs[(di * h + hi) * w + wi] +=
                                    T::from_f64(g * wd_ * wh_ * ww_);
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── normalization ────────────────────────────────────────────────────

/// `(x - mean) / sqrt(var + eps) * gain + offset`, with mean/var taken over
/// `axes` (biased variance). `gain`/`offset` broadcast against `x`.
pub fn normalize<T: Element>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    offset: &Tensor<T>,
    axes: &[usize],
    eps: f64,
) -> Result<Tensor<T>> {
    if gain.shape() != offset.shape() {
        return Err(Error::ShapeMismatch {
            context: "normalize gain/offset",
            lhs: gain.shape().to_vec(),
            rhs: offset.shape().to_vec(),
        });
    }
    for &ax in axes {
        if ax >= x.rank() {
            return Err(Error::AxisOutOfRange {
                axis: ax,
                rank: x.rank(),
            });
        }
    }
    let bshape = broadcast_shapes(x.shape(), gain.shape(), "normalize")?;
    if bshape != x.shape() {
        return Err(Error::ShapeMismatch {
            context: "normalize gain broadcast",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }

    let shape = x.shape();
    let mut kshape = shape.to_vec();
    for &ax in axes {
        kshape[ax] = 1;
    }
    let groups = numel_of(&kshape);
    let group_n = x.numel() / groups;
    let sx = contiguous_strides(shape);
    let sk = broadcast_strides(&kshape, shape);
    let xd = x.data();

    let mut mean = vec![T::ZERO; groups];
    for_each_2strided(shape, &sx, &sk, |_, ia, ib| {
        mean[ib] += xd[ia];
    });
    let inv_n = T::from_f64(1.0 / group_n as f64);
    for m in mean.iter_mut() {
        *m = *m * inv_n;
    }
    let mut var = vec![T::ZERO; groups];
    for_each_2strided(shape, &sx, &sk, |_, ia, ib| {
        let d = xd[ia] - mean[ib];
        var[ib] += d * d;
    });
    let eps_t = T::from_f64(eps);
    let mut inv_std = vec![T::ZERO; groups];
    for (r, &v) in inv_std.iter_mut().zip(&var) {
        *r = T::ONE / (v * inv_n + eps_t).sqrt();
    }

    let sg = broadcast_strides(gain.shape(), shape);
    let gd = gain.data();
    let od = offset.data();
    let mut out = vec![T::ZERO; x.numel()];
    for_each_2strided(shape, &sx, &sk, |flat, ia, ib| {
        out[flat] = (xd[ia] - mean[ib]) * inv_std[ib];
    });
    for_each_2strided(shape, &sx, &sg, |flat, _, ig| {
        out[flat] = out[flat] * gd[ig] + od[ig];
    });

    let axes = axes.to_vec();
    record(&[x, gain, offset], shape.to_vec(), out, |ids| OpRecord::Normalize {
        input: ids[0],
        gain: ids[1],
        offset: ids[2],
        axes,
        mean,
        inv_std,
    })
}

#[allow(clippy::too_many_arguments)]
#[allow(clippy::type_complexity)]
pub(crate) fn normalize_backward<T: Element>(
    x: &[T],
    shape: &[usize],
    gain: &[T],
    gain_shape: &[usize],
    axes: &[usize],
    mean: &[T],
    inv_std: &[T],
    grad: &[T],
    need_x: bool,
    need_gain: bool,
    need_offset: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let n = numel_of(shape);
    let mut kshape = shape.to_vec();
    for &ax in axes {
        kshape[ax] = 1;
    }
    let groups = numel_of(&kshape);
    let group_n: usize = n / groups;
    let inv_n = T::from_f64(1.0 / group_n as f64);
    let sx = contiguous_strides(shape);
    let sk = broadcast_strides(&kshape, shape);
    let sg = broadcast_strides(gain_shape, shape);

    let mut dyg = vec![T::ZERO; n];
    for_each_2strided(shape, &sx, &sg, |flat, _, ig| {
        dyg[flat] = grad[flat] * gain[ig];
    });
    // Per-group sums of dy*gain and dy*gain*xhat drive the input gradient.
    let mut xhat = vec![T::ZERO; n];
    let mut s1 = vec![T::ZERO; groups];
    let mut s2 = vec![T::ZERO; groups];
    for_each_2strided(shape, &sx, &sk, |flat, ia, ib| {
        let xh = (x[ia] - mean[ib]) * inv_std[ib];
        xhat[flat] = xh;
        s1[ib] += dyg[flat];
        s2[ib] += dyg[flat] * xh;
    });

    let mut ggain = if need_gain { Some(vec![T::ZERO; numel_of(gain_shape)]) } else { None };
    let mut goffset = if need_offset { Some(vec![T::ZERO; numel_of(gain_shape)]) } else { None };
    if need_gain || need_offset {
        for_each_2strided(shape, &sx, &sg, |flat, _, ig| {
            if let Some(ggain) = ggain.as_mut() {
                ggain[ig] += grad[flat] * xhat[flat];
            }
            if let Some(goffset) = goffset.as_mut() {
                goffset[ig] += grad[flat];
            }
        });
    }
    let mut gx = if need_x { Some(vec![T::ZERO; n]) } else { None };
    if let Some(gx) = gx.as_mut() {
        for_each_2strided(shape, &sx, &sk, |flat, _, ib| {
            gx[flat] += inv_std[ib] * (dyg[flat] - inv_n * (s1[ib] + xhat[flat] * s2[ib]));
        });
    }
    (gx, ggain, goffset)
}

/// Mean over the spatial axes of `[B,C,D,H,W]`, yielding `[B,C]`.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 5 {
        return Err(Error::invalid(format!(
            "global_avg_pool expects [B,C,D,H,W], got {:?}",
            input.shape()
        )));
    }
    input.mean_axes(&[2, 3, 4], false)
}
