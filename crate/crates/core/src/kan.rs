//! Spline-based function layers.
//!
//! A [`KanLayer`] maps each input feature through a learned univariate
//! function (cubic B-spline on a fixed grid plus a silu-gated linear term)
//! and mixes the results. [`TokKanBlock`] wraps that in a convolutional
//! tokenizer, a depthwise conv, a residual, and a layer norm.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{conv, normalize, ConvSpec};
use crate::param::{kaiming_uniform, normal_init, Binder, Param, Visit};
use crate::tape::{record, OpRecord};
use crate::tensor::{Element, Tensor};

/// Uniform B-spline basis grid on `[lo, hi]` with `size` interior intervals
/// and polynomial degree `order`. The knot vector is uniformly extended by
/// `order` knots on each side, giving `size + order` basis functions.
///
/// Basis evaluation always happens in f64 regardless of model dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    size: usize,
    order: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(size: usize, order: usize, lo: f64, hi: f64) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("spline grid needs at least one interval"));
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!(
                "invalid spline range [{lo}, {hi}]"
            )));
        }
        let h = (hi - lo) / size as f64;
        let mut knots: Vec<f64> = (0..size + 2 * order + 1)
            .map(|i| lo + (i as f64 - order as f64) * h)
            .collect();
        // Pin the domain endpoints exactly so closure checks are robust.
        knots[order] = lo;
        knots[order + size] = hi;
        Ok(SplineGrid {
            size,
            order,
            lo,
            hi,
            knots,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn num_bases(&self) -> usize {
        self.size + self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn work_len(&self) -> usize {
        self.knots.len() - 1
    }

    /// Fills `b` (length `work_len`) with the degree-`order` basis row; if
    /// `prev` is given it receives the degree-`order - 1` row. Entries past
    /// `num_bases()` are scratch.
    fn rows_into(&self, x: f64, b: &mut [f64], mut prev: Option<&mut [f64]>) {
        let t = &self.knots;
        let m = self.work_len();
        b[..m].fill(0.0);
        // Degree-0 indicators on half-open intervals; the domain's right
        // endpoint is folded into the last interior interval so the kept
        // bases still sum to one there.
        if x >= t[0] && x <= t[m] {
            let mut j0 = m - 1;
            for j in 0..m {
                if x >= t[j] && x < t[j + 1] {
                    j0 = j;
                    break;
                }
            }
            let last_interior = self.order + self.size - 1;
            if x == t[last_interior + 1] {
                j0 = last_interior;
            }
            b[j0] = 1.0;
        }
        for deg in 1..=self.order {
            if deg == self.order {
                if let Some(p) = prev.as_deref_mut() {
                    p[..m].copy_from_slice(&b[..m]);
                }
            }
            for j in 0..m - deg {
                let dl = t[j + deg] - t[j];
                let dr = t[j + deg + 1] - t[j + 1];
                let left = if dl > 0.0 { (x - t[j]) / dl * b[j] } else { 0.0 };
                let right = if dr > 0.0 {
                    (t[j + deg + 1] - x) / dr * b[j + 1]
                } else {
                    0.0
                };
                b[j] = left + right;
            }
        }
    }

    /// Derivative row from the degree-`order - 1` row `prev`.
    fn deriv_from_lower(&self, prev: &[f64], d: &mut [f64]) {
        let k = self.order;
        if k == 0 {
            d[..self.num_bases()].fill(0.0);
            return;
        }
        let t = &self.knots;
        let kf = k as f64;
        for (j, dj) in d.iter_mut().enumerate().take(self.num_bases()) {
            let left = prev[j] / (t[j + k] - t[j]);
            let right = prev[j + 1] / (t[j + k + 1] - t[j + 1]);
            *dj = kf * (left - right);
        }
    }

    /// Values of all basis functions at `x`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut b = vec![0.0; self.work_len()];
        self.rows_into(x, &mut b, None);
        b.truncate(self.num_bases());
        b
    }

    /// Values and first derivatives of all basis functions at `x`.
    pub fn basis_and_deriv(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let m = self.work_len();
        let mut b = vec![0.0; m];
        let mut prev = vec![0.0; m];
        self.rows_into(x, &mut b, Some(&mut prev));
        let mut d = vec![0.0; self.num_bases()];
        self.deriv_from_lower(&prev, &mut d);
        b.truncate(self.num_bases());
        (b, d)
    }
}

/// `out[n,o] = sum_{i,j} coeffs[o,i,j] * B_j(x[n,i])` for `x` of shape
/// `[N, d_in]` and coefficients `[d_out, d_in, num_bases]`.
pub fn spline_mix<T: Element>(
    x: &Tensor<T>,
    coeffs: &Tensor<T>,
    grid: &SplineGrid,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || coeffs.rank() != 3 {
        return Err(Error::ShapeMismatch {
            context: "spline_mix ranks",
            lhs: x.shape().to_vec(),
            rhs: coeffs.shape().to_vec(),
        });
    }
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let (d_out, nb) = (coeffs.shape()[0], coeffs.shape()[2]);
    if coeffs.shape()[1] != d_in || nb != grid.num_bases() {
        return Err(Error::ShapeMismatch {
            context: "spline_mix coeffs",
            lhs: vec![d_out, d_in, grid.num_bases()],
            rhs: coeffs.shape().to_vec(),
        });
    }
    let xd = x.data();
    let cd = coeffs.data();
    let row = d_in * nb;
    let mut basis = vec![0.0f64; n * row];
    let mut work = vec![0.0f64; grid.work_len()];
    for s in 0..n {
        for i in 0..d_in {
            grid.rows_into(xd[s * d_in + i].to_f64(), &mut work, None);
            basis[s * row + i * nb..s * row + (i + 1) * nb].copy_from_slice(&work[..nb]);
        }
    }
    let mut out = vec![T::ZERO; n * d_out];
    let mut brow = vec![T::ZERO; row];
    for s in 0..n {
        for (dst, &src) in brow.iter_mut().zip(&basis[s * row..(s + 1) * row]) {
            *dst = T::from_f64(src);
        }
        for o in 0..d_out {
            let mut acc = T::ZERO;
            for (cv, bv) in cd[o * row..(o + 1) * row].iter().zip(&brow) {
                acc += *cv * *bv;
            }
            out[s * d_out + o] = acc;
        }
    }
    let grid = grid.clone();
    record(&[x, coeffs], vec![n, d_out], out, |ids| OpRecord::SplineMix {
        input: ids[0],
        coeffs: ids[1],
        grid,
        basis,
    })
}

pub(crate) fn spline_mix_backward_coeffs<T: Element>(
    basis: &[f64],
    x_shape: &[usize],
    c_shape: &[usize],
    grad: &[T],
    gc: &mut [T],
) {
    let (n, d_in) = (x_shape[0], x_shape[1]);
    let (d_out, nb) = (c_shape[0], c_shape[2]);
    let row = d_in * nb;
    let mut brow = vec![T::ZERO; row];
    for s in 0..n {
        for (dst, &src) in brow.iter_mut().zip(&basis[s * row..(s + 1) * row]) {
            *dst = T::from_f64(src);
        }
        for o in 0..d_out {
            let g = grad[s * d_out + o];
            if g == T::ZERO {
                continue;
            }
            for (gv, bv) in gc[o * row..(o + 1) * row].iter_mut().zip(&brow) {
                *gv += g * *bv;
            }
        }
    }
}

pub(crate) fn spline_mix_backward_input<T: Element>(
    grid: &SplineGrid,
    x: &[T],
    x_shape: &[usize],
    c: &[T],
    c_shape: &[usize],
    grad: &[T],
    gx: &mut [T],
) {
    let (n, d_in) = (x_shape[0], x_shape[1]);
    let (d_out, nb) = (c_shape[0], c_shape[2]);
    let row = d_in * nb;
    let mut sums = vec![0.0f64; row];
    let mut bwork = vec![0.0f64; grid.work_len()];
    let mut pwork = vec![0.0f64; grid.work_len()];
    let mut drow = vec![0.0f64; nb];
    for s in 0..n {
        sums.fill(0.0);
        for o in 0..d_out {
            let g = grad[s * d_out + o].to_f64();
            if g == 0.0 {
                continue;
            }
            for (sv, cv) in sums.iter_mut().zip(&c[o * row..(o + 1) * row]) {
                *sv += g * cv.to_f64();
            }
        }
        for i in 0..d_in {
            grid.rows_into(x[s * d_in + i].to_f64(), &mut bwork, Some(&mut pwork));
            grid.deriv_from_lower(&pwork, &mut drow);
            let mut acc = 0.0;
            for (sv, dv) in sums[i * nb..(i + 1) * nb].iter().zip(&drow) {
                acc += sv * dv;
            }
            gx[s * d_in + i] += T::from_f64(acc);
        }
    }
}

/// Feature mixing through learned univariate functions: a silu-gated linear
/// term plus a B-spline term, no bias.
#[derive(Debug)]
pub struct KanLayer<T: Element> {
    pub base: Param<T>,
    pub coeffs: Param<T>,
    pub grid: SplineGrid,
}

impl<T: Element> KanLayer<T> {
    pub fn new(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        grid: SplineGrid,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let base = Param::new(
            format!("{prefix}.base"),
            kaiming_uniform(rng, &[d_in, d_out], d_in),
        );
        let nb = grid.num_bases();
        let coeffs = Param::new(
            format!("{prefix}.coeffs"),
            normal_init(rng, &[d_out, d_in, nb], 0.1 / (nb as f64).sqrt()),
        );
        KanLayer { base, coeffs, grid }
    }

    pub fn d_in(&self) -> usize {
        self.base.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.base.value.shape()[1]
    }

    /// `x`: `[N, d_in]` -> `[N, d_out]`.
    pub fn forward(&self, x: &Tensor<T>, binder: &Binder<T>) -> Result<Tensor<T>> {
        let w = binder.bind(&self.base)?;
        let c = binder.bind(&self.coeffs)?;
        let linear = x.silu().matmul(&w)?;
        let spline = spline_mix(x, &c, &self.grid)?;
        linear.add(&spline)
    }
}

impl<T: Element> Visit<T> for KanLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.base);
        f(&self.coeffs);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.base);
        f(&mut self.coeffs);
    }
}

/// Tokenized KAN stage: a 3x3x3 conv tokenizer (stride 2 when downsampling,
/// 1 otherwise), a [`KanLayer`] applied per token, a depthwise 3x3x3 conv,
/// a residual back onto the tokens, and a layer norm over the embedding.
#[derive(Debug)]
pub struct TokKanBlock<T: Element> {
    pub tok_weight: Param<T>,
    pub tok_bias: Param<T>,
    pub kan: KanLayer<T>,
    pub dw_weight: Param<T>,
    pub ln_gain: Param<T>,
    pub ln_offset: Param<T>,
    stride: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl<T: Element> TokKanBlock<T> {
    pub fn new(
        prefix: &str,
        c_in: usize,
        embed: usize,
        stride: usize,
        grid: SplineGrid,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(stride == 1 || stride == 2, "tokenizer stride is 1 or 2");
        let tok_weight = Param::new(
            format!("{prefix}.tok.weight"),
            kaiming_uniform(rng, &[embed, c_in, 3, 3, 3], c_in * 27),
        );
        let tok_bias = Param::new(
            format!("{prefix}.tok.bias"),
            Tensor::zeros(&[embed]).expect("bias shape is valid"),
        );
        let kan = KanLayer::new(&format!("{prefix}.kan"), embed, embed, grid, rng);
        let dw_weight = Param::new(
            format!("{prefix}.dw.weight"),
            kaiming_uniform(rng, &[embed, 1, 3, 3, 3], 27),
        );
        let ln_gain = Param::new(
            format!("{prefix}.ln.gain"),
            Tensor::full(&[embed], T::ONE).expect("gain shape is valid"),
        );
        let ln_offset = Param::new(
            format!("{prefix}.ln.offset"),
            Tensor::zeros(&[embed]).expect("offset shape is valid"),
        );
        TokKanBlock {
            tok_weight,
            tok_bias,
            kan,
            dw_weight,
            ln_gain,
            ln_offset,
            stride,
        }
    }

    pub fn embed(&self) -> usize {
        self.tok_weight.value.shape()[0]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `x`: `[B, C_in, D, H, W]` -> `[B, embed, D/s, H/s, W/s]`.
    pub fn forward(&self, x: &Tensor<T>, binder: &Binder<T>) -> Result<Tensor<T>> {
        let tw = binder.bind(&self.tok_weight)?;
        let tb = binder.bind(&self.tok_bias)?;
        let tokens_spatial = conv(x, &tw, Some(&tb), &ConvSpec::strided(3, self.stride, 1))?;
        let b = tokens_spatial.shape()[0];
        let e = tokens_spatial.shape()[1];
        let sp = tokens_spatial.shape()[2..].to_vec();
        let n_tok: usize = sp.iter().product();

        let tokens = tokens_spatial
            .reshape(&[b, e, n_tok])?
            .permute(&[0, 2, 1])?;
        let mixed = self
            .kan
            .forward(&tokens.reshape(&[b * n_tok, e])?, binder)?
            .reshape(&[b, n_tok, e])?
            .permute(&[0, 2, 1])?
            .reshape(&[b, e, sp[0], sp[1], sp[2]])?;

        let dw = binder.bind(&self.dw_weight)?;
        let mixed = conv(&mixed, &dw, None, &ConvSpec::same(3, 1).with_groups(e))?;
        let fused = mixed.add(&tokens_spatial)?;

        let gain = binder.bind(&self.ln_gain)?;
        let offset = binder.bind(&self.ln_offset)?;
        let normed = normalize(
            &fused.reshape(&[b, e, n_tok])?.permute(&[0, 2, 1])?,
            &gain,
            &offset,
            &[2],
            LN_EPS,
        )?;
        normed
            .permute(&[0, 2, 1])?
            .reshape(&[b, e, sp[0], sp[1], sp[2]])
    }
}

impl<T: Element> Visit<T> for TokKanBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.tok_weight);
        f(&self.tok_bias);
        self.kan.visit(f);
        f(&self.dw_weight);
        f(&self.ln_gain);
        f(&self.ln_offset);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.tok_weight);
        f(&mut self.tok_bias);
        self.kan.visit_mut(f);
        f(&mut self.dw_weight);
        f(&mut self.ln_gain);
        f(&mut self.ln_offset);
    }
}
