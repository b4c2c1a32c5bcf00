//! Attention modules used on skip paths and fused feature maps: efficient
//! channel attention (a 1D conv over the channel profile), spatial attention
//! (a 7x7x7 conv over the channel mean), and multi-head self-attention over
//! tokens.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{conv, global_avg_pool, upsample3_x2, ConvSpec};
use crate::param::{kaiming_uniform, Binder, Param, Visit};
use crate::tensor::{Element, Tensor};

/// Channel-attention kernel size: nearest odd number to
/// `|log2(C)/2 + 0.5|` (ties round up), floored at 3.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = ((channels as f64).log2() / 2.0 + 0.5).abs();
    // Nearest odd via rounding (t-1)/2 half-up.
    let r = ((t - 1.0) / 2.0 + 0.5).floor();
    let k = 2.0 * r + 1.0;
    (k as i64).max(3) as usize
}

/// Channel attention: global average pool, a k-tap 1D conv across channels
/// (no bias), sigmoid, and a per-channel rescale of the input.
#[derive(Debug)]
pub struct EcaModule<T: Element> {
    pub weight: Param<T>,
}

impl<T: Element> EcaModule<T> {
    pub fn new(prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = eca_kernel_size(channels);
        EcaModule {
            weight: Param::new(
                format!("{prefix}.weight"),
                kaiming_uniform(rng, &[1, 1, k], k),
            ),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, binder: &Binder<T>) -> Result<Tensor<T>> {
        let w = binder.bind(&self.weight)?;
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let k = w.shape()[2];
        let profile = global_avg_pool(x)?.reshape(&[b, 1, c])?;
        let spec = ConvSpec {
            stride: vec![1],
            padding: vec![(k - 1) / 2],
            groups: 1,
        };
        let gate = conv(&profile, &w, None, &spec)?
            .sigmoid()
            .reshape(&[b, c, 1, 1, 1])?;
        x.mul(&gate)
    }
}

impl<T: Element> Visit<T> for EcaModule<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}

/// Spatial attention: channel mean, a 7x7x7 conv (no bias), sigmoid, and a
/// per-voxel rescale of the input.
#[derive(Debug)]
pub struct EsaModule<T: Element> {
    pub weight: Param<T>,
}

impl<T: Element> EsaModule<T> {
    pub fn new(prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        EsaModule {
            weight: Param::new(
                format!("{prefix}.weight"),
                kaiming_uniform(rng, &[1, 1, 7, 7, 7], 343),
            ),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, binder: &Binder<T>) -> Result<Tensor<T>> {
        let w = binder.bind(&self.weight)?;
        let mean = x.mean_axes(&[1], true)?;
        let gate = conv(&mean, &w, None, &ConvSpec::same(3, 3))?.sigmoid();
        x.mul(&gate)
    }
}

impl<T: Element> Visit<T> for EsaModule<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}

/// Largest head count from {4, 2, 1} dividing the embedding width.
pub fn head_count(embed: usize) -> usize {
    for h in [4, 2, 1] {
        if embed % h == 0 {
            return h;
        }
    }
    1
}

/// Multi-head self-attention over `[B, N, E]` tokens with a residual
/// connection. Projections are weight-only (`x @ W`).
#[derive(Debug)]
pub struct SelfAttention<T: Element> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    heads: usize,
}

impl<T: Element> SelfAttention<T> {
    pub fn new(prefix: &str, embed: usize, rng: &mut ChaCha8Rng) -> Self {
        let mk = |name: &str, rng: &mut ChaCha8Rng| {
            Param::new(
                format!("{prefix}.{name}"),
                kaiming_uniform(rng, &[embed, embed], embed),
            )
        };
        SelfAttention {
            wq: mk("wq", rng),
            wk: mk("wk", rng),
            wv: mk("wv", rng),
            wo: mk("wo", rng),
            heads: head_count(embed),
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `x`: `[B, N, E]` -> `[B, N, E]`.
    pub fn forward(&self, x: &Tensor<T>, binder: &Binder<T>) -> Result<Tensor<T>> {
        let (b, n, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hc = self.heads;
        let eh = e / hc;
        let flat = x.reshape(&[b * n, e])?;
        let project = |w: &Param<T>| -> Result<Tensor<T>> {
            let w = binder.bind(w)?;
            // [B*N, E] -> per-head batches [B*heads, N, E/heads]
            flat.matmul(&w)?
                .reshape(&[b, n, hc, eh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * hc, n, eh])
        };
        let q = project(&self.wq)?;
        let k = project(&self.wk)?;
        let v = project(&self.wv)?;
        let scores = q
            .matmul(&k.permute(&[0, 2, 1])?)?
            .affine(1.0 / (eh as f64).sqrt(), 0.0);
        let attn = scores.softmax(2)?;
        let ctx = attn
            .matmul(&v)?
            .reshape(&[b, hc, n, eh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * n, e])?;
        let wo = binder.bind(&self.wo)?;
        let out = ctx.matmul(&wo)?.reshape(&[b, n, e])?;
        x.add(&out)
    }
}

impl<T: Element> Visit<T> for SelfAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.wq);
        f(&self.wk);
        f(&self.wv);
        f(&self.wo);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        f(&mut self.wo);
    }
}

/// Self-attention applied to a spatial map: a stride-2 tokenizer conv keeps
/// the token count manageable, attention runs on the tokens, and the result
/// is upsampled back to the input resolution. Channel count is preserved.
#[derive(Debug)]
pub struct AttnSpatial<T: Element> {
    pub tok_weight: Param<T>,
    pub tok_bias: Param<T>,
    pub attn: SelfAttention<T>,
}

impl<T: Element> AttnSpatial<T> {
    pub fn new(prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        AttnSpatial {
            tok_weight: Param::new(
                format!("{prefix}.tok.weight"),
                kaiming_uniform(rng, &[channels, channels, 3, 3, 3], channels * 27),
            ),
            tok_bias: Param::new(
                format!("{prefix}.tok.bias"),
                Tensor::zeros(&[channels]).expect("bias shape is valid"),
            ),
            attn: SelfAttention::new(&format!("{prefix}.attn"), channels, rng),
        }
    }

    /// `x`: `[B, C, D, H, W]` with even spatial extents.
    pub fn forward(&self, x: &Tensor<T>, binder: &Binder<T>) -> Result<Tensor<T>> {
        let tw = binder.bind(&self.tok_weight)?;
        let tb = binder.bind(&self.tok_bias)?;
        let t = conv(x, &tw, Some(&tb), &ConvSpec::strided(3, 2, 1))?;
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let sp = t.shape()[2..].to_vec();
        let n: usize = sp.iter().product();
        let tokens = t.reshape(&[b, c, n])?.permute(&[0, 2, 1])?;
        let mixed = self.attn.forward(&tokens, binder)?;
        let spatial = mixed
            .permute(&[0, 2, 1])?
            .reshape(&[b, c, sp[0], sp[1], sp[2]])?;
        upsample3_x2(&spatial)
    }
}

impl<T: Element> Visit<T> for AttnSpatial<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.tok_weight);
        f(&self.tok_bias);
        self.attn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.tok_weight);
        f(&mut self.tok_bias);
        self.attn.visit_mut(f);
    }
}

/// The attention flavor a model variant inserts at a given site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    Eca,
    Esa,
    EcaEsa,
    SelfAttn,
}

/// One attention insert of any flavor; channel attention runs before spatial
/// attention when both are present.
#[derive(Debug)]
pub enum AttnModule<T: Element> {
    Eca(EcaModule<T>),
    Esa(EsaModule<T>),
    EcaEsa(EcaModule<T>, EsaModule<T>),
    SelfAttn(AttnSpatial<T>),
}

impl<T: Element> AttnModule<T> {
    pub fn new(kind: AttnKind, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            AttnKind::Eca => AttnModule::Eca(EcaModule::new(&format!("{prefix}.eca"), channels, rng)),
            AttnKind::Esa => AttnModule::Esa(EsaModule::new(&format!("{prefix}.esa"), rng)),
            AttnKind::EcaEsa => AttnModule::EcaEsa(
                EcaModule::new(&format!("{prefix}.eca"), channels, rng),
                EsaModule::new(&format!("{prefix}.esa"), rng),
            ),
            AttnKind::SelfAttn => {
                AttnModule::SelfAttn(AttnSpatial::new(&format!("{prefix}.sa"), channels, rng))
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, binder: &Binder<T>) -> Result<Tensor<T>> {
        match self {
            AttnModule::Eca(m) => m.forward(x, binder),
            AttnModule::Esa(m) => m.forward(x, binder),
            AttnModule::EcaEsa(eca, esa) => esa.forward(&eca.forward(x, binder)?, binder),
            AttnModule::SelfAttn(m) => m.forward(x, binder),
        }
    }
}

impl<T: Element> Visit<T> for AttnModule<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            AttnModule::Eca(m) => m.visit(f),
            AttnModule::Esa(m) => m.visit(f),
            AttnModule::EcaEsa(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            AttnModule::SelfAttn(m) => m.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            AttnModule::Eca(m) => m.visit_mut(f),
            AttnModule::Esa(m) => m.visit_mut(f),
            AttnModule::EcaEsa(a, b) => {
                a.visit_mut(f);
                b.visit_mut(f);
            }
            AttnModule::SelfAttn(m) => m.visit_mut(f),
        }
    }
}
