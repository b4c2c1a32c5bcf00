//! Whole-network assembly: a three-level convolutional encoder, a tokenized
//! KAN bottleneck (two downsampling blocks, two mirrored upsampling blocks),
//! pyramid skip fusion and attention inserts chosen per variant, and a
//! convolutional decoder with a 1x1x1 classification head.
//!
//! Twelve variants share one configuration type; they differ only in where
//! attention sits (after encoder blocks, on skip tensors, or inside the
//! pyramid fusion) and whether the pyramid fusion is present at all.
//!
//! FLOP accounting uses a fixed cost model, identical for every layer kind:
//! convolutions and matmuls cost two ops per multiply-accumulate plus one
//! per bias add, elementwise ops cost one per output element, normalization
//! costs eight per element, softmax four, max pooling one per input element,
//! trilinear upsampling sixteen per output element, and the KAN spline path
//! costs its basis recursion (`2*k*(k+1)` per scalar) plus two per
//! coefficient-basis product.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{eca_kernel_size, head_count, AttnKind, AttnModule};
use crate::error::{Error, Result};
use crate::kan::{SplineGrid, TokKanBlock};
use crate::nn::{conv, max_pool3, normalize, upsample3_x2, ConvSpec};
use crate::ops::concat;
use crate::param::{kaiming_uniform, param_count, Binder, Param, Visit};
use crate::pyramid::PfaFusion;
use crate::tensor::{Element, Tensor};

/// Epsilon inside the per-channel instance normalization of conv blocks.
pub const IN_EPS: f64 = 1e-5;

/// Two 3x3x3 convolutions, each followed by instance normalization (stats
/// over the spatial axes, per sample and channel) and a relu.
#[derive(Debug)]
pub struct ConvBlock<T: Element> {
    conv1_w: Param<T>,
    conv1_b: Param<T>,
    norm1_gain: Param<T>,
    norm1_offset: Param<T>,
    conv2_w: Param<T>,
    conv2_b: Param<T>,
    norm2_gain: Param<T>,
    norm2_offset: Param<T>,
}

impl<T: Element> ConvBlock<T> {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let affine_shape = [1, c_out, 1, 1, 1];
        ConvBlock {
            conv1_w: Param::new(
                format!("{prefix}.conv1.weight"),
                kaiming_uniform(rng, &[c_out, c_in, 3, 3, 3], c_in * 27),
            ),
            conv1_b: Param::new(
                format!("{prefix}.conv1.bias"),
                Tensor::zeros(&[c_out]).expect("bias shape is valid"),
            ),
            norm1_gain: Param::new(
                format!("{prefix}.norm1.gain"),
                Tensor::full(&affine_shape, T::ONE).expect("gain shape is valid"),
            ),
            norm1_offset: Param::new(
                format!("{prefix}.norm1.offset"),
                Tensor::zeros(&affine_shape).expect("offset shape is valid"),
            ),
            conv2_w: Param::new(
                format!("{prefix}.conv2.weight"),
                kaiming_uniform(rng, &[c_out, c_out, 3, 3, 3], c_out * 27),
            ),
            conv2_b: Param::new(
                format!("{prefix}.conv2.bias"),
                Tensor::zeros(&[c_out]).expect("bias shape is valid"),
            ),
            norm2_gain: Param::new(
                format!("{prefix}.norm2.gain"),
                Tensor::full(&affine_shape, T::ONE).expect("gain shape is valid"),
            ),
            norm2_offset: Param::new(
                format!("{prefix}.norm2.offset"),
                Tensor::zeros(&affine_shape).expect("offset shape is valid"),
            ),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv1_w.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>, binder: &Binder<T>) -> Result<Tensor<T>> {
        let w1 = binder.bind(&self.conv1_w)?;
        let b1 = binder.bind(&self.conv1_b)?;
        let y = conv(x, &w1, Some(&b1), &ConvSpec::same(3, 1))?;
        let g1 = binder.bind(&self.norm1_gain)?;
        let o1 = binder.bind(&self.norm1_offset)?;
        let y = normalize(&y, &g1, &o1, &[2, 3, 4], IN_EPS)?.relu();

        let w2 = binder.bind(&self.conv2_w)?;
        let b2 = binder.bind(&self.conv2_b)?;
        let y = conv(&y, &w2, Some(&b2), &ConvSpec::same(3, 1))?;
        let g2 = binder.bind(&self.norm2_gain)?;
        let o2 = binder.bind(&self.norm2_offset)?;
        Ok(normalize(&y, &g2, &o2, &[2, 3, 4], IN_EPS)?.relu())
    }
}

impl<T: Element> Visit<T> for ConvBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.conv1_w);
        f(&self.conv1_b);
        f(&self.norm1_gain);
        f(&self.norm1_offset);
        f(&self.conv2_w);
        f(&self.conv2_b);
        f(&self.norm2_gain);
        f(&self.norm2_offset);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.conv1_w);
        f(&mut self.conv1_b);
        f(&mut self.norm1_gain);
        f(&mut self.norm1_offset);
        f(&mut self.conv2_w);
        f(&mut self.conv2_b);
        f(&mut self.norm2_gain);
        f(&mut self.norm2_offset);
    }
}

/// Network variant: the base model, or the base model with some combination
/// of pyramid fusion and attention inserts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Ukan,
    UkanEpEcaAfterPfa,
    UkanEpEcaBeforePfa,
    UkanPfa,
    UkanEcaAfterConv,
    UkanEcaAfterSkip,
    UkanPfaEsa,
    UkanEsa,
    UkanPfaEcaEsa,
    UkanEcaEsa,
    UkanPfaSelfattn,
    UkanSelfattn,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::Ukan,
        Variant::UkanEpEcaAfterPfa,
        Variant::UkanEpEcaBeforePfa,
        Variant::UkanPfa,
        Variant::UkanEcaAfterConv,
        Variant::UkanEcaAfterSkip,
        Variant::UkanPfaEsa,
        Variant::UkanEsa,
        Variant::UkanPfaEcaEsa,
        Variant::UkanEcaEsa,
        Variant::UkanPfaSelfattn,
        Variant::UkanSelfattn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ukan => "ukan",
            Variant::UkanEpEcaAfterPfa => "ukan_ep_eca_after_pfa",
            Variant::UkanEpEcaBeforePfa => "ukan_ep_eca_before_pfa",
            Variant::UkanPfa => "ukan_pfa",
            Variant::UkanEcaAfterConv => "ukan_eca_after_conv",
            Variant::UkanEcaAfterSkip => "ukan_eca_after_skip",
            Variant::UkanPfaEsa => "ukan_pfa_esa",
            Variant::UkanEsa => "ukan_esa",
            Variant::UkanPfaEcaEsa => "ukan_pfa_eca_esa",
            Variant::UkanEcaEsa => "ukan_eca_esa",
            Variant::UkanPfaSelfattn => "ukan_pfa_selfattn",
            Variant::UkanSelfattn => "ukan_selfattn",
        }
    }

    pub fn plan(self) -> VariantPlan {
        let mut plan = VariantPlan::default();
        match self {
            Variant::Ukan => {}
            Variant::UkanEpEcaAfterPfa => {
                plan.pfa = true;
                plan.pfa_fuse = Some(AttnKind::Eca);
            }
            Variant::UkanEpEcaBeforePfa => {
                plan.pfa = true;
                plan.pfa_pre_eca = true;
            }
            Variant::UkanPfa => plan.pfa = true,
            Variant::UkanEcaAfterConv => plan.enc_attn = Some(AttnKind::Eca),
            Variant::UkanEcaAfterSkip => plan.skip_attn = Some(AttnKind::Eca),
            Variant::UkanPfaEsa => {
                plan.pfa = true;
                plan.pfa_fuse = Some(AttnKind::Esa);
            }
            Variant::UkanEsa => plan.enc_attn = Some(AttnKind::Esa),
            Variant::UkanPfaEcaEsa => {
                plan.pfa = true;
                plan.pfa_fuse = Some(AttnKind::EcaEsa);
            }
            Variant::UkanEcaEsa => plan.enc_attn = Some(AttnKind::EcaEsa),
            Variant::UkanPfaSelfattn => {
                plan.pfa = true;
                plan.pfa_fuse = Some(AttnKind::SelfAttn);
            }
            Variant::UkanSelfattn => plan.skip_attn = Some(AttnKind::SelfAttn),
        }
        plan
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown variant {s:?}; expected one of {}",
                    Variant::ALL.map(Variant::name).join(", ")
                ))
            })
    }
}

/// Where a variant places its optional pieces.
#[derive(Debug, Clone, Copy, Default)]
pub struct VariantPlan {
    /// Attention applied to each encoder block output, inside the trunk.
    pub enc_attn: Option<AttnKind>,
    /// Attention applied to each skip tensor just before the decoder concat.
    pub skip_attn: Option<AttnKind>,
    /// Fuse multi-scale encoder features into the level-1/2 skips.
    pub pfa: bool,
    /// Attention applied to each fused skip inside the pyramid fusion.
    pub pfa_fuse: Option<AttnKind>,
    /// Channel attention on each encoder scale before fusion.
    pub pfa_pre_eca: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: [usize; 3],
    pub token_dims: [usize; 2],
    pub grid_size: usize,
    pub spline_order: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::UkanEpEcaAfterPfa,
            in_channels: 4,
            num_classes: 5,
            encoder_channels: [8, 16, 32],
            token_dims: [64, 96],
            grid_size: 5,
            spline_order: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [c1, c2, c3] = self.encoder_channels;
        if !(c1 < c2 && c2 < c3) || c1 == 0 {
            return Err(Error::invalid(format!(
                "encoder channels must be strictly increasing, got {:?}",
                self.encoder_channels
            )));
        }
        if self.token_dims.iter().any(|&e| e == 0) {
            return Err(Error::invalid("token dims must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        SplineGrid::new(self.grid_size, self.spline_order, -1.0, 1.0)?;
        Ok(())
    }

    /// Channel widths of the level-1/2 skip tensors consumed by the decoder.
    pub fn skip_channels(&self) -> (usize, usize) {
        let [c1, c2, c3] = self.encoder_channels;
        if self.variant.plan().pfa {
            (c1 + c2 + c3, c2 + c3)
        } else {
            (c1, c2)
        }
    }

    /// Decoder block output widths (level 3 down to 1); each block halves
    /// its concatenated input width, rounding up.
    pub fn decoder_channels(&self) -> (usize, usize, usize) {
        let c3 = self.encoder_channels[2];
        let (s1, s2) = self.skip_channels();
        let d3 = (c3 + c3).div_ceil(2);
        let d2 = (d3 + s2).div_ceil(2);
        let d1 = (d2 + s1).div_ceil(2);
        (d3, d2, d1)
    }
}

/// The assembled network. Parameter names are unique, derived from the
/// stage names (`enc1..enc3`, `bneck.down1/down2/up1/up2`, `pfa`,
/// `enc_attn*`/`skip_attn*`, `dec3..dec1`, `head`), and stable across runs
/// with the same configuration.
#[derive(Debug)]
pub struct Model<T: Element> {
    config: ModelConfig,
    enc1: ConvBlock<T>,
    enc2: ConvBlock<T>,
    enc3: ConvBlock<T>,
    enc_attn: Vec<AttnModule<T>>,
    skip_attn: Vec<AttnModule<T>>,
    down1: TokKanBlock<T>,
    down2: TokKanBlock<T>,
    up1: TokKanBlock<T>,
    up2: TokKanBlock<T>,
    pfa: Option<PfaFusion<T>>,
    dec3: ConvBlock<T>,
    dec2: ConvBlock<T>,
    dec1: ConvBlock<T>,
    head_w: Param<T>,
    head_b: Param<T>,
}

impl<T: Element> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let plan = config.variant.plan();
        let [c1, c2, c3] = config.encoder_channels;
        let [e1, e2] = config.token_dims;
        let rng = &mut ChaCha8Rng::seed_from_u64(config.seed);
        let grid = |cfg: &ModelConfig| SplineGrid::new(cfg.grid_size, cfg.spline_order, -1.0, 1.0);

        let enc1 = ConvBlock::new("enc1", config.in_channels, c1, rng);
        let enc2 = ConvBlock::new("enc2", c1, c2, rng);
        let enc3 = ConvBlock::new("enc3", c2, c3, rng);
        let enc_attn = match plan.enc_attn {
            Some(kind) => vec![
                AttnModule::new(kind, "enc_attn1", c1, rng),
                AttnModule::new(kind, "enc_attn2", c2, rng),
                AttnModule::new(kind, "enc_attn3", c3, rng),
            ],
            None => Vec::new(),
        };
        let skip_attn = match plan.skip_attn {
            Some(kind) => vec![
                AttnModule::new(kind, "skip_attn1", c1, rng),
                AttnModule::new(kind, "skip_attn2", c2, rng),
                AttnModule::new(kind, "skip_attn3", c3, rng),
            ],
            None => Vec::new(),
        };
        let down1 = TokKanBlock::new("bneck.down1", c3, e1, 2, grid(config)?, rng);
        let down2 = TokKanBlock::new("bneck.down2", e1, e2, 2, grid(config)?, rng);
        let up1 = TokKanBlock::new("bneck.up1", e2, e1, 1, grid(config)?, rng);
        let up2 = TokKanBlock::new("bneck.up2", e1, c3, 1, grid(config)?, rng);
        let pfa = plan.pfa.then(|| {
            PfaFusion::new("pfa", [c1, c2, c3], plan.pfa_fuse, plan.pfa_pre_eca, rng)
        });
        let (d3, d2, d1) = config.decoder_channels();
        let (s1, s2) = config.skip_channels();
        let dec3 = ConvBlock::new("dec3", c3 + c3, d3, rng);
        let dec2 = ConvBlock::new("dec2", d3 + s2, d2, rng);
        let dec1 = ConvBlock::new("dec1", d2 + s1, d1, rng);
        let head_w = Param::new(
            "head.weight",
            kaiming_uniform(rng, &[config.num_classes, d1, 1, 1, 1], d1),
        );
        let head_b = Param::new(
            "head.bias",
            Tensor::zeros(&[config.num_classes]).expect("bias shape is valid"),
        );

        Ok(Model {
            config: config.clone(),
            enc1,
            enc2,
            enc3,
            enc_attn,
            skip_attn,
            down1,
            down2,
            up1,
            up2,
            pfa,
            dec3,
            dec2,
            dec1,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    fn validate_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                context: "model input must be [B, in_channels, D, H, W]",
                lhs: vec![self.config.in_channels],
                rhs: shape.to_vec(),
            });
        }
        if shape[0] == 0 || shape[2..].iter().any(|&e| e == 0 || e % 16 != 0) {
            return Err(Error::invalid(format!(
                "spatial extents must be positive multiples of 16, got {:?}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    /// `x`: `[B, in_channels, D, H, W]` -> logits `[B, num_classes, D, H, W]`.
    /// Spatial extents must be divisible by 16 (three encoder levels plus two
    /// tokenizer strides).
    pub fn forward(&self, x: &Tensor<T>, binder: &Binder<T>) -> Result<Tensor<T>> {
        self.validate_input(x.shape())?;

        let mut x1 = self.enc1.forward(x, binder)?;
        if let Some(attn) = self.enc_attn.first() {
            x1 = attn.forward(&x1, binder)?;
        }
        let mut x2 = self.enc2.forward(&max_pool3(&x1)?, binder)?;
        if let Some(attn) = self.enc_attn.get(1) {
            x2 = attn.forward(&x2, binder)?;
        }
        let mut x3 = self.enc3.forward(&max_pool3(&x2)?, binder)?;
        if let Some(attn) = self.enc_attn.get(2) {
            x3 = attn.forward(&x3, binder)?;
        }

        let t1 = self.down1.forward(&x3, binder)?;
        let t2 = self.down2.forward(&t1, binder)?;
        let u1 = self.up1.forward(&upsample3_x2(&t2)?, binder)?;
        let u2 = self.up2.forward(&upsample3_x2(&u1)?, binder)?;

        let (skip1, skip2, skip3) = match &self.pfa {
            Some(pfa) => {
                let (s1, s2) = pfa.forward(&x1, &x2, &x3, binder)?;
                (s1, s2, x3)
            }
            None => {
                let mut skips = [x1, x2, x3];
                for (i, s) in skips.iter_mut().enumerate() {
                    if let Some(attn) = self.skip_attn.get(i) {
                        *s = attn.forward(s, binder)?;
                    }
                }
                let [s1, s2, s3] = skips;
                (s1, s2, s3)
            }
        };

        let d3 = self.dec3.forward(&concat(&[&u2, &skip3], 1)?, binder)?;
        let d2 = self
            .dec2
            .forward(&concat(&[&upsample3_x2(&d3)?, &skip2], 1)?, binder)?;
        let d1 = self
            .dec1
            .forward(&concat(&[&upsample3_x2(&d2)?, &skip1], 1)?, binder)?;

        let hw = binder.bind(&self.head_w)?;
        let hb = binder.bind(&self.head_b)?;
        conv(&d1, &hw, Some(&hb), &ConvSpec::same(3, 0))
    }

    /// Per-layer FLOP breakdown for one forward pass on `input_shape`.
    pub fn flops(&self, input_shape: &[usize]) -> Result<FlopReport> {
        self.validate_input(input_shape)?;
        let plan = self.config.variant.plan();
        let [c1, c2, c3] = self.config.encoder_channels;
        let [e1, e2] = self.config.token_dims;
        let b = input_shape[0] as u64;
        let sp1: u64 = input_shape[2..].iter().map(|&e| e as u64).product();
        let (sp2, sp3, sp4) = (sp1 / 8, sp1 / 64, sp1 / 512);
        let grid = SplineGrid::new(self.config.grid_size, self.config.spline_order, -1.0, 1.0)?;

        let mut rows: Vec<(String, u64)> = Vec::new();
        let mut push = |name: &str, f: u64| rows.push((name.to_string(), f));

        push(
            "enc1",
            conv_block_flops(b, self.config.in_channels as u64, c1 as u64, sp1),
        );
        push("pool1", b * c1 as u64 * sp1);
        push("enc2", conv_block_flops(b, c1 as u64, c2 as u64, sp2));
        push("pool2", b * c2 as u64 * sp2);
        push("enc3", conv_block_flops(b, c2 as u64, c3 as u64, sp3));
        if let Some(kind) = plan.enc_attn {
            push("enc_attn1", attn_flops(kind, b, c1 as u64, sp1));
            push("enc_attn2", attn_flops(kind, b, c2 as u64, sp2));
            push("enc_attn3", attn_flops(kind, b, c3 as u64, sp3));
        }
        push(
            "bneck.down1",
            tok_kan_flops(b, c3 as u64, e1 as u64, 2, sp3, &grid),
        );
        push(
            "bneck.down2",
            tok_kan_flops(b, e1 as u64, e2 as u64, 2, sp4, &grid),
        );
        push("up1.sample", 16 * b * e2 as u64 * sp4);
        push(
            "bneck.up1",
            tok_kan_flops(b, e2 as u64, e1 as u64, 1, sp4, &grid),
        );
        push("up2.sample", 16 * b * e1 as u64 * sp3);
        push(
            "bneck.up2",
            tok_kan_flops(b, e1 as u64, c3 as u64, 1, sp3, &grid),
        );
        if plan.pfa {
            let mut f = 0;
            if plan.pfa_pre_eca {
                f += eca_flops(b, c1 as u64, sp1)
                    + eca_flops(b, c2 as u64, sp2)
                    + eca_flops(b, c3 as u64, sp3);
            }
            f += 16 * b * c3 as u64 * sp2;
            if let Some(kind) = plan.pfa_fuse {
                f += attn_flops(kind, b, (c2 + c3) as u64, sp2);
            }
            f += 16 * b * (c2 + c3) as u64 * sp1;
            if let Some(kind) = plan.pfa_fuse {
                f += attn_flops(kind, b, (c1 + c2 + c3) as u64, sp1);
            }
            push("pfa", f);
        }
        if let Some(kind) = plan.skip_attn {
            push("skip_attn1", attn_flops(kind, b, c1 as u64, sp1));
            push("skip_attn2", attn_flops(kind, b, c2 as u64, sp2));
            push("skip_attn3", attn_flops(kind, b, c3 as u64, sp3));
        }
        let (d3, d2, d1) = self.config.decoder_channels();
        let (s1, s2) = self.config.skip_channels();
        push("dec3", conv_block_flops(b, 2 * c3 as u64, d3 as u64, sp3));
        push("dec2.sample", 16 * b * d3 as u64 * sp2);
        push("dec2", conv_block_flops(b, (d3 + s2) as u64, d2 as u64, sp2));
        push("dec1.sample", 16 * b * d2 as u64 * sp1);
        push("dec1", conv_block_flops(b, (d2 + s1) as u64, d1 as u64, sp1));
        push(
            "head",
            conv_flops(b, self.config.num_classes as u64, d1 as u64, 1, sp1, true),
        );
        Ok(FlopReport { rows })
    }
}

impl<T: Element> Visit<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.enc1.visit(f);
        self.enc2.visit(f);
        self.enc3.visit(f);
        for m in &self.enc_attn {
            m.visit(f);
        }
        for m in &self.skip_attn {
            m.visit(f);
        }
        self.down1.visit(f);
        self.down2.visit(f);
        self.up1.visit(f);
        self.up2.visit(f);
        if let Some(pfa) = &self.pfa {
            pfa.visit(f);
        }
        self.dec3.visit(f);
        self.dec2.visit(f);
        self.dec1.visit(f);
        f(&self.head_w);
        f(&self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.enc1.visit_mut(f);
        self.enc2.visit_mut(f);
        self.enc3.visit_mut(f);
        for m in &mut self.enc_attn {
            m.visit_mut(f);
        }
        for m in &mut self.skip_attn {
            m.visit_mut(f);
        }
        self.down1.visit_mut(f);
        self.down2.visit_mut(f);
        self.up1.visit_mut(f);
        self.up2.visit_mut(f);
        if let Some(pfa) = &mut self.pfa {
            pfa.visit_mut(f);
        }
        self.dec3.visit_mut(f);
        self.dec2.visit_mut(f);
        self.dec1.visit_mut(f);
        f(&mut self.head_w);
        f(&mut self.head_b);
    }
}

/// Named per-layer FLOP rows in forward order.
#[derive(Debug, Clone)]
pub struct FlopReport {
    pub rows: Vec<(String, u64)>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.rows.iter().map(|(_, f)| f).sum()
    }
}

fn conv_flops(b: u64, c_out: u64, c_in_per_group: u64, k_numel: u64, out_sp: u64, bias: bool) -> u64 {
    2 * b * c_out * c_in_per_group * k_numel * out_sp + if bias { b * c_out * out_sp } else { 0 }
}

fn matmul_flops(b: u64, m: u64, k: u64, n: u64) -> u64 {
    2 * b * m * k * n
}

fn conv_block_flops(b: u64, c_in: u64, c: u64, sp: u64) -> u64 {
    let n = b * c * sp;
    conv_flops(b, c, c_in, 27, sp, true) + 9 * n + conv_flops(b, c, c, 27, sp, true) + 9 * n
}

fn kan_flops(n_tok: u64, e: u64, grid: &SplineGrid) -> u64 {
    let k = grid.order() as u64;
    let nb = grid.num_bases() as u64;
    n_tok * e + matmul_flops(1, n_tok, e, e) + n_tok * e * 2 * k * (k + 1) + 2 * n_tok * e * e * nb
}

fn tok_kan_flops(b: u64, c_in: u64, e: u64, stride: u64, in_sp: u64, grid: &SplineGrid) -> u64 {
    let out_sp = in_sp / (stride * stride * stride);
    conv_flops(b, e, c_in, 27, out_sp, true)
        + kan_flops(b * out_sp, e, grid)
        + conv_flops(b, e, 1, 27, out_sp, false)
        + b * e * out_sp
        + 8 * b * e * out_sp
}

fn eca_flops(b: u64, c: u64, sp: u64) -> u64 {
    b * c * sp + 2 * b * c * eca_kernel_size(c as usize) as u64 + b * c + b * c * sp
}

fn esa_flops(b: u64, c: u64, sp: u64) -> u64 {
    b * c * sp + 2 * b * 343 * sp + b * sp + b * c * sp
}

fn self_attn_flops(b: u64, n: u64, e: u64) -> u64 {
    let h = head_count(e as usize) as u64;
    4 * matmul_flops(1, b * n, e, e)
        + matmul_flops(b * h, n, e / h, n)
        + b * h * n * n
        + 4 * b * h * n * n
        + matmul_flops(b * h, n, n, e / h)
        + b * n * e
}

fn attn_spatial_flops(b: u64, c: u64, sp: u64) -> u64 {
    let tok_sp = sp / 8;
    conv_flops(b, c, c, 27, tok_sp, true) + self_attn_flops(b, tok_sp, c) + 16 * b * c * sp
}

fn attn_flops(kind: AttnKind, b: u64, c: u64, sp: u64) -> u64 {
    match kind {
        AttnKind::Eca => eca_flops(b, c, sp),
        AttnKind::Esa => esa_flops(b, c, sp),
        AttnKind::EcaEsa => eca_flops(b, c, sp) + esa_flops(b, c, sp),
        AttnKind::SelfAttn => attn_spatial_flops(b, c, sp),
    }
}
