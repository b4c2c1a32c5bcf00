//! Pyramid skip fusion: encoder features from all three scales are merged
//! into enriched skip connections before the decoder consumes them.
//!
//! The deepest map is upsampled and concatenated onto the middle one
//! (deep channels first), optionally passed through an attention module,
//! then the result is upsampled and concatenated onto the shallowest map
//! and treated the same way. The fused maps replace the plain skips.

use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnKind, AttnModule, EcaModule};
use crate::error::Result;
use crate::nn::upsample3_x2;
use crate::ops::concat;
use crate::param::{Binder, Param, Visit};
use crate::tensor::{Element, Tensor};

#[derive(Debug)]
pub struct PfaFusion<T: Element> {
    /// Channel attention applied to each scale before fusion (optional).
    pre: Vec<EcaModule<T>>,
    /// Attention after the level-2 concat (deep + middle).
    fuse2: Option<AttnModule<T>>,
    /// Attention after the level-1 concat (fused + shallow).
    fuse1: Option<AttnModule<T>>,
    channels: [usize; 3],
}

impl<T: Element> PfaFusion<T> {
    /// `channels` are the encoder widths `[shallow, middle, deep]`.
    pub fn new(
        prefix: &str,
        channels: [usize; 3],
        fuse: Option<AttnKind>,
        eca_before: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let [c1, c2, c3] = channels;
        let pre = if eca_before {
            vec![
                EcaModule::new(&format!("{prefix}.pre1"), c1, rng),
                EcaModule::new(&format!("{prefix}.pre2"), c2, rng),
                EcaModule::new(&format!("{prefix}.pre3"), c3, rng),
            ]
        } else {
            Vec::new()
        };
        let fuse2 = fuse.map(|k| AttnModule::new(k, &format!("{prefix}.fuse2"), c2 + c3, rng));
        let fuse1 = fuse.map(|k| AttnModule::new(k, &format!("{prefix}.fuse1"), c1 + c2 + c3, rng));
        PfaFusion {
            pre,
            fuse2,
            fuse1,
            channels,
        }
    }

    pub fn skip2_channels(&self) -> usize {
        self.channels[1] + self.channels[2]
    }

    pub fn skip1_channels(&self) -> usize {
        self.channels[0] + self.channels[1] + self.channels[2]
    }

    /// Fuses `(x1, x2, x3)` at scales `(1, 1/2, 1/4)` into skip maps at
    /// scales `(1, 1/2)`.
    pub fn forward(
        &self,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
        x3: &Tensor<T>,
        binder: &Binder<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (x1, x2, x3) = if self.pre.is_empty() {
            (x1.clone(), x2.clone(), x3.clone())
        } else {
            (
                self.pre[0].forward(x1, binder)?,
                self.pre[1].forward(x2, binder)?,
                self.pre[2].forward(x3, binder)?,
            )
        };
        let up3 = upsample3_x2(&x3)?;
        let cat2 = concat(&[&up3, &x2], 1)?;
        let skip2 = match &self.fuse2 {
            Some(attn) => attn.forward(&cat2, binder)?,
            None => cat2,
        };
        let up2 = upsample3_x2(&skip2)?;
        let cat1 = concat(&[&up2, &x1], 1)?;
        let skip1 = match &self.fuse1 {
            Some(attn) => attn.forward(&cat1, binder)?,
            None => cat1,
        };
        Ok((skip1, skip2))
    }
}

impl<T: Element> Visit<T> for PfaFusion<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for m in &self.pre {
            m.visit(f);
        }
        if let Some(m) = &self.fuse2 {
            m.visit(f);
        }
        if let Some(m) = &self.fuse1 {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for m in &mut self.pre {
            m.visit_mut(f);
        }
        if let Some(m) = &mut self.fuse2 {
            m.visit_mut(f);
        }
        if let Some(m) = &mut self.fuse1 {
            m.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::param_count;
    use rand::SeedableRng;

    #[test]
    fn fused_skips_have_summed_channels_with_deep_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pfa = PfaFusion::<f64>::new("p", [2, 3, 4], None, false, &mut rng);
        let x1 = Tensor::full(&[1, 2, 8, 8, 8], 1.0).unwrap();
        let x2 = Tensor::full(&[1, 3, 4, 4, 4], 2.0).unwrap();
        let x3 = Tensor::full(&[1, 4, 2, 2, 2], 3.0).unwrap();
        let (skip1, skip2) = pfa
            .forward(&x1, &x2, &x3, &Binder::inference())
            .unwrap();
        assert_eq!(skip2.shape(), &[1, 7, 4, 4, 4]);
        assert_eq!(skip1.shape(), &[1, 9, 8, 8, 8]);
        // Without attention the fusion is pure upsample/concat of constants:
        // deep channels come first.
        let d2 = skip2.data();
        assert!(d2[..4 * 64].iter().all(|&v| v == 3.0));
        assert!(d2[4 * 64..].iter().all(|&v| v == 2.0));
        let d1 = skip1.data();
        assert!(d1[..4 * 512].iter().all(|&v| v == 3.0));
        assert!(d1[4 * 512..7 * 512].iter().all(|&v| v == 2.0));
        assert!(d1[7 * 512..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_attention_fusion_adds_one_kernel_per_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plain = PfaFusion::<f64>::new("p", [8, 16, 32], None, false, &mut rng);
        let eca = PfaFusion::<f64>::new("q", [8, 16, 32], Some(AttnKind::Eca), false, &mut rng);
        assert_eq!(param_count(&plain), 0);
        // Both fused widths (48 and 56) use 3-tap kernels.
        assert_eq!(param_count(&eca), 6);
    }

    #[test]
    fn pre_fusion_channel_attention_keeps_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pfa = PfaFusion::<f64>::new("p", [2, 3, 4], None, true, &mut rng);
        let x1 = Tensor::full(&[1, 2, 8, 8, 8], 1.0).unwrap();
        let x2 = Tensor::full(&[1, 3, 4, 4, 4], 2.0).unwrap();
        let x3 = Tensor::full(&[1, 4, 2, 2, 2], 3.0).unwrap();
        let (skip1, skip2) = pfa
            .forward(&x1, &x2, &x3, &Binder::inference())
            .unwrap();
        assert_eq!(skip2.shape(), &[1, 7, 4, 4, 4]);
        assert_eq!(skip1.shape(), &[1, 9, 8, 8, 8]);
        assert_eq!(param_count(&pfa), 9);
    }
}
