//! Training losses: voxel-mean cross-entropy, foreground-pooled soft Dice,
//! and their per-sample combination with dynamic weighting.
//!
//! With `alpha = ce / (ce + dice)` held constant for differentiation, the
//! per-sample total `(1 - alpha) * ce + alpha * dice` is numerically the
//! harmonic mean `2 * ce * dice / (ce + dice)`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Smoothing added to the soft-Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;
/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// How per-sample cross-entropy and Dice losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// `alpha = ce / (ce + dice)`, recomputed per sample, held constant
    /// for differentiation.
    Dynamic,
    /// Constant `alpha = 0.5`.
    FixedHalf,
}

/// Cross-entropy normalization. `Mean` keeps the two loss terms on
/// comparable scales; `Sum` is the literal voxel sum for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeMode {
    Mean,
    Sum,
}

/// Per-sample loss values, recorded as plain numbers for logging.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub ce: f64,
    pub dice: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Batch loss: the tracked scalar to differentiate plus per-sample values.
#[derive(Debug)]
pub struct SegLoss<T: Element> {
    pub total: Tensor<T>,
    pub samples: Vec<SampleLoss>,
}

impl<T: Element> SegLoss<T> {
    /// Mean per-sample soft Dice score `1 - dice_loss`.
    pub fn soft_dice(&self) -> f64 {
        let n = self.samples.len().max(1) as f64;
        self.samples.iter().map(|s| 1.0 - s.dice).sum::<f64>() / n
    }

    pub fn mean_ce(&self) -> f64 {
        let n = self.samples.len().max(1) as f64;
        self.samples.iter().map(|s| s.ce).sum::<f64>() / n
    }

    pub fn mean_dice(&self) -> f64 {
        let n = self.samples.len().max(1) as f64;
        self.samples.iter().map(|s| s.dice).sum::<f64>() / n
    }

    pub fn mean_alpha(&self) -> f64 {
        let n = self.samples.len().max(1) as f64;
        self.samples.iter().map(|s| s.alpha).sum::<f64>() / n
    }
}

/// Weight on the Dice term for one sample; the cross-entropy term gets
/// `1 - alpha`. Errors on negative inputs; `0.5` when both losses are zero.
pub fn dynamic_alpha(ce: f64, dice: f64) -> Result<f64> {
    if ce < 0.0 || dice < 0.0 {
        return Err(Error::invalid(format!(
            "loss terms must be non-negative, got ce={ce}, dice={dice}"
        )));
    }
    let sum = ce + dice;
    if sum == 0.0 {
        Ok(0.5)
    } else {
        Ok(ce / sum)
    }
}

/// One-hot encodes a label map into `[num_classes, len]` rows of 0/1.
pub fn one_hot<T: Element>(labels: &[u8], num_classes: usize) -> Result<Tensor<T>> {
    let n = labels.len();
    let mut data = vec![T::ZERO; num_classes * n];
    for (v, &label) in labels.iter().enumerate() {
        let c = label as usize;
        if c >= num_classes {
            return Err(Error::invalid(format!(
                "label {label} at voxel {v} exceeds class count {num_classes}"
            )));
        }
        data[c * n + v] = T::ONE;
    }
    Tensor::from_vec(&[num_classes, n], data)
}

/// Stacks per-sample label maps into one-hot truth `[B, num_classes, len]`.
pub fn one_hot_batch<T: Element>(labels: &[&[u8]], num_classes: usize) -> Result<Tensor<T>> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::invalid("empty label batch"));
    }
    let n = labels[0].len();
    let mut data = Vec::with_capacity(b * num_classes * n);
    for sample in labels {
        if sample.len() != n {
            return Err(Error::invalid("label maps in a batch must share extents"));
        }
        data.extend_from_slice(one_hot::<T>(sample, num_classes)?.data());
    }
    Tensor::from_vec(&[b, num_classes, n], data)
}

/// Pooled soft-Dice counts for reporting: softmax probabilities against
/// integer labels, with intersection and denominator summed over every
/// sample and foreground class. Returns `(2 * intersection, denominator)`;
/// finish with [`dice_score_from_counts`]. Plain value math, no tape.
pub fn soft_dice_counts<T: Element>(logits: &Tensor<T>, labels: &[&[u8]]) -> Result<(f64, f64)> {
    if logits.rank() < 3 {
        return Err(Error::invalid(format!(
            "expected logits [B, C, spatial...], got {:?}",
            logits.shape()
        )));
    }
    let b = logits.shape()[0];
    let classes = logits.shape()[1];
    let n: usize = logits.shape()[2..].iter().product();
    if labels.len() != b || labels.iter().any(|l| l.len() != n) {
        return Err(Error::invalid("labels must be one length-n map per sample"));
    }
    let data = logits.data();
    let mut inter = 0.0f64;
    let mut denom = 0.0f64;
    for (bi, map) in labels.iter().enumerate() {
        for v in 0..n {
            let at = |c: usize| data[(bi * classes + c) * n + v].to_f64();
            let max = (0..classes).map(at).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..classes).map(|c| (at(c) - max).exp()).sum();
            let label = map[v] as usize;
            if label >= classes {
                return Err(Error::invalid(format!("label {label} exceeds {classes} classes")));
            }
            for c in 1..classes {
                let p = (at(c) - max).exp() / z;
                let y = (label == c) as u8 as f64;
                inter += p * y;
                denom += p + y;
            }
        }
    }
    Ok((2.0 * inter, denom))
}

/// Smoothed pooled Dice score from [`soft_dice_counts`] sums.
pub fn dice_score_from_counts(twice_inter: f64, denom: f64) -> f64 {
    (twice_inter + DICE_EPS) / (denom + DICE_EPS)
}

fn per_sample_terms<T: Element>(
    probs: &Tensor<T>,
    truth: &Tensor<T>,
    sample: usize,
    ce_mode: CeMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let classes = probs.shape()[1];
    let n = probs.shape()[2];
    let p = probs.slice_axis(0, sample, 1)?;
    let y = truth.slice_axis(0, sample, 1)?;

    let ce_scale = match ce_mode {
        CeMode::Mean => -1.0 / n as f64,
        CeMode::Sum => -1.0,
    };
    let ce = p
        .clamp_min(PROB_FLOOR)
        .ln()
        .mul(&y)?
        .sum_all()?
        .affine(ce_scale, 0.0);

    let p_fg = p.slice_axis(1, 1, classes - 1)?;
    let y_fg = y.slice_axis(1, 1, classes - 1)?;
    let inter = p_fg.mul(&y_fg)?.sum_all()?;
    let denom = p_fg.sum_all()?.add(&y_fg.sum_all()?)?;
    // 1 - (2*inter + eps) / (denom + eps)
    let dice = inter
        .affine(2.0, DICE_EPS)
        .div(&denom.affine(1.0, DICE_EPS))?
        .affine(-1.0, 1.0);
    Ok((ce, dice))
}

fn validate_loss_shapes<T: Element>(
    logits: &Tensor<T>,
    truth: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    if logits.rank() < 3 {
        return Err(Error::invalid(format!(
            "loss expects logits [B, C, spatial...], got {:?}",
            logits.shape()
        )));
    }
    let b = logits.shape()[0];
    let classes = logits.shape()[1];
    let n: usize = logits.shape()[2..].iter().product();
    if classes < 2 {
        return Err(Error::invalid("loss needs at least 2 classes"));
    }
    if truth.shape() != [b, classes, n] {
        return Err(Error::ShapeMismatch {
            context: "loss truth must be one-hot [B, C, voxels]",
            lhs: vec![b, classes, n],
            rhs: truth.shape().to_vec(),
        });
    }
    Ok((b, classes, n))
}

/// Combined segmentation loss over a batch of logits `[B, C, spatial...]`
/// and one-hot truth `[B, C, voxels]`. The batch total is the mean of the
/// per-sample weighted combinations; alpha values are held constant for
/// differentiation.
pub fn segmentation_loss<T: Element>(
    logits: &Tensor<T>,
    truth: &Tensor<T>,
    mode: LossMode,
    ce_mode: CeMode,
) -> Result<SegLoss<T>> {
    let (b, classes, n) = validate_loss_shapes(logits, truth)?;
    let probs = logits.reshape(&[b, classes, n])?.softmax(1)?;

    let mut samples = Vec::with_capacity(b);
    let mut total: Option<Tensor<T>> = None;
    for i in 0..b {
        let (ce, dice) = per_sample_terms(&probs, truth, i, ce_mode)?;
        let ce_val = ce.item()?.to_f64();
        let dice_val = dice.item()?.to_f64();
        let alpha = match mode {
            LossMode::Dynamic => dynamic_alpha(ce_val, dice_val)?,
            LossMode::FixedHalf => 0.5,
        };
        let combined = ce.affine(1.0 - alpha, 0.0).add(&dice.affine(alpha, 0.0))?;
        samples.push(SampleLoss {
            ce: ce_val,
            dice: dice_val,
            alpha,
            total: combined.item()?.to_f64(),
        });
        total = Some(match total {
            Some(t) => t.add(&combined)?,
            None => combined,
        });
    }
    let total = total.expect("batch is non-empty").affine(1.0 / b as f64, 0.0);
    Ok(SegLoss { total, samples })
}

/// Same structure as [`segmentation_loss`] but with caller-chosen constant
/// per-sample weights `(w_ce, w_dice)`; used to compare the dynamic scheme
/// against fixed weightings at identical points.
pub fn fixed_weight_loss<T: Element>(
    logits: &Tensor<T>,
    truth: &Tensor<T>,
    weights: &[(f64, f64)],
    ce_mode: CeMode,
) -> Result<SegLoss<T>> {
    let (b, classes, n) = validate_loss_shapes(logits, truth)?;
    if weights.len() != b {
        return Err(Error::invalid("one weight pair per sample required"));
    }
    let probs = logits.reshape(&[b, classes, n])?.softmax(1)?;
    let mut samples = Vec::with_capacity(b);
    let mut total: Option<Tensor<T>> = None;
    for (i, &(w_ce, w_dice)) in weights.iter().enumerate() {
        let (ce, dice) = per_sample_terms(&probs, truth, i, ce_mode)?;
        let combined = ce.affine(w_ce, 0.0).add(&dice.affine(w_dice, 0.0))?;
        samples.push(SampleLoss {
            ce: ce.item()?.to_f64(),
            dice: dice.item()?.to_f64(),
            alpha: w_dice,
            total: combined.item()?.to_f64(),
        });
        total = Some(match total {
            Some(t) => t.add(&combined)?,
            None => combined,
        });
    }
    let total = total.expect("batch is non-empty").affine(1.0 / b as f64, 0.0);
    Ok(SegLoss { total, samples })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tape::Tape;

    fn random_logits(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..crate::tensor::numel_of(shape))
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random_labels(n: usize, classes: u8, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0..classes)).collect()
    }

    #[test]
    fn pooled_counts_agree_with_per_sample_dice() {
        let n = 40;
        for seed in 0..5 {
            let la = random_labels(n, 5, seed);
            let lb = random_labels(n, 5, seed + 90);
            let logits = random_logits(&[2, 5, n], seed);
            let truth = one_hot_batch::<f64>(&[&la, &lb], 5).unwrap();
            let loss =
                segmentation_loss(&logits, &truth, LossMode::Dynamic, CeMode::Mean).unwrap();

            // Batch counts must equal the sum of single-sample counts.
            let (i2, d) = soft_dice_counts(&logits, &[&la, &lb]).unwrap();
            let a = soft_dice_counts(&logits.slice_axis(0, 0, 1).unwrap(), &[&la]).unwrap();
            let b = soft_dice_counts(&logits.slice_axis(0, 1, 1).unwrap(), &[&lb]).unwrap();
            assert_relative_eq!(i2, a.0 + b.0, max_relative = 1e-12);
            assert_relative_eq!(d, a.1 + b.1, max_relative = 1e-12);

            // Single-sample pooled score matches the loss's dice term.
            assert_relative_eq!(
                dice_score_from_counts(a.0, a.1),
                1.0 - loss.samples[0].dice,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn uniform_prediction_ce_is_log_of_class_count() {
        let n = 24;
        let logits = Tensor::<f64>::zeros(&[1, 5, n]).unwrap();
        let labels = random_labels(n, 5, 1);
        let truth = one_hot_batch::<f64>(&[&labels], 5).unwrap();
        let loss = segmentation_loss(&logits, &truth, LossMode::Dynamic, CeMode::Mean).unwrap();
        assert_relative_eq!(loss.samples[0].ce, (5.0f64).ln(), max_relative = 1e-12);
        let sum = segmentation_loss(&logits, &truth, LossMode::Dynamic, CeMode::Sum).unwrap();
        assert_relative_eq!(sum.samples[0].ce, n as f64 * (5.0f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn perfect_prediction_losses_vanish() {
        let labels = vec![0u8, 1, 2, 3, 4, 2, 1, 3];
        let truth = one_hot_batch::<f64>(&[&labels], 5).unwrap();
        // Saturated logits drive the softmax to the one-hot truth.
        let mut logits = vec![0.0; 5 * labels.len()];
        for (v, &c) in labels.iter().enumerate() {
            logits[c as usize * labels.len() + v] = 60.0;
        }
        let logits = Tensor::from_vec(&[1, 5, labels.len()], logits).unwrap();
        let loss = segmentation_loss(&logits, &truth, LossMode::Dynamic, CeMode::Mean).unwrap();
        assert!(loss.samples[0].ce < 1e-10);
        assert!(loss.samples[0].dice < 1e-4, "dice {}", loss.samples[0].dice);
    }

    #[test]
    fn all_background_prediction_gets_full_dice_penalty() {
        let labels = vec![1u8; 16];
        let truth = one_hot_batch::<f64>(&[&labels], 5).unwrap();
        let mut logits = vec![0.0; 5 * 16];
        for v in 0..16 {
            logits[v] = 60.0; // class 0 column
        }
        let logits = Tensor::from_vec(&[1, 5, 16], logits).unwrap();
        let loss = segmentation_loss(&logits, &truth, LossMode::Dynamic, CeMode::Mean).unwrap();
        assert_relative_eq!(loss.samples[0].dice, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn two_voxel_dice_matches_hand_arithmetic() {
        // Foreground probability mass (0.5, 0.5) against truth (1, 0):
        // 1 - 2*0.5 / (1 + 1) = 0.5.
        let logits = Tensor::<f64>::zeros(&[1, 2, 2]).unwrap();
        let labels = vec![1u8, 0];
        let truth = one_hot_batch::<f64>(&[&labels], 2).unwrap();
        let loss = segmentation_loss(&logits, &truth, LossMode::Dynamic, CeMode::Mean).unwrap();
        assert_relative_eq!(loss.samples[0].dice, 0.5, epsilon = 1e-4);
    }

    #[test]
    fn alpha_arithmetic_matches_hand_values() {
        assert_eq!(dynamic_alpha(1.0, 3.0).unwrap(), 0.25);
        // (1 - 0.25)*1 + 0.25*3 = 1.5 = harmonic mean 2*1*3/(1+3).
        let alpha = dynamic_alpha(1.0, 3.0).unwrap();
        assert_relative_eq!((1.0 - alpha) * 1.0 + alpha * 3.0, 1.5, max_relative = 1e-15);
        assert_eq!(dynamic_alpha(2.0, 2.0).unwrap(), 0.5);
        assert_eq!(dynamic_alpha(0.0, 0.0).unwrap(), 0.5);
        assert!(dynamic_alpha(-1.0, 1.0).is_err());
    }

    #[test]
    fn dynamic_total_is_harmonic_mean_over_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let ce: f64 = rng.gen_range(1e-6..10.0);
            let dice: f64 = rng.gen_range(1e-6..10.0);
            let alpha = dynamic_alpha(ce, dice).unwrap();
            assert!(alpha > 0.0 && alpha < 1.0);
            let total = (1.0 - alpha) * ce + alpha * dice;
            let harmonic = 2.0 * ce * dice / (ce + dice);
            assert_relative_eq!(total, harmonic, max_relative = 1e-12);
        }
    }

    #[test]
    fn ce_matches_scalar_loop_oracle() {
        let (b, c, n) = (2, 5, 17);
        let logits = random_logits(&[b, c, n], 21);
        let labels: Vec<Vec<u8>> = (0..b).map(|i| random_labels(n, c as u8, 30 + i as u64)).collect();
        let refs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
        let truth = one_hot_batch::<f64>(&refs, c).unwrap();
        let loss = segmentation_loss(&logits, &truth, LossMode::Dynamic, CeMode::Mean).unwrap();

        for i in 0..b {
            let mut expected = 0.0;
            for v in 0..n {
                let mut denom = 0.0;
                for k in 0..c {
                    denom += logits.at(&[i, k, v]).exp();
                }
                let p = logits.at(&[i, labels[i][v] as usize, v]).exp() / denom;
                expected -= p.ln();
            }
            expected /= n as f64;
            assert_relative_eq!(loss.samples[i].ce, expected, max_relative = 1e-10);
        }
    }

    #[test]
    fn dynamic_gradient_equals_frozen_weight_gradient() {
        let (b, c, n) = (2, 5, 12);
        let base = random_logits(&[b, c, n], 5);
        let labels: Vec<Vec<u8>> = (0..b).map(|i| random_labels(n, c as u8, 40 + i as u64)).collect();
        let refs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
        let truth = one_hot_batch::<f64>(&refs, c).unwrap();

        let tape = Tape::new();
        let logits = tape.watch("logits", &base).unwrap();
        let dynamic = segmentation_loss(&logits, &truth, LossMode::Dynamic, CeMode::Mean).unwrap();
        let g_dynamic = dynamic.total.backward().unwrap();

        let weights: Vec<(f64, f64)> = dynamic
            .samples
            .iter()
            .map(|s| (1.0 - s.alpha, s.alpha))
            .collect();
        let tape2 = Tape::new();
        let logits2 = tape2.watch("logits", &base).unwrap();
        let frozen = fixed_weight_loss(&logits2, &truth, &weights, CeMode::Mean).unwrap();
        let g_frozen = frozen.total.backward().unwrap();

        let a = g_dynamic.get("logits").unwrap().data();
        let b_ = g_frozen.get("logits").unwrap().data();
        for (x, y) in a.iter().zip(b_) {
            assert_relative_eq!(x, y, max_relative = 1e-10, epsilon = 1e-14);
        }
    }

    #[test]
    fn fixed_half_mode_reports_constant_alpha() {
        let logits = random_logits(&[3, 5, 10], 2);
        let labels: Vec<Vec<u8>> = (0..3).map(|i| random_labels(10, 5, 50 + i as u64)).collect();
        let refs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
        let truth = one_hot_batch::<f64>(&refs, 5).unwrap();
        let loss = segmentation_loss(&logits, &truth, LossMode::FixedHalf, CeMode::Mean).unwrap();
        assert!(loss.samples.iter().all(|s| s.alpha == 0.5));
        let mean: f64 = loss.samples.iter().map(|s| s.total).sum::<f64>() / 3.0;
        assert_relative_eq!(loss.total.item().unwrap(), mean, max_relative = 1e-12);
    }

    #[test]
    fn loss_rejects_shape_mismatch_and_bad_labels() {
        let logits = Tensor::<f64>::zeros(&[1, 5, 8]).unwrap();
        let truth = Tensor::<f64>::zeros(&[1, 5, 9]).unwrap();
        assert!(segmentation_loss(&logits, &truth, LossMode::Dynamic, CeMode::Mean).is_err());
        assert!(one_hot::<f64>(&[5u8], 5).is_err());
    }
}
