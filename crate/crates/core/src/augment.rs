//! Training-time augmentation: crop, per-axis flips, additive noise,
//! small-angle in-plane rotation, and mean-preserving contrast scaling,
//! applied in that fixed order.
//!
//! Every augmentation is a pure function of `(sample, config, draw_seed)`.
//! Per-sample seeds derive from the global seed with [`per_sample_seed`],
//! so a loader may process samples in any order or in parallel without
//! changing the result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::phantom::{SampleVolume, MODALITIES};
use crate::tensor::Tensor;

/// Augmentation knobs. The defaults through [`AugmentConfig::new`] are the
/// training values; [`AugmentConfig::identity`] disables every random
/// effect for pipeline plumbing tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop: [usize; 3],
    pub flip_prob: f64,
    pub noise_sigma: f64,
    pub rotate_deg: f64,
    pub contrast: (f64, f64),
    pub seed: u64,
}

impl AugmentConfig {
    pub fn new(crop: [usize; 3], seed: u64) -> Self {
        Self {
            crop,
            flip_prob: 0.5,
            noise_sigma: 0.01,
            rotate_deg: 10.0,
            contrast: (0.8, 1.2),
            seed,
        }
    }

    pub fn identity(crop: [usize; 3]) -> Self {
        Self {
            crop,
            flip_prob: 0.0,
            noise_sigma: 0.0,
            rotate_deg: 0.0,
            contrast: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop.iter().any(|&c| c == 0) {
            return Err(Error::Data("crop extents must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Data(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        if self.noise_sigma < 0.0 || self.rotate_deg < 0.0 {
            return Err(Error::Data("noise sigma and rotation must be >= 0".into()));
        }
        let (lo, hi) = self.contrast;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return Err(Error::Data(format!("bad contrast range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Seed for one sample's augmentation stream: FNV-1a over the global seed,
/// the case id, and the epoch. Stable across platforms and runs.
pub fn per_sample_seed(global_seed: u64, case_id: &str, epoch: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&global_seed.to_le_bytes());
    eat(case_id.as_bytes());
    eat(&(epoch as u64).to_le_bytes());
    h
}

/// The random choices of one augmentation pass, exposed so their
/// distributions can be audited without re-deriving them from voxel data.
#[derive(Debug, Clone, Copy)]
pub struct AugmentDraws {
    pub crop_lo: [usize; 3],
    pub flips: [bool; 3],
    /// Rotated axis pair and angle in radians; absent when rotation is off.
    pub rotation: Option<([usize; 2], f64)>,
    pub contrast: [f64; 4],
}

const AXIS_PAIRS: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];

/// Runs the full pipeline: crop that keeps the foreground bounding box,
/// independent per-axis flips, additive Gaussian noise on foreground
/// voxels, rotation about a random axis pair (image trilinear, labels
/// nearest neighbor), then per-modality mean-preserving contrast scaling.
pub fn augment(sample: &SampleVolume, cfg: &AugmentConfig, draw_seed: u64) -> Result<SampleVolume> {
    augment_traced(sample, cfg, draw_seed).map(|(out, _)| out)
}

/// [`augment`] plus the random choices it made.
pub fn augment_traced(
    sample: &SampleVolume,
    cfg: &AugmentConfig,
    draw_seed: u64,
) -> Result<(SampleVolume, AugmentDraws)> {
    cfg.validate()?;
    if cfg.crop.iter().zip(sample.extents).any(|(&c, e)| c > e) {
        return Err(Error::Data(format!(
            "crop {:?} exceeds volume extents {:?}",
            cfg.crop, sample.extents
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);

    let crop_lo = draw_crop(sample, cfg.crop, &mut rng);
    let (mut image, mut labels) = crop(sample, cfg.crop, crop_lo);
    let extents = cfg.crop;

    let mut flips = [false; 3];
    for (axis, flip) in flips.iter_mut().enumerate() {
        *flip = rng.gen_bool(cfg.flip_prob);
        if *flip {
            flip_axis(&mut image, extents, axis);
            flip_labels(&mut labels, extents, axis);
        }
    }

    if cfg.noise_sigma > 0.0 {
        let mask = foreground(&image, extents);
        let normal = Normal::new(0.0f64, cfg.noise_sigma).expect("positive sigma");
        let voxels = labels.len();
        for plane in image.chunks_exact_mut(voxels) {
            for (v, &fg) in plane.iter_mut().zip(&mask) {
                if fg {
                    *v = (*v as f64 + normal.sample(&mut rng)) as f32;
                }
            }
        }
    }

    let mut rotation = None;
    if cfg.rotate_deg > 0.0 {
        let pair = AXIS_PAIRS[rng.gen_range(0..AXIS_PAIRS.len())];
        let max = cfg.rotate_deg.to_radians();
        let theta = rng.gen_range(-max..max);
        rotation = Some((pair, theta));
        (image, labels) = rotate_volume(&image, &labels, extents, pair, theta);
    }

    let mut contrast = [1.0f64; 4];
    if cfg.contrast != (1.0, 1.0) {
        let mask = foreground(&image, extents);
        let voxels = labels.len();
        for (m, plane) in image.chunks_exact_mut(voxels).enumerate() {
            let f = if cfg.contrast.0 == cfg.contrast.1 {
                cfg.contrast.0
            } else {
                rng.gen_range(cfg.contrast.0..cfg.contrast.1)
            };
            contrast[m] = f;
            apply_contrast(plane, &mask, f);
        }
    }
    let out = SampleVolume::new(
        Tensor::from_vec(&[MODALITIES.len(), extents[0], extents[1], extents[2]], image)?,
        labels,
        extents,
        sample.case_id.clone(),
    )?;
    Ok((
        out,
        AugmentDraws {
            crop_lo,
            flips,
            rotation,
            contrast,
        },
    ))
}

/// Crop origin: uniform within the slack that keeps the foreground
/// bounding box inside the window; when the box cannot fit, the window is
/// centered on it and clamped to the volume.
fn draw_crop(sample: &SampleVolume, crop: [usize; 3], rng: &mut ChaCha8Rng) -> [usize; 3] {
    let bbox = foreground_bbox(sample);
    let mut lo = [0usize; 3];
    for k in 0..3 {
        let vol = sample.extents[k];
        let (b_lo, b_hi) = bbox[k];
        let min = (b_hi + 1).saturating_sub(crop[k]);
        let max = (vol - crop[k]).min(b_lo);
        lo[k] = if min <= max {
            rng.gen_range(min..max + 1)
        } else {
            let center = (b_lo + b_hi + 1) / 2;
            center.saturating_sub(crop[k] / 2).min(vol - crop[k])
        };
    }
    lo
}

/// Inclusive per-axis bounds of voxels where any modality is nonzero; the
/// full volume when everything is zero.
fn foreground_bbox(sample: &SampleVolume) -> [(usize, usize); 3] {
    let [d, h, w] = sample.extents;
    let voxels = sample.voxels();
    let data = sample.image.data();
    let mut bbox = [(usize::MAX, 0usize); 3];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if (0..MODALITIES.len()).any(|m| data[m * voxels + i] != 0.0) {
                    for (k, &c) in [z, y, x].iter().enumerate() {
                        bbox[k].0 = bbox[k].0.min(c);
                        bbox[k].1 = bbox[k].1.max(c);
                    }
                }
            }
        }
    }
    if bbox[0].0 == usize::MAX {
        return [(0, d - 1), (0, h - 1), (0, w - 1)];
    }
    bbox
}

fn crop(sample: &SampleVolume, crop: [usize; 3], lo: [usize; 3]) -> (Vec<f32>, Vec<u8>) {
    let [_, h, w] = sample.extents;
    let [cd, ch, cw] = crop;
    let src = sample.image.data();
    let voxels = sample.voxels();
    let mut image = vec![0.0f32; MODALITIES.len() * cd * ch * cw];
    let mut labels = vec![0u8; cd * ch * cw];
    for m in 0..MODALITIES.len() {
        for z in 0..cd {
            for y in 0..ch {
                for x in 0..cw {
                    let s = ((z + lo[0]) * h + y + lo[1]) * w + x + lo[2];
                    image[((m * cd + z) * ch + y) * cw + x] = src[m * voxels + s];
                }
            }
        }
    }
    for z in 0..cd {
        for y in 0..ch {
            for x in 0..cw {
                let s = ((z + lo[0]) * h + y + lo[1]) * w + x + lo[2];
                labels[(z * ch + y) * cw + x] = sample.labels[s];
            }
        }
    }
    (image, labels)
}

fn flip_axis(image: &mut [f32], extents: [usize; 3], axis: usize) {
    let voxels: usize = extents.iter().product();
    for plane in image.chunks_exact_mut(voxels) {
        flip_plane(plane, extents, axis);
    }
}

fn flip_labels(labels: &mut [u8], extents: [usize; 3], axis: usize) {
    flip_plane(labels, extents, axis);
}

fn flip_plane<T: Copy>(plane: &mut [T], extents: [usize; 3], axis: usize) {
    let [d, h, w] = extents;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let n = extents[axis];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let c = [z, y, x];
                if c[axis] >= n / 2 {
                    continue;
                }
                let mut o = c;
                o[axis] = n - 1 - c[axis];
                plane.swap(idx(z, y, x), idx(o[0], o[1], o[2]));
            }
        }
    }
}

fn foreground(image: &[f32], extents: [usize; 3]) -> Vec<bool> {
    let voxels: usize = extents.iter().product();
    let mut mask = vec![false; voxels];
    for plane in image.chunks_exact(voxels) {
        for (m, &v) in mask.iter_mut().zip(plane) {
            *m |= v != 0.0;
        }
    }
    mask
}

/// Rotates by `theta` in the plane of `pair`, resampling via the inverse
/// map about the volume center: image trilinear, labels nearest neighbor,
/// out-of-field voxels 0. A zero angle is an exact identity.
pub fn rotate_volume(
    image: &[f32],
    labels: &[u8],
    extents: [usize; 3],
    pair: [usize; 2],
    theta: f64,
) -> (Vec<f32>, Vec<u8>) {
    if theta == 0.0 {
        return (image.to_vec(), labels.to_vec());
    }
    let [d, h, w] = extents;
    let voxels = d * h * w;
    let center = [
        (d as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        (w as f64 - 1.0) / 2.0,
    ];
    let (sin, cos) = theta.sin_cos();
    let source = |z: usize, y: usize, x: usize| {
        let mut p = [z as f64, y as f64, x as f64];
        let a = p[pair[0]] - center[pair[0]];
        let b = p[pair[1]] - center[pair[1]];
        p[pair[0]] = center[pair[0]] + cos * a - sin * b;
        p[pair[1]] = center[pair[1]] + sin * a + cos * b;
        p
    };

    let mut out_image = vec![0.0f32; image.len()];
    let mut out_labels = vec![0u8; voxels];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let p = source(z, y, x);
                for m in 0..image.len() / voxels {
                    out_image[m * voxels + i] =
                        trilinear(&image[m * voxels..(m + 1) * voxels], extents, p);
                }
                out_labels[i] = nearest(labels, extents, p);
            }
        }
    }
    (out_image, out_labels)
}

fn trilinear(plane: &[f32], extents: [usize; 3], p: [f64; 3]) -> f32 {
    let [d, h, w] = extents;
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut weight = 1.0f64;
        let mut c = [0i64; 3];
        for k in 0..3 {
            let hi = (corner >> k) & 1 == 1;
            weight *= if hi { frac[k] } else { 1.0 - frac[k] };
            c[k] = base[k] as i64 + hi as i64;
        }
        if weight == 0.0 {
            continue;
        }
        let inside =
            (0..3).all(|k| c[k] >= 0) && c[0] < d as i64 && c[1] < h as i64 && c[2] < w as i64;
        if inside {
            let i = ((c[0] as usize * h) + c[1] as usize) * w + c[2] as usize;
            acc += weight * plane[i] as f64;
        }
    }
    acc as f32
}

fn nearest(labels: &[u8], extents: [usize; 3], p: [f64; 3]) -> u8 {
    let [d, h, w] = extents;
    let c = [p[0].round(), p[1].round(), p[2].round()];
    let inside = c.iter().all(|&v| v >= 0.0)
        && c[0] < d as f64
        && c[1] < h as f64
        && c[2] < w as f64;
    if inside {
        labels[((c[0] as usize * h) + c[1] as usize) * w + c[2] as usize]
    } else {
        0
    }
}

/// `x' = mu + f (x - mu)` on foreground voxels, with `mu` their mean. The
/// foreground mean is exactly preserved (up to float32 rounding). A unit
/// factor is a bit-exact identity.
fn apply_contrast(plane: &mut [f32], mask: &[bool], f: f64) {
    if f == 1.0 {
        return;
    }
    let (sum, n) = plane
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    if n == 0 {
        return;
    }
    let mu = sum / n as f64;
    for (v, &m) in plane.iter_mut().zip(mask) {
        if m {
            *v = (mu + f * (*v as f64 - mu)) as f32;
        }
    }
}
