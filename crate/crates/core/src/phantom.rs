//! Synthetic multi-modal brain phantoms: an ellipsoidal brain containing a
//! nested tumor (necrotic core inside an enhancing shell inside an edema
//! halo) plus a separate resection cavity, rendered into four MRI-like
//! modality channels with a smooth bias field and additive noise.
//!
//! Generation is a pure function of `(seed, extents)`; the same arguments
//! always produce bit-identical volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Modality channel order, fixed across the whole pipeline.
pub const MODALITIES: [&str; 4] = ["t1", "t1gd", "t2", "flair"];

/// Label alphabet: 0 background, 1 necrotic core, 2 edema halo,
/// 3 enhancing shell, 4 resection cavity.
pub const NUM_CLASSES: usize = 5;

const MIN_EXTENT: usize = 16;

/// One case: a `[4, D, H, W]` image, its `[D, H, W]` label map flattened
/// row-major, and an identifier.
#[derive(Debug, Clone)]
pub struct SampleVolume {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    pub extents: [usize; 3],
    pub case_id: String,
}

impl SampleVolume {
    pub fn new(
        image: Tensor<f32>,
        labels: Vec<u8>,
        extents: [usize; 3],
        case_id: String,
    ) -> Result<Self> {
        let voxels: usize = extents.iter().product();
        if image.shape() != [MODALITIES.len(), extents[0], extents[1], extents[2]] {
            return Err(Error::Data(format!(
                "image shape {:?} does not match extents {extents:?}",
                image.shape()
            )));
        }
        if labels.len() != voxels {
            return Err(Error::Data(format!(
                "label count {} does not cover extents {extents:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES as u8) {
            return Err(Error::Data(format!("label {bad} outside 0..5")));
        }
        Ok(Self {
            image,
            labels,
            extents,
            case_id,
        })
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }
}

/// Axis-aligned ellipsoid in voxel index space.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut q = 0.0;
        for k in 0..3 {
            let t = (p[k] - self.center[k]) / self.semi[k];
            q += t * t;
        }
        q <= 1.0
    }

    fn scaled(&self, factor: f64) -> Self {
        Self {
            center: self.center,
            semi: [
                self.semi[0] * factor,
                self.semi[1] * factor,
                self.semi[2] * factor,
            ],
        }
    }
}

/// Renders a deterministic phantom. The tumor and the cavity sit on
/// opposite sides of the volume center along the longest axis, far enough
/// apart that neither structure swallows the other.
pub fn generate_phantom(seed: u64, extents: [usize; 3]) -> Result<SampleVolume> {
    if extents.iter().any(|&e| e < MIN_EXTENT) {
        return Err(Error::Data(format!(
            "extents {extents:?} below minimum {MIN_EXTENT} per axis"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = extents;
    let ext = [d as f64, h as f64, w as f64];
    let center = [
        (d as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        (w as f64 - 1.0) / 2.0,
    ];
    let min_extent = ext[0].min(ext[1]).min(ext[2]);
    let long_axis = (0..3).max_by(|&a, &b| ext[a].total_cmp(&ext[b])).expect("3 axes");

    let brain = Ellipsoid {
        center,
        semi: [
            rng.gen_range(0.32..0.40) * ext[0],
            rng.gen_range(0.32..0.40) * ext[1],
            rng.gen_range(0.32..0.40) * ext[2],
        ],
    };

    // Tumor halo; the shell and core divide its radius at fixed ratios.
    let halo_r = rng.gen_range(0.16..0.22) * min_extent;
    let halo = Ellipsoid {
        center: offset_center(center, long_axis, 1.0, &ext, &mut rng),
        semi: [
            halo_r * rng.gen_range(0.8..1.2),
            halo_r * rng.gen_range(0.8..1.2),
            halo_r * rng.gen_range(0.8..1.2),
        ],
    };
    let shell = halo.scaled(0.66);
    let core = halo.scaled(0.33);

    let cavity_r = rng.gen_range(0.08..0.12) * min_extent;
    let cavity = Ellipsoid {
        center: offset_center(center, long_axis, -1.0, &ext, &mut rng),
        semi: [
            cavity_r * rng.gen_range(0.8..1.2),
            cavity_r * rng.gen_range(0.8..1.2),
            cavity_r * rng.gen_range(0.8..1.2),
        ],
    };

    let voxels = d * h * w;
    let mut labels = vec![0u8; voxels];
    let mut brain_mask = vec![false; voxels];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let p = [z as f64, y as f64, x as f64];
                let label = if core.contains(p) {
                    1
                } else if shell.contains(p) {
                    3
                } else if halo.contains(p) {
                    2
                } else if cavity.contains(p) {
                    4
                } else {
                    0
                };
                labels[i] = label;
                brain_mask[i] = label != 0 || brain.contains(p);
            }
        }
    }

    let noise = Normal::new(0.0f64, 0.02).expect("positive sigma");
    let mut image = vec![0.0f32; MODALITIES.len() * voxels];
    for (m, plane) in image.chunks_exact_mut(voxels).enumerate() {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    if !brain_mask[i] {
                        continue;
                    }
                    let base = modality_intensity(m, labels[i], z as f64 / (d as f64 - 1.0));
                    let bias = 1.0
                        + 0.08
                            * (std::f64::consts::PI * z as f64 / (d as f64 - 1.0)).sin()
                            * (std::f64::consts::PI * y as f64 / (h as f64 - 1.0)).sin()
                            * (std::f64::consts::PI * x as f64 / (w as f64 - 1.0)).sin();
                    let v = base * bias + noise.sample(&mut rng);
                    plane[i] = v.clamp(0.0, 1.2) as f32;
                }
            }
        }
    }

    SampleVolume::new(
        Tensor::from_vec(&[MODALITIES.len(), d, h, w], image)?,
        labels,
        extents,
        format!("phantom_{seed:05}"),
    )
}

/// Center displaced along the separation axis by a signed fraction of its
/// extent, with small jitter on the other two axes. The fraction band
/// [0.21, 0.26] exceeds half the worst-case structure radii sum (0.408 of
/// the extent), so opposite signs guarantee disjoint structures.
fn offset_center(
    center: [f64; 3],
    axis: usize,
    sign: f64,
    ext: &[f64; 3],
    rng: &mut ChaCha8Rng,
) -> [f64; 3] {
    let mut out = center;
    for k in 0..3 {
        if k == axis {
            out[k] += sign * rng.gen_range(0.21..0.26) * ext[k];
        } else {
            out[k] += rng.gen_range(-0.05..0.05) * ext[k];
        }
    }
    out
}

/// Tissue intensity before bias and noise. Roles: contrast agent lights up
/// the enhancing shell, fluid suppression lights up edema, the cavity reads
/// fluid-bright on T2 and dark on FLAIR, and T1 carries a structural
/// gradient along the first axis.
fn modality_intensity(modality: usize, label: u8, depth_frac: f64) -> f64 {
    match (modality, label) {
        (0, _) => 0.5 + 0.3 * depth_frac,
        (1, 1) => 0.35,
        (1, 3) => 0.95,
        (1, _) => 0.5,
        (2, 2) => 0.75,
        (2, 4) => 0.85,
        (2, _) => 0.5,
        (3, 2) => 0.9,
        (3, 4) => 0.3,
        (3, _) => 0.4,
        _ => unreachable!("modality index bounded by MODALITIES"),
    }
}
