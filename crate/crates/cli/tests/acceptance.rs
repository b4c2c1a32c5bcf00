//! Acceptance suite: the release gate for the whole workspace, one check
//! per guarantee, run sequentially so timing-sensitive checks are not
//! distorted by parallel load. Each criterion prints a PASS or FAIL line;
//! run with `cargo test --test acceptance -- --nocapture` to watch them.

use std::collections::BTreeMap;
use std::panic::catch_unwind;
use std::time::Instant;

use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ukanep_cli::config::TrainConfig;
use ukanep_cli::optim::lr_schedule;
use ukanep_cli::train::{resume, train, FINAL_CHECKPOINT, LOSS_CSV};
use ukanep_core::attention::{eca_kernel_size, AttnKind, EcaModule, EsaModule, SelfAttention};
use ukanep_core::augment::{augment, augment_traced, AugmentConfig};
use ukanep_core::kan::{KanLayer, SplineGrid, TokKanBlock};
use ukanep_core::loss::{fixed_weight_loss, one_hot_batch, segmentation_loss, CeMode, LossMode};
use ukanep_core::manifest::{save_sample, write_manifest};
use ukanep_core::metrics::{compose_regions, dice_iou, grid_diagonal, hd95};
use ukanep_core::model::{Model, ModelConfig, Variant};
use ukanep_core::nifti::{read_nifti, write_nifti, NiftiData};
use ukanep_core::nn::{conv, normalize, upsample3_x2, ConvSpec};
use ukanep_core::param::{param_names, Binder, Param, Visit};
use ukanep_core::phantom::{generate_phantom, SampleVolume};
use ukanep_core::pyramid::PfaFusion;
use ukanep_core::{Tape, Tensor};

#[test]
fn acceptance() {
    let criteria: [(&str, fn()); 11] = [
        ("01 gradient-finite-differences", c01_gradient_finite_differences),
        ("02 bspline-basis", c02_bspline_basis),
        ("03 hd95-brute-force", c03_hd95_brute_force),
        ("04 dynamic-loss-weighting", c04_dynamic_loss_weighting),
        ("05 dice-iou-identity", c05_dice_iou_identity),
        ("06 parameter-flop-counts", c06_parameter_flop_counts),
        ("07 overfit-smoke", c07_overfit_smoke),
        ("08 lr-schedule", c08_lr_schedule),
        ("09 augmentation-statistics", c09_augmentation_statistics),
        ("10 nifti-round-trip", c10_nifti_round_trip),
        ("11 training-reproducibility", c11_training_reproducibility),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(check);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("criterion {name}: PASS ({secs:.1}s)"),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "opaque panic".into());
                println!("criterion {name}: FAIL ({secs:.1}s)");
                println!("  {msg}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// ---------------------------------------------------------------------------
// Finite-difference harness. Gradients are checked in f64 against central
// differences; losses are random linear probes of the module output so a
// single scalar exercises every output element.

const FD_H: f64 = 1e-5;
const FD_REL: f64 = 1e-4;
// Central differences of an O(100) loss carry roundoff noise near
// eps * |loss| / (2h) ~ 1e-9, so genuinely zero gradients (a conv bias
// feeding instance normalization, say) need an absolute escape hatch well
// above that noise and well below any real gradient in the suite.
const FD_ABS: f64 = 1e-6;

fn seeded(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn probed(y: &Tensor<f64>, probe: &Tensor<f64>) -> Tensor<f64> {
    y.mul(probe).unwrap().sum_all().unwrap()
}

fn bump(x: &Tensor<f64>, idx: usize, delta: f64) -> Tensor<f64> {
    let mut data = x.to_vec();
    data[idx] += delta;
    Tensor::from_vec(x.shape(), data).unwrap()
}

/// Evenly spaced flat indices, rotated by `salt` so repeated seeds touch
/// different elements.
fn probe_indices(n: usize, want: usize, salt: u64) -> Vec<usize> {
    let want = want.min(n).max(1);
    let offset = salt as usize % n;
    (0..want).map(|j| (j * n / want + offset) % n).collect()
}

fn name_salt(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn fd_ok(analytic: f64, fd: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff <= FD_ABS || diff <= FD_REL * analytic.abs().max(fd.abs())
}

fn assert_close(analytic: f64, fd: f64, what: &str) {
    assert!(
        fd_ok(analytic, fd),
        "{what}: analytic {analytic} vs finite difference {fd}"
    );
}

/// Central difference with a step ladder: piecewise-linear spots (relu,
/// max pooling) can put a kink inside the bracket, which biases the
/// quotient by an amount that vanishes as the step shrinks, while a wrong
/// analytic gradient disagrees at every step.
fn fd_ladder(analytic: f64, mut eval: impl FnMut(f64) -> f64, what: &str) {
    let mut fd = 0.0;
    for ladder in 0..3 {
        let h = FD_H / 10f64.powi(ladder);
        fd = (eval(h) - eval(-h)) / (2.0 * h);
        if fd_ok(analytic, fd) {
            return;
        }
    }
    panic!("{what}: analytic {analytic} vs finite difference {fd}");
}

/// Input-only checks run against a parameterless module.
struct NoParams;

impl Visit<f64> for NoParams {
    fn visit(&self, _: &mut dyn FnMut(&Param<f64>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param<f64>)) {}
}

fn param_value<M: Visit<f64>>(module: &M, name: &str) -> Tensor<f64> {
    let mut out = None;
    module.visit(&mut |p| {
        if p.name == name {
            out = Some(p.value.clone());
        }
    });
    out.unwrap_or_else(|| panic!("no parameter named {name}"))
}

fn set_param<M: Visit<f64>>(module: &mut M, name: &str, value: &Tensor<f64>) {
    let mut done = false;
    module.visit_mut(&mut |p| {
        if p.name == name {
            p.value = value.clone();
            done = true;
        }
    });
    assert!(done, "no parameter named {name}");
}

/// Checks every gradient a module produces: reverse mode for each named
/// input and each parameter against central differences of the same scalar
/// loss, sampling `checks` elements per tensor.
fn fd_module<M: Visit<f64>>(
    module: &mut M,
    inputs: &[(&str, Tensor<f64>)],
    checks: usize,
    salt: u64,
    what: &str,
    forward: impl Fn(&M, &BTreeMap<String, Tensor<f64>>, &Binder<f64>) -> Tensor<f64>,
) {
    let grads = {
        let tape = Tape::new();
        let mut tracked = BTreeMap::new();
        for (name, v) in inputs {
            tracked.insert(name.to_string(), tape.watch(name, v).unwrap());
        }
        let loss = forward(module, &tracked, &Binder::training(&tape));
        assert_eq!(loss.rank(), 0, "{what}: probe loss must be scalar");
        loss.backward().unwrap()
    };
    let plain: BTreeMap<String, Tensor<f64>> =
        inputs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();

    for (name, v) in inputs {
        for idx in probe_indices(v.numel(), checks, salt ^ name_salt(name)) {
            let got = grads.get(name).map_or(0.0, |g| g.data()[idx]);
            let eval = |delta: f64| {
                let mut m = plain.clone();
                m.insert(name.to_string(), bump(v, idx, delta));
                forward(module, &m, &Binder::inference()).item().unwrap()
            };
            fd_ladder(got, eval, &format!("{what} {name}[{idx}]"));
        }
    }

    for pname in param_names(&*module) {
        let base = param_value(&*module, &pname);
        for idx in probe_indices(base.numel(), checks, salt ^ name_salt(&pname)) {
            let got = grads.get(&pname).map_or(0.0, |g| g.data()[idx]);
            let eval = |delta: f64| {
                set_param(module, &pname, &bump(&base, idx, delta));
                forward(module, &plain, &Binder::inference()).item().unwrap()
            };
            fd_ladder(got, eval, &format!("{what} {pname}[{idx}]"));
            set_param(module, &pname, &base);
        }
    }
}

/// Every trainable operation and composite block differentiates correctly:
/// ten seeds per block, f64 central differences, and the whole suite stays
/// inside a five minute budget.
fn c01_gradient_finite_differences() {
    let start = Instant::now();

    // Convolution with stride 1 (same padding) and stride 2, including
    // weight and bias gradients.
    for seed in 0..10u64 {
        let x = seeded(&[1, 2, 4, 4, 4], 100 + seed, -1.0, 1.0);
        let w = seeded(&[3, 2, 3, 3, 3], 200 + seed, -0.5, 0.5);
        let b = seeded(&[3], 300 + seed, -0.5, 0.5);
        let p_same = seeded(&[1, 3, 4, 4, 4], 400 + seed, -1.0, 1.0);
        let p_strided = seeded(&[1, 3, 2, 2, 2], 500 + seed, -1.0, 1.0);
        fd_module(
            &mut NoParams,
            &[("x", x), ("w", w), ("b", b)],
            4,
            seed,
            "conv",
            |_, ins, _| {
                let same =
                    conv(&ins["x"], &ins["w"], Some(&ins["b"]), &ConvSpec::same(3, 1)).unwrap();
                let strided =
                    conv(&ins["x"], &ins["w"], Some(&ins["b"]), &ConvSpec::strided(3, 2, 1))
                        .unwrap();
                probed(&same, &p_same).add(&probed(&strided, &p_strided)).unwrap()
            },
        );
    }

    for seed in 0..10u64 {
        let x = seeded(&[1, 2, 2, 2, 2], 600 + seed, -1.0, 1.0);
        let p = seeded(&[1, 2, 4, 4, 4], 700 + seed, -1.0, 1.0);
        fd_module(&mut NoParams, &[("x", x)], 6, seed, "trilinear upsample", |_, ins, _| {
            probed(&upsample3_x2(&ins["x"]).unwrap(), &p)
        });
    }

    // Normalization over spatial axes (instance style) and over the
    // embedding axis (layer style), with gain and offset gradients.
    for seed in 0..10u64 {
        let x = seeded(&[1, 3, 3, 3, 3], 800 + seed, -1.0, 1.0);
        let gain = seeded(&[1, 3, 1, 1, 1], 900 + seed, 0.5, 1.5);
        let offset = seeded(&[1, 3, 1, 1, 1], 1000 + seed, -0.5, 0.5);
        let p = seeded(&[1, 3, 3, 3, 3], 1100 + seed, -1.0, 1.0);
        fd_module(
            &mut NoParams,
            &[("x", x), ("gain", gain), ("offset", offset)],
            4,
            seed,
            "instance normalize",
            |_, ins, _| {
                probed(&normalize(&ins["x"], &ins["gain"], &ins["offset"], &[2, 3, 4], 1e-5).unwrap(), &p)
            },
        );
        let x = seeded(&[2, 5, 6], 1200 + seed, -1.0, 1.0);
        let gain = seeded(&[1, 1, 6], 1300 + seed, 0.5, 1.5);
        let offset = seeded(&[1, 1, 6], 1400 + seed, -0.5, 0.5);
        let p = seeded(&[2, 5, 6], 1500 + seed, -1.0, 1.0);
        fd_module(
            &mut NoParams,
            &[("x", x), ("gain", gain), ("offset", offset)],
            4,
            seed,
            "layer normalize",
            |_, ins, _| {
                probed(&normalize(&ins["x"], &ins["gain"], &ins["offset"], &[2], 1e-5).unwrap(), &p)
            },
        );
    }

    // Spline function layer; inputs stay inside the grid domain.
    for seed in 0..10u64 {
        let grid = SplineGrid::new(5, 3, -1.0, 1.0).unwrap();
        let mut kan =
            KanLayer::<f64>::new("kan", 3, 4, grid, &mut ChaCha8Rng::seed_from_u64(40 + seed));
        let x = seeded(&[6, 3], 1600 + seed, -0.9, 0.9);
        let p = seeded(&[6, 4], 1700 + seed, -1.0, 1.0);
        fd_module(&mut kan, &[("x", x)], 4, seed, "kan layer", |m, ins, binder| {
            probed(&m.forward(&ins["x"], binder).unwrap(), &p)
        });
    }

    for seed in 0..10u64 {
        let grid = SplineGrid::new(5, 3, -1.0, 1.0).unwrap();
        let mut tok =
            TokKanBlock::<f64>::new("tok", 2, 4, 2, grid, &mut ChaCha8Rng::seed_from_u64(50 + seed));
        let x = seeded(&[1, 2, 4, 4, 4], 1800 + seed, -0.3, 0.3);
        let p = seeded(&[1, 4, 2, 2, 2], 1900 + seed, -1.0, 1.0);
        fd_module(&mut tok, &[("x", x)], 3, seed, "token kan block", |m, ins, binder| {
            probed(&m.forward(&ins["x"], binder).unwrap(), &p)
        });
    }

    for seed in 0..10u64 {
        let mut eca = EcaModule::<f64>::new("eca", 8, &mut ChaCha8Rng::seed_from_u64(60 + seed));
        let x = seeded(&[1, 8, 2, 2, 2], 2000 + seed, -1.0, 1.0);
        let p = seeded(&[1, 8, 2, 2, 2], 2100 + seed, -1.0, 1.0);
        fd_module(&mut eca, &[("x", x)], 6, seed, "channel attention", |m, ins, binder| {
            probed(&m.forward(&ins["x"], binder).unwrap(), &p)
        });
    }

    for seed in 0..10u64 {
        let mut esa = EsaModule::<f64>::new("esa", &mut ChaCha8Rng::seed_from_u64(70 + seed));
        let x = seeded(&[1, 2, 6, 6, 6], 2200 + seed, -1.0, 1.0);
        let p = seeded(&[1, 2, 6, 6, 6], 2300 + seed, -1.0, 1.0);
        fd_module(&mut esa, &[("x", x)], 4, seed, "spatial attention", |m, ins, binder| {
            probed(&m.forward(&ins["x"], binder).unwrap(), &p)
        });
    }

    for seed in 0..10u64 {
        let mut sa =
            SelfAttention::<f64>::new("sa", 6, &mut ChaCha8Rng::seed_from_u64(80 + seed));
        let x = seeded(&[2, 5, 6], 2400 + seed, -1.0, 1.0);
        let p = seeded(&[2, 5, 6], 2500 + seed, -1.0, 1.0);
        fd_module(&mut sa, &[("x", x)], 4, seed, "self attention", |m, ins, binder| {
            probed(&m.forward(&ins["x"], binder).unwrap(), &p)
        });
    }

    // Pyramid fusion in both attention placements: after the concats on
    // even seeds, per-scale before fusion on odd seeds.
    for seed in 0..10u64 {
        let (fuse, pre) = if seed % 2 == 0 { (Some(AttnKind::Eca), false) } else { (None, true) };
        let mut pfa = PfaFusion::<f64>::new(
            "pfa",
            [2, 3, 4],
            fuse,
            pre,
            &mut ChaCha8Rng::seed_from_u64(90 + seed),
        );
        let x1 = seeded(&[1, 2, 4, 4, 4], 2600 + seed, -1.0, 1.0);
        let x2 = seeded(&[1, 3, 2, 2, 2], 2700 + seed, -1.0, 1.0);
        let x3 = seeded(&[1, 4, 1, 1, 1], 2800 + seed, -1.0, 1.0);
        let p1 = seeded(&[1, 9, 4, 4, 4], 2900 + seed, -1.0, 1.0);
        let p2 = seeded(&[1, 7, 2, 2, 2], 3000 + seed, -1.0, 1.0);
        fd_module(
            &mut pfa,
            &[("x1", x1), ("x2", x2), ("x3", x3)],
            3,
            seed,
            "pyramid fusion",
            |m, ins, binder| {
                let (s1, s2) = m.forward(&ins["x1"], &ins["x2"], &ins["x3"], binder).unwrap();
                probed(&s1, &p1).add(&probed(&s2, &p2)).unwrap()
            },
        );
    }

    // The full network end to end at reduced width, one probe per leaf.
    for seed in 0..10u64 {
        let cfg = ModelConfig {
            variant: Variant::UkanEpEcaAfterPfa,
            in_channels: 1,
            num_classes: 2,
            encoder_channels: [1, 2, 3],
            token_dims: [2, 3],
            grid_size: 3,
            spline_order: 3,
            seed,
        };
        let mut model = Model::<f64>::new(&cfg).unwrap();
        let x = seeded(&[1, 1, 16, 16, 16], 3100 + seed, -0.5, 0.5);
        let p = seeded(&[1, 2, 16, 16, 16], 3200 + seed, -1.0, 1.0);
        fd_module(&mut model, &[("x", x)], 1, seed, "full model", |m, ins, binder| {
            probed(&m.forward(&ins["x"], binder).unwrap(), &p)
        });
    }

    // Both loss modes and both cross-entropy normalizations. The dynamic
    // mode differentiates with the per-sample weights held constant, so its
    // difference quotient runs on the weight-frozen loss at the same point.
    for seed in 0..10u64 {
        let logits = seeded(&[2, 3, 8], 3300 + seed, -2.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3400 + seed);
        let labels: Vec<Vec<u8>> =
            (0..2).map(|_| (0..8).map(|_| rng.gen_range(0..3u8)).collect()).collect();
        let refs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
        let truth = one_hot_batch::<f64>(&refs, 3).unwrap();
        for ce_mode in [CeMode::Mean, CeMode::Sum] {
            let tape = Tape::new();
            let tracked = tape.watch("logits", &logits).unwrap();
            let loss = segmentation_loss(&tracked, &truth, LossMode::FixedHalf, ce_mode).unwrap();
            let grads = loss.total.backward().unwrap();
            let g = grads.get("logits").unwrap();
            for idx in probe_indices(logits.numel(), 6, seed) {
                let eval = |d: f64| {
                    segmentation_loss(&bump(&logits, idx, d), &truth, LossMode::FixedHalf, ce_mode)
                        .unwrap()
                        .total
                        .item()
                        .unwrap()
                };
                let fd = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
                assert_close(g.data()[idx], fd, &format!("fixed loss logits[{idx}]"));
            }

            let tape = Tape::new();
            let tracked = tape.watch("logits", &logits).unwrap();
            let loss = segmentation_loss(&tracked, &truth, LossMode::Dynamic, ce_mode).unwrap();
            let weights: Vec<(f64, f64)> =
                loss.samples.iter().map(|s| (1.0 - s.alpha, s.alpha)).collect();
            let grads = loss.total.backward().unwrap();
            let g = grads.get("logits").unwrap();
            for idx in probe_indices(logits.numel(), 6, seed) {
                let eval = |d: f64| {
                    fixed_weight_loss(&bump(&logits, idx, d), &truth, &weights, ce_mode)
                        .unwrap()
                        .total
                        .item()
                        .unwrap()
                };
                let fd = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
                assert_close(g.data()[idx], fd, &format!("dynamic loss logits[{idx}]"));
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "gradient suite took {elapsed:.0}s, budget is 300s");
}

/// Basis functions: partition of unity, non-negativity, exact local
/// support, and agreement with a textbook recursive evaluation, across
/// grid sizes 3..=8 and orders 1..=3.
fn c02_bspline_basis() {
    fn recursive(knots: &[f64], j: usize, k: usize, x: f64) -> f64 {
        if k == 0 {
            return if knots[j] <= x && x < knots[j + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let left = knots[j + k] - knots[j];
        if left > 0.0 {
            v += (x - knots[j]) / left * recursive(knots, j, k - 1, x);
        }
        let right = knots[j + k + 1] - knots[j + 1];
        if right > 0.0 {
            v += (knots[j + k + 1] - x) / right * recursive(knots, j + 1, k - 1, x);
        }
        v
    }

    for size in 3..=8usize {
        for order in 1..=3usize {
            let grid = SplineGrid::new(size, order, -1.0, 1.0).unwrap();
            assert_eq!(grid.num_bases(), size + order);
            let knots = grid.knots();
            let mut rng = ChaCha8Rng::seed_from_u64((size * 10 + order) as u64);
            for _ in 0..200 {
                let x: f64 = rng.gen_range(-1.0..1.0);
                let b = grid.basis(x);
                assert_eq!(b.len(), grid.num_bases());
                let sum: f64 = b.iter().sum();
                assert!(
                    (sum - 1.0).abs() <= 1e-12,
                    "partition of unity fails at x={x} (size {size}, order {order}): {sum}"
                );
                for (j, &v) in b.iter().enumerate() {
                    assert!(v >= 0.0, "negative basis {j} at x={x}: {v}");
                    let want = recursive(knots, j, order, x);
                    assert!(
                        (v - want).abs() <= 1e-12,
                        "basis {j} at x={x} (size {size}, order {order}): {v} vs {want}"
                    );
                    if x < knots[j] || x >= knots[j + order + 1] {
                        assert_eq!(v, 0.0, "basis {j} nonzero outside its support at x={x}");
                    }
                }
            }
        }
    }
}

/// The distance-transform Hausdorff distance matches an all-pairs scan on
/// random 8x8x8 masks exactly, and the empty-mask conventions hold.
fn c03_hd95_brute_force() {
    fn oracle(p: &[bool], g: &[bool], e: [usize; 3], s: [f64; 3]) -> f64 {
        let [d, h, w] = e;
        let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
        let boundary = |m: &[bool]| -> Vec<(usize, usize, usize)> {
            let mut out = Vec::new();
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        if !m[idx(z, y, x)] {
                            continue;
                        }
                        let exposed = z == 0
                            || !m[idx(z - 1, y, x)]
                            || z + 1 == d
                            || !m[idx(z + 1, y, x)]
                            || y == 0
                            || !m[idx(z, y - 1, x)]
                            || y + 1 == h
                            || !m[idx(z, y + 1, x)]
                            || x == 0
                            || !m[idx(z, y, x - 1)]
                            || x + 1 == w
                            || !m[idx(z, y, x + 1)];
                        if exposed {
                            out.push((z, y, x));
                        }
                    }
                }
            }
            out
        };
        let bp = boundary(p);
        let bg = boundary(g);
        assert!(!bp.is_empty() && !bg.is_empty());
        let sq = |a: (usize, usize, usize), b: (usize, usize, usize)| {
            let dz = a.0 as f64 - b.0 as f64;
            let dy = a.1 as f64 - b.1 as f64;
            let dx = a.2 as f64 - b.2 as f64;
            s[0] * s[0] * dz * dz + s[1] * s[1] * dy * dy + s[2] * s[2] * dx * dx
        };
        let mut pooled = Vec::new();
        for &a in &bp {
            pooled.push(bg.iter().map(|&b| sq(a, b)).fold(f64::INFINITY, f64::min));
        }
        for &b in &bg {
            pooled.push(bp.iter().map(|&a| sq(a, b)).fold(f64::INFINITY, f64::min));
        }
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((0.95 * pooled.len() as f64).ceil() as usize).max(1);
        pooled[rank - 1].sqrt()
    }

    // Power-of-two spacings keep every squared distance exact in f64, so
    // the two algorithms must agree bitwise.
    let extents = [8usize, 8, 8];
    let n: usize = extents.iter().product();
    let spacings = [[1.0, 1.0, 1.0], [1.0, 2.0, 0.5]];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut checked = 0;
    while checked < 50 {
        let fill_p = rng.gen_range(0.05..0.5);
        let fill_g = rng.gen_range(0.05..0.5);
        let p: Vec<bool> = (0..n).map(|_| rng.gen_bool(fill_p)).collect();
        let g: Vec<bool> = (0..n).map(|_| rng.gen_bool(fill_g)).collect();
        if !p.iter().any(|&v| v) || !g.iter().any(|&v| v) {
            continue;
        }
        for spacing in spacings {
            let got = hd95(&p, &g, extents, spacing).unwrap();
            let want = oracle(&p, &g, extents, spacing);
            assert_eq!(got, want, "pair {checked} spacing {spacing:?}");
        }
        checked += 1;
    }

    let empty = vec![false; n];
    let some: Vec<bool> = (0..n).map(|i| i % 7 == 0).collect();
    for spacing in spacings {
        assert_eq!(hd95(&empty, &empty, extents, spacing).unwrap(), 0.0);
        let diag = spacing
            .iter()
            .zip(extents)
            .map(|(s, e)| {
                let d = e as f64 * s;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        assert_eq!(hd95(&empty, &some, extents, spacing).unwrap(), diag);
        assert_eq!(hd95(&some, &empty, extents, spacing).unwrap(), diag);
        assert_eq!(grid_diagonal(extents, spacing), diag);
    }
}

/// Dynamic weighting reduces the per-sample total to the harmonic form
/// 2*ce*dice/(ce+dice), with alpha strictly inside (0, 1), and its gradient
/// equals the weight-frozen gradient at the same point.
fn c04_dynamic_loss_weighting() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100u64 {
        let classes = rng.gen_range(3..6usize);
        let n = rng.gen_range(4..30usize);
        let logits = seeded(&[1, classes, n], 4000 + case, -2.0, 2.0);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes as u8)).collect();
        let truth = one_hot_batch::<f64>(&[&labels], classes).unwrap();
        let loss = segmentation_loss(&logits, &truth, LossMode::Dynamic, CeMode::Mean).unwrap();
        let s = loss.samples[0];
        assert!(s.ce > 0.0 && s.dice > 0.0, "case {case}: degenerate loss terms");
        assert!(s.alpha > 0.0 && s.alpha < 1.0, "case {case}: alpha {}", s.alpha);
        assert!((s.alpha - s.ce / (s.ce + s.dice)).abs() <= 1e-15, "case {case}: alpha");
        let want = 2.0 * s.ce * s.dice / (s.ce + s.dice);
        let total = loss.total.item().unwrap();
        assert!(
            ((total - want) / want).abs() <= 1e-12,
            "case {case}: total {total} vs harmonic form {want}"
        );
        assert!(((s.total - want) / want).abs() <= 1e-12, "case {case}: sample total");
    }

    for seed in 0..10u64 {
        let logits = seeded(&[2, 4, 27], 4200 + seed, -2.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4300 + seed);
        let labels: Vec<Vec<u8>> =
            (0..2).map(|_| (0..27).map(|_| rng.gen_range(0..4u8)).collect()).collect();
        let refs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
        let truth = one_hot_batch::<f64>(&refs, 4).unwrap();

        let tape = Tape::new();
        let tracked = tape.watch("logits", &logits).unwrap();
        let dynamic = segmentation_loss(&tracked, &truth, LossMode::Dynamic, CeMode::Mean).unwrap();
        let weights: Vec<(f64, f64)> =
            dynamic.samples.iter().map(|s| (1.0 - s.alpha, s.alpha)).collect();
        let g_dyn = dynamic.total.backward().unwrap();

        let tape = Tape::new();
        let tracked = tape.watch("logits", &logits).unwrap();
        let frozen = fixed_weight_loss(&tracked, &truth, &weights, CeMode::Mean).unwrap();
        let g_fix = frozen.total.backward().unwrap();

        let a = g_dyn.get("logits").unwrap().data();
        let b = g_fix.get("logits").unwrap().data();
        for i in 0..a.len() {
            let scale = a[i].abs().max(b[i].abs()).max(1e-12);
            assert!(
                (a[i] - b[i]).abs() / scale <= 1e-10,
                "seed {seed} grad[{i}]: dynamic {} vs frozen {}",
                a[i],
                b[i]
            );
        }
    }
}

/// Overlap scores keep their algebraic ties: dice = 2*iou/(1+iou) on
/// integer counts, and the whole-tumor mask is exactly the disjoint union
/// of the three tissue classes.
fn c05_dice_iou_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let fill_p = rng.gen_range(0.1..0.6);
        let fill_g = rng.gen_range(0.1..0.6);
        let p: Vec<bool> = (0..120).map(|_| rng.gen_bool(fill_p)).collect();
        let g: Vec<bool> = (0..120).map(|_| rng.gen_bool(fill_g)).collect();
        let inter = p.iter().zip(&g).filter(|(&a, &b)| a && b).count() as u64;
        let ps = p.iter().filter(|&&v| v).count() as u64;
        let gs = g.iter().filter(|&&v| v).count() as u64;
        let (dice, iou) = dice_iou(&p, &g).unwrap();
        if ps + gs == 0 {
            assert_eq!((dice, iou), (1.0, 1.0));
            continue;
        }
        let union = ps + gs - inter;
        assert_eq!(union + inter, ps + gs, "case {case}: integer count identity");
        assert_eq!(dice, 2.0 * inter as f64 / (ps + gs) as f64, "case {case}: dice counts");
        assert_eq!(iou, inter as f64 / union as f64, "case {case}: iou counts");
        assert_relative_eq!(dice, 2.0 * iou / (1.0 + iou), max_relative = 1e-15);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let count = |m: &[bool]| m.iter().filter(|&&v| v).count();
    for _ in 0..100 {
        let labels: Vec<u8> = (0..200).map(|_| rng.gen_range(0..5)).collect();
        let [netc, snfh, et, _, wt] = compose_regions(&labels).unwrap();
        assert_eq!(count(&wt), count(&netc) + count(&snfh) + count(&et));
    }
    for seed in 0..3 {
        let sample = generate_phantom(seed, [16, 16, 16]).unwrap();
        let [netc, snfh, et, _, wt] = compose_regions(&sample.labels).unwrap();
        assert_eq!(count(&wt), count(&netc) + count(&snfh) + count(&et));
    }
}

/// Parameter and FLOP counters match hand-enumerated constants for the
/// default configuration, and each channel-attention insert adds exactly
/// its kernel taps.
fn c06_parameter_flop_counts() {
    let count = |variant: Variant| {
        let cfg = ModelConfig { variant, ..ModelConfig::default() };
        Model::<f32>::new(&cfg).unwrap().param_count()
    };
    let base = count(Variant::UkanEpEcaAfterPfa);
    let ukan = count(Variant::Ukan);
    assert_eq!(base, 1_070_843);
    assert_eq!(ukan, 821_557);
    assert!(base > ukan);

    let k = eca_kernel_size;
    let pfa = count(Variant::UkanPfa);
    // Fused skips carry 16+32 and 8+16+32 channels; per-scale and encoder
    // inserts sit on 8, 16, and 32.
    assert_eq!(base - pfa, k(48) + k(56));
    assert_eq!(base - pfa, 6);
    assert_eq!(count(Variant::UkanEpEcaBeforePfa) - pfa, k(8) + k(16) + k(32));
    assert_eq!(count(Variant::UkanEpEcaBeforePfa) - pfa, 9);
    assert_eq!(count(Variant::UkanEcaAfterConv) - ukan, k(8) + k(16) + k(32));
    assert_eq!(count(Variant::UkanEcaAfterSkip) - ukan, k(8) + k(16) + k(32));

    let flops = |variant: Variant| {
        let cfg = ModelConfig { variant, ..ModelConfig::default() };
        Model::<f32>::new(&cfg).unwrap().flops(&[1, 4, 32, 32, 32]).unwrap().total()
    };
    assert_eq!(flops(Variant::UkanEpEcaAfterPfa), 13_897_706_968);
    assert_eq!(flops(Variant::Ukan), 2_274_110_208);
}

/// Memorization smoke test: both the full variant and the base variant
/// overfit two synthetic volumes within their soft Dice floors and time
/// budgets.
fn c07_overfit_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let entries: Vec<_> = (0..2)
        .map(|seed| {
            save_sample(&data, &generate_phantom(seed, [32, 32, 32]).unwrap(), [1.0; 3]).unwrap()
        })
        .collect();
    let manifest = data.join("manifest.csv");
    write_manifest(&manifest, &entries).unwrap();

    let mut cfg = TrainConfig::default();
    cfg.epochs = 50;
    cfg.warmup_epochs = 5;
    cfg.batch_size = 2;
    cfg.augment = false;
    cfg.checkpoint_every = 0;
    cfg.manifest = manifest;

    for (variant, floor) in [(Variant::UkanEpEcaAfterPfa, 0.95), (Variant::Ukan, 0.90)] {
        cfg.model.variant = variant;
        cfg.out_dir = dir.path().join(format!("run_{variant:?}"));
        let start = Instant::now();
        let out = train(&cfg).unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        let last = out.stats.last().unwrap();
        let tail: Vec<f64> = out.stats.iter().rev().take(5).map(|s| s.train_dice).collect();
        assert!(
            last.train_dice > floor,
            "{variant:?}: train dice {:.4} not above {floor} after {} epochs \
             (latest first: {tail:?})",
            last.train_dice,
            cfg.epochs
        );
        assert!(
            elapsed < 1800.0,
            "{variant:?}: {elapsed:.0}s exceeds the 30 minute budget"
        );
    }
}

/// The schedule hits its pinned endpoints exactly and is strictly monotone
/// within each segment.
fn c08_lr_schedule() {
    for (epochs, warmup) in [(50usize, 30usize), (50, 5)] {
        let mut cfg = TrainConfig::default();
        cfg.epochs = epochs;
        cfg.warmup_epochs = warmup;
        let lr = |e: usize| lr_schedule(e, &cfg).unwrap();
        assert_eq!(lr(0), 0.005);
        assert_eq!(lr(warmup), 0.01);
        assert_eq!(lr(epochs), 0.0);
        for e in 0..warmup {
            assert!(lr(e + 1) > lr(e), "warmup must rise at epoch {e}");
        }
        for e in warmup..epochs {
            assert!(lr(e + 1) < lr(e), "decay must fall at epoch {e}");
        }
        assert!(lr_schedule(epochs + 1, &cfg).is_err());
    }
}

/// Augmentation draws have the advertised statistics over ten thousand
/// seeds: flip rates, noise strength, contrast range, and exact-mean
/// contrast scaling.
fn c09_augmentation_statistics() {
    let extents = [4usize, 4, 4];
    let voxels: usize = extents.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // All voxels nonzero so the whole volume counts as foreground.
    let image: Vec<f32> = (0..4 * voxels).map(|_| rng.gen_range(0.3..0.7) as f32).collect();
    let tensor = Tensor::from_vec(&[4, 4, 4, 4], image.clone()).unwrap();
    let sample = SampleVolume::new(tensor, vec![0u8; voxels], extents, "aug_probe".into()).unwrap();
    let in_means: Vec<f64> = (0..4)
        .map(|m| {
            image[m * voxels..(m + 1) * voxels].iter().map(|&v| v as f64).sum::<f64>()
                / voxels as f64
        })
        .collect();
    let draws_total = 10_000u64;

    // Flips and contrast active; noise and rotation off.
    let mut cfg = AugmentConfig::new(extents, 1);
    cfg.noise_sigma = 0.0;
    cfg.rotate_deg = 0.0;
    let mut flip_counts = [0usize; 3];
    for draw in 0..draws_total {
        let (out, draws) = augment_traced(&sample, &cfg, draw).unwrap();
        for (c, &f) in flip_counts.iter_mut().zip(&draws.flips) {
            *c += f as usize;
        }
        for &f in &draws.contrast {
            assert!((0.8..=1.2).contains(&f), "contrast factor {f} out of range");
        }
        let data = out.image.data();
        for (m, &mean_in) in in_means.iter().enumerate() {
            let mean_out = data[m * voxels..(m + 1) * voxels]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / voxels as f64;
            assert!(
                ((mean_out - mean_in) / mean_in).abs() <= 1e-5,
                "draw {draw} modality {m}: mean {mean_out} drifted from {mean_in}"
            );
        }
    }
    for (axis, &count) in flip_counts.iter().enumerate() {
        let rate = count as f64 / draws_total as f64;
        assert!((rate - 0.5).abs() <= 0.02, "axis {axis} flip rate {rate}");
    }

    // Noise alone; the pooled voxel deltas must carry the configured sigma.
    let mut cfg = AugmentConfig::identity(extents);
    cfg.noise_sigma = 0.01;
    let (mut sum, mut sumsq, mut n) = (0.0f64, 0.0f64, 0u64);
    for draw in 0..draws_total {
        let out = augment(&sample, &cfg, draw).unwrap();
        for (&o, &i) in out.image.data().iter().zip(&image) {
            let d = (o - i) as f64;
            sum += d;
            sumsq += d * d;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let std = (sumsq / n as f64 - mean * mean).sqrt();
    assert!((std - 0.01).abs() <= 0.0005, "noise std {std} not within 0.01 +- 0.0005");
}

/// Volume files survive a write/read cycle bit for bit in every supported
/// data type, the fixed fixture reproduces its golden byte dump, and the
/// byte-swapped twin decodes to the identical volume.
fn c10_nifti_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let extents = [2usize, 3, 4];
    let spacing = [0.5f64, 2.0, 1.25];
    let cases: Vec<NiftiData> = vec![
        NiftiData::U8((0..24).map(|i| (i * 11 % 251) as u8).collect()),
        NiftiData::I16((0..24).map(|i| (i as i16 - 12) * 513).collect()),
        NiftiData::F32((0..24).map(|i| (i as f32 - 11.5) * 0.37).collect()),
        NiftiData::F64((0..24).map(|i| (i as f64 - 11.5) * 0.37e-3).collect()),
    ];
    for data in &cases {
        let path = dir.path().join(format!("dt{}.nii", data.datatype()));
        write_nifti(&path, data, extents, spacing).unwrap();
        let (header, back) = read_nifti(&path).unwrap();
        assert_eq!(header.extents().unwrap(), extents);
        assert_eq!(header.spacing(), spacing);
        assert_eq!(&back, data, "datatype {} round trip", data.datatype());
        if let (NiftiData::F32(a), NiftiData::F32(b)) = (data, &back) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        if let (NiftiData::F64(a), NiftiData::F64(b)) = (data, &back) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let again = dir.path().join(format!("dt{}_again.nii", data.datatype()));
        write_nifti(&again, &back, extents, spacing).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap(),
            "rewrite of datatype {} is not byte-stable",
            data.datatype()
        );
    }

    const GOLDEN_VOXELS: [f32; 8] = [0.5, -1.25, 2.0, 3.5, -4.75, 5.0, 6.25, 7.5];
    let golden = dir.path().join("golden.nii");
    write_nifti(&golden, &NiftiData::F32(GOLDEN_VOXELS.to_vec()), [2, 2, 2], [1.0, 2.0, 3.0])
        .unwrap();
    let got = std::fs::read(&golden).unwrap();
    let want: &[u8] = include_bytes!("fixtures/golden_2x2x2.nii");
    assert_eq!(got.as_slice(), want, "golden byte dump differs");

    let be = dir.path().join("golden_be.nii");
    std::fs::write(&be, include_bytes!("fixtures/golden_2x2x2_be.nii")).unwrap();
    let (le_header, le_data) = read_nifti(&golden).unwrap();
    let (be_header, be_data) = read_nifti(&be).unwrap();
    assert_eq!(be_header, le_header, "byte-swapped header decodes differently");
    assert_eq!(be_data, le_data, "byte-swapped data decodes differently");
    match &be_data {
        NiftiData::F32(a) => {
            for (x, y) in a.iter().zip(&GOLDEN_VOXELS) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        other => panic!("golden volume must decode as f32, got datatype {}", other.datatype()),
    }
}

/// Two identical runs write byte-identical logs and checkpoints, and a run
/// resumed from a mid-run checkpoint reproduces the uninterrupted outputs
/// bit for bit.
fn c11_training_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let entries: Vec<_> = (10..12)
        .map(|seed| {
            save_sample(&data, &generate_phantom(seed, [16, 16, 16]).unwrap(), [1.0; 3]).unwrap()
        })
        .collect();
    let manifest = data.join("manifest.csv");
    write_manifest(&manifest, &entries).unwrap();

    let mut cfg = TrainConfig::default();
    cfg.model.variant = Variant::Ukan;
    cfg.epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 2;
    cfg.checkpoint_every = 2;
    cfg.augment = true;
    cfg.manifest = manifest;
    cfg.out_dir = dir.path().join("out");
    let out = cfg.out_dir.clone();

    let first = train(&cfg).unwrap();
    assert_eq!(first.stats.len(), 3);
    let csv_a = std::fs::read(out.join(LOSS_CSV)).unwrap();
    let final_a = std::fs::read(out.join(FINAL_CHECKPOINT)).unwrap();
    let mid_a = std::fs::read(out.join("epoch_0002.ckpt")).unwrap();

    train(&cfg).unwrap();
    let csv_b = std::fs::read(out.join(LOSS_CSV)).unwrap();
    let final_b = std::fs::read(out.join(FINAL_CHECKPOINT)).unwrap();
    let mid_b = std::fs::read(out.join("epoch_0002.ckpt")).unwrap();
    assert_eq!(csv_a, csv_b, "loss logs differ between identical runs");
    assert_eq!(final_a, final_b, "final checkpoints differ between identical runs");
    assert_eq!(mid_a, mid_b, "mid-run checkpoints differ between identical runs");

    let resumed = resume(&out.join("epoch_0002.ckpt"), Some(&cfg)).unwrap();
    assert_eq!(resumed.stats.len(), 1, "resume must run exactly the remaining epoch");
    assert_eq!(resumed.stats[0].epoch, 2);
    assert_eq!(
        std::fs::read(out.join(LOSS_CSV)).unwrap(),
        csv_a,
        "resumed loss log differs from the uninterrupted run"
    );
    assert_eq!(
        std::fs::read(out.join(FINAL_CHECKPOINT)).unwrap(),
        final_a,
        "resumed final checkpoint differs from the uninterrupted run"
    );
}
