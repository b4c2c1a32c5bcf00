//! Shared test helpers: finite-difference gradient checking.

use std::collections::BTreeMap;

use ukanep_core::{Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

/// Maximum number of elements perturbed per input; larger tensors are
/// sampled at evenly spaced flat indices.
const MAX_CHECKS: usize = 32;

/// Verifies reverse-mode gradients of a scalar-valued function against
/// central finite differences, evaluated entirely in f64.
///
/// `f` reads its inputs from the map by name; the harness supplies tracked
/// tensors for the analytic pass and plain tensors for the FD evaluations.
pub fn check_gradients(
    seeds: &[(&str, Tensor<f64>)],
    h: f64,
    tol: f64,
    f: impl Fn(&BTreeMap<String, Tensor<f64>>) -> Tensor<f64>,
) {
    let tape = Tape::new();
    let mut tracked = BTreeMap::new();
    for (name, value) in seeds {
        tracked.insert(name.to_string(), tape.watch(name, value).unwrap());
    }
    let loss = f(&tracked);
    assert_eq!(loss.rank(), 0, "gradcheck loss must be scalar");
    let grads = loss.backward().unwrap();

    for (name, value) in seeds {
        let n = value.numel();
        let indices: Vec<usize> = if n <= MAX_CHECKS {
            (0..n).collect()
        } else {
            (0..MAX_CHECKS).map(|j| j * n / MAX_CHECKS).collect()
        };
        let analytic = grads.get(name);
        for &idx in &indices {
            let fd = {
                let eval = |delta: f64| -> f64 {
                    let mut data = value.to_vec();
                    data[idx] += delta;
                    let mut plain: BTreeMap<String, Tensor<f64>> = seeds
                        .iter()
                        .map(|(k, v)| (k.to_string(), v.clone()))
                        .collect();
                    plain.insert(
                        name.to_string(),
                        Tensor::from_vec(value.shape(), data).unwrap(),
                    );
                    f(&plain).item().unwrap()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            };
            let got = analytic.map_or(0.0, |g| g.data()[idx]);
            let denom = 1.0f64.max(got.abs() + fd.abs());
            assert!(
                (got - fd).abs() <= tol * denom,
                "{name}[{idx}]: analytic {got} vs fd {fd} (tol {tol})"
            );
        }
    }
}

/// Convenience wrapper using the default step and tolerance.
pub fn check_gradients_default(
    seeds: &[(&str, Tensor<f64>)],
    f: impl Fn(&BTreeMap<String, Tensor<f64>>) -> Tensor<f64>,
) {
    check_gradients(seeds, FD_STEP, FD_TOL, f);
}

/// Deterministic pseudo-random tensor with entries in `(lo, hi)`.
pub fn seeded(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Like [`seeded`] but keeps every entry at least `margin` away from zero,
/// for ops with a kink there.
pub fn seeded_away_from_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}
