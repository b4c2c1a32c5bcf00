//! Evaluation metrics over binary voxel masks: Dice, IoU, and the 95th
//! percentile of pooled boundary-to-boundary distances (HD95), plus the
//! label-map decomposition into tumor subregions and report aggregation.
//!
//! Boundaries use 6-connectivity: a mask voxel is a boundary voxel when at
//! least one of its six axis neighbors is outside the mask or outside the
//! grid. Distances are Euclidean between voxel centers, scaled per axis by
//! the voxel spacing; the percentile is nearest-rank without interpolation.
//! Degenerate conventions: both masks empty gives 0, exactly one empty
//! gives the grid diagonal length.

use crate::error::{Error, Result};

/// Subregion report order: the four label classes, then the whole-tumor
/// union of the three tumor tissue classes.
pub const REGION_NAMES: [&str; 5] = ["netc", "snfh", "et", "rc", "wt"];

/// Overlap metrics with the both-empty convention `dice = iou = 1`.
pub fn dice_iou(p: &[bool], g: &[bool]) -> Result<(f64, f64)> {
    if p.len() != g.len() {
        return Err(Error::Metrics(format!(
            "mask lengths differ: {} vs {}",
            p.len(),
            g.len()
        )));
    }
    let mut inter = 0u64;
    let mut p_sum = 0u64;
    let mut g_sum = 0u64;
    for (&a, &b) in p.iter().zip(g) {
        inter += (a && b) as u64;
        p_sum += a as u64;
        g_sum += b as u64;
    }
    if p_sum + g_sum == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p_sum + g_sum - inter;
    Ok((
        2.0 * inter as f64 / (p_sum + g_sum) as f64,
        inter as f64 / union as f64,
    ))
}

/// Marks mask voxels with at least one of their six axis neighbors outside
/// the mask or outside the grid.
pub fn boundary_voxels(mask: &[bool], extents: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = extents;
    debug_assert_eq!(mask.len(), d * h * w);
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[idx(z, y, x)] {
                    continue;
                }
                let exposed = (z == 0 || !mask[idx(z - 1, y, x)])
                    || (z + 1 == d || !mask[idx(z + 1, y, x)])
                    || (y == 0 || !mask[idx(z, y - 1, x)])
                    || (y + 1 == h || !mask[idx(z, y + 1, x)])
                    || (x == 0 || !mask[idx(z, y, x - 1)])
                    || (x + 1 == w || !mask[idx(z, y, x + 1)]);
                out[idx(z, y, x)] = exposed;
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas)
/// along a line with squared axis weight `w2`. `f` holds per-position source
/// costs (`INFINITY` where no source); overwritten with the result.
fn dt_line(f: &mut [f64], w2: f64, v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let intersect = |f: &[f64], q: usize, p: usize| {
        ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64))
            / (2.0 * w2 * (q - p) as f64)
    };
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        // Pop parabolas the new one dominates from their takeover point on.
        let mut s = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            s = intersect(f, q, p);
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            s = f64::NEG_INFINITY;
        }
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    let cost: Vec<f64> = v.iter().map(|&q| f[q]).collect();
    for (i, out) in f.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < i as f64 {
            k += 1;
        }
        let q = v[k];
        let delta = i as f64 - q as f64;
        *out = w2 * delta * delta + cost[k];
    }
}

/// Exact squared Euclidean distance transform: for every voxel the squared
/// distance to the nearest `true` site, with per-axis spacing. All
/// `INFINITY` when there are no sites.
pub fn squared_edt(sites: &[bool], extents: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = extents;
    debug_assert_eq!(sites.len(), d * h * w);
    let mut dist: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut v = Vec::new();
    let mut z = Vec::new();
    let mut line = vec![0.0; w.max(h).max(d)];

    for zc in 0..d {
        for y in 0..h {
            let row = &mut dist[(zc * h + y) * w..(zc * h + y + 1) * w];
            dt_line(row, spacing[2] * spacing[2], &mut v, &mut z);
        }
    }
    for zc in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = dist[(zc * h + y) * w + x];
            }
            dt_line(&mut line[..h], spacing[1] * spacing[1], &mut v, &mut z);
            for y in 0..h {
                dist[(zc * h + y) * w + x] = line[y];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for zc in 0..d {
                line[zc] = dist[(zc * h + y) * w + x];
            }
            dt_line(&mut line[..d], spacing[0] * spacing[0], &mut v, &mut z);
            for zc in 0..d {
                dist[(zc * h + y) * w + x] = line[zc];
            }
        }
    }
    dist
}

/// Length of the grid diagonal in millimeters; the one-mask-empty value.
pub fn grid_diagonal(extents: [usize; 3], spacing: [f64; 3]) -> f64 {
    extents
        .iter()
        .zip(spacing)
        .map(|(&e, s)| {
            let d = e as f64 * s;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// 95th percentile (nearest-rank) of the pooled boundary-to-boundary
/// distances between two masks, in millimeters.
pub fn hd95(p: &[bool], g: &[bool], extents: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    let [d, h, w] = extents;
    if p.len() != d * h * w || g.len() != p.len() {
        return Err(Error::Metrics(format!(
            "masks must both cover extents {extents:?}"
        )));
    }
    let p_empty = !p.iter().any(|&m| m);
    let g_empty = !g.iter().any(|&m| m);
    match (p_empty, g_empty) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(grid_diagonal(extents, spacing)),
        _ => {}
    }

    let bp = boundary_voxels(p, extents);
    let bg = boundary_voxels(g, extents);
    let to_g = squared_edt(&bg, extents, spacing);
    let to_p = squared_edt(&bp, extents, spacing);

    let mut pooled: Vec<f64> = Vec::new();
    for (i, &is_b) in bp.iter().enumerate() {
        if is_b {
            pooled.push(to_g[i]);
        }
    }
    for (i, &is_b) in bg.iter().enumerate() {
        if is_b {
            pooled.push(to_p[i]);
        }
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let rank = ((0.95 * pooled.len() as f64).ceil() as usize).max(1);
    Ok(pooled[rank - 1].sqrt())
}

/// Splits a label map into the four class masks plus the whole-tumor union
/// (classes 1, 2, 3), in [`REGION_NAMES`] order.
pub fn compose_regions(labels: &[u8]) -> Result<[Vec<bool>; 5]> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 4) {
        return Err(Error::Metrics(format!("label {bad} outside 0..=4")));
    }
    let netc: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let snfh: Vec<bool> = labels.iter().map(|&l| l == 2).collect();
    let et: Vec<bool> = labels.iter().map(|&l| l == 3).collect();
    let rc: Vec<bool> = labels.iter().map(|&l| l == 4).collect();
    let wt: Vec<bool> = labels.iter().map(|&l| (1..=3).contains(&l)).collect();
    Ok([netc, snfh, et, rc, wt])
}

/// Mean and half-width of the 95% interval `1.96 * s / sqrt(n)` using the
/// sample standard deviation. Needs at least two values.
pub fn summarize(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Metrics(format!(
            "aggregation needs at least 2 cases, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}
