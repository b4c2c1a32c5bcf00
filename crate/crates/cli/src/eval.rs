//! Checkpoint evaluation: Dice, IoU, and 95th-percentile Hausdorff
//! distance per tumor region, written as a per-case CSV with mean and
//! 95% confidence rows at the bottom.

use std::path::Path;

use ukanep_core::error::Result;
use ukanep_core::manifest::{load_sample, read_manifest};
use ukanep_core::metrics::{compose_regions, dice_iou, hd95, summarize, REGION_NAMES};
use ukanep_core::model::Model;
use ukanep_core::param::Binder;
use ukanep_core::phantom::SampleVolume;

use crate::checkpoint::load_checkpoint;

#[derive(Debug, Clone, Copy)]
pub struct RegionScore {
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
}

#[derive(Debug, Clone)]
pub struct CaseScores {
    pub case_id: String,
    /// Indexed like [`REGION_NAMES`].
    pub regions: [RegionScore; 5],
}

/// Voxel labels from an inference pass: argmax over class logits,
/// first class winning ties.
pub fn predict_labels(model: &Model<f32>, sample: &SampleVolume) -> Result<Vec<u8>> {
    let [d, h, w] = sample.extents;
    let channels = sample.image.shape()[0];
    let x = sample.image.reshape(&[1, channels, d, h, w])?;
    let logits = model.forward(&x, &Binder::inference())?;
    let classes = logits.shape()[1];
    let n: usize = logits.shape()[2..].iter().product();
    let data = logits.data();
    let labels = (0..n)
        .map(|v| {
            (1..classes)
                .fold((0usize, data[v]), |(best, top), c| {
                    let val = data[c * n + v];
                    if val > top {
                        (c, val)
                    } else {
                        (best, top)
                    }
                })
                .0 as u8
        })
        .collect();
    Ok(labels)
}

/// Region metrics for a predicted labeling against ground truth.
pub fn score_labels(
    pred: &[u8],
    truth: &[u8],
    extents: [usize; 3],
    spacing: [f64; 3],
) -> Result<[RegionScore; 5]> {
    let p = compose_regions(pred)?;
    let g = compose_regions(truth)?;
    let mut scores = [RegionScore {
        dice: 0.0,
        iou: 0.0,
        hd95: 0.0,
    }; 5];
    for (i, score) in scores.iter_mut().enumerate() {
        let (dice, iou) = dice_iou(&p[i], &g[i])?;
        *score = RegionScore {
            dice,
            iou,
            hd95: hd95(&p[i], &g[i], extents, spacing)?,
        };
    }
    Ok(scores)
}

/// Scores every manifest case with the checkpoint's model and writes the
/// CSV. Aggregate rows (`mean`, `ci95` per region) need at least 2 cases.
pub fn evaluate(checkpoint: &Path, manifest: &Path, out_csv: &Path) -> Result<Vec<CaseScores>> {
    let state = load_checkpoint(checkpoint)?;
    let mut all = Vec::new();
    for entry in &read_manifest(manifest)? {
        let (sample, spacing) = load_sample(entry)?;
        let pred = predict_labels(&state.model, &sample)?;
        let regions = score_labels(&pred, &sample.labels, sample.extents, spacing)?;
        all.push(CaseScores {
            case_id: sample.case_id,
            regions,
        });
    }
    std::fs::write(out_csv, scores_csv(&all)?)?;
    Ok(all)
}

pub fn scores_csv(all: &[CaseScores]) -> Result<String> {
    let mut out = String::from("case_id,region,dice,iou,hd95\n");
    for case in all {
        for (name, s) in REGION_NAMES.iter().zip(&case.regions) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                case.case_id, name, s.dice, s.iou, s.hd95
            ));
        }
    }
    if all.len() >= 2 {
        for (i, name) in REGION_NAMES.iter().enumerate() {
            let column = |f: fn(&RegionScore) -> f64| -> Vec<f64> {
                all.iter().map(|c| f(&c.regions[i])).collect()
            };
            let dice = summarize(&column(|s| s.dice))?;
            let iou = summarize(&column(|s| s.iou))?;
            let hd = summarize(&column(|s| s.hd95))?;
            out.push_str(&format!("mean,{},{},{},{}\n", name, dice.0, iou.0, hd.0));
            out.push_str(&format!("ci95,{},{},{},{}\n", name, dice.1, iou.1, hd.1));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use ukanep_core::manifest::{save_sample, write_manifest};
    use ukanep_core::model::{ModelConfig, Variant};
    use ukanep_core::phantom::generate_phantom;

    use super::*;
    use crate::checkpoint::{save_checkpoint, TrainState};
    use crate::config::TrainConfig;
    use crate::optim::AdamW;

    #[test]
    fn truth_against_itself_is_perfect() {
        let sample = generate_phantom(3, [16, 16, 16]).unwrap();
        let scores =
            score_labels(&sample.labels, &sample.labels, sample.extents, [1.0; 3]).unwrap();
        for s in scores {
            assert_eq!((s.dice, s.iou, s.hd95), (1.0, 1.0, 0.0));
        }
    }

    #[test]
    fn empty_region_conventions_carry_through() {
        // Truth has one snfh voxel, prediction is all background: overlap 0,
        // boundary distance falls back to the grid diagonal.
        let scores = score_labels(&[0, 0], &[0, 2], [1, 1, 2], [1.0, 1.0, 2.0]).unwrap();
        let snfh = scores[1];
        assert_eq!((snfh.dice, snfh.iou), (0.0, 0.0));
        assert_eq!(snfh.hd95, (1.0f64 + 1.0 + 16.0).sqrt());
        // Regions empty on both sides score perfect by convention.
        let netc = scores[0];
        assert_eq!((netc.dice, netc.iou, netc.hd95), (1.0, 1.0, 0.0));
    }

    #[test]
    fn evaluate_writes_per_case_and_aggregate_rows() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<_> = (0..2)
            .map(|seed| {
                let s = generate_phantom(seed, [16, 16, 16]).unwrap();
                save_sample(dir.path(), &s, [1.0; 3]).unwrap()
            })
            .collect();
        let manifest = dir.path().join("cases.csv");
        write_manifest(&manifest, &entries).unwrap();

        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig {
            variant: Variant::Ukan,
            encoder_channels: [2, 3, 4],
            token_dims: [5, 6],
            ..ModelConfig::default()
        };
        let state = TrainState {
            config: cfg.clone(),
            epoch: 0,
            model: Model::new(&cfg.model).unwrap(),
            optimizer: AdamW::from_config(&cfg),
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        let ckpt = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &state).unwrap();

        let out = dir.path().join("metrics.csv");
        let scores = evaluate(&ckpt, &manifest, &out).unwrap();
        assert_eq!(scores.len(), 2);

        let text = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 5 + 2 * 5, "header, cases, aggregates");
        assert_eq!(lines[0], "case_id,region,dice,iou,hd95");
        assert!(lines[1].starts_with("phantom_00000,netc,"));
        assert_eq!(text.lines().filter(|l| l.starts_with("mean,")).count(), 5);
        assert_eq!(text.lines().filter(|l| l.starts_with("ci95,")).count(), 5);

        // The aggregate row restates the per-case column.
        let wt_dice: Vec<f64> = scores.iter().map(|c| c.regions[4].dice).collect();
        let (mean, ci) = summarize(&wt_dice).unwrap();
        let row = text
            .lines()
            .find(|l| l.starts_with("mean,wt,"))
            .unwrap()
            .split(',')
            .nth(2)
            .unwrap();
        assert_eq!(row.parse::<f64>().unwrap(), mean);
        let ci_row = text
            .lines()
            .find(|l| l.starts_with("ci95,wt,"))
            .unwrap()
            .split(',')
            .nth(2)
            .unwrap();
        assert_eq!(ci_row.parse::<f64>().unwrap(), ci);
    }
}
