//! Deterministic training loop.
//!
//! Reproducibility contract: the only stateful random stream is the epoch
//! shuffle (seeded from the run seed and carried through checkpoints);
//! augmentation draws are a pure function of `(seed, case id, epoch)`.
//! Two runs with the same config produce byte-identical loss CSVs, and a
//! resumed run reproduces the uninterrupted one bit for bit.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ukanep_core::augment::{augment, per_sample_seed, AugmentConfig};
use ukanep_core::error::{Error, Result};
use ukanep_core::loss::{
    dice_score_from_counts, one_hot_batch, segmentation_loss, soft_dice_counts, CeMode,
};
use ukanep_core::manifest::{load_sample, read_manifest};
use ukanep_core::model::Model;
use ukanep_core::param::Binder;
use ukanep_core::phantom::SampleVolume;
use ukanep_core::tensor::Tensor;
use ukanep_core::Tape;

use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use crate::config::TrainConfig;
use crate::optim::{lr_schedule, AdamW};

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const CSV_HEADER: &str = "epoch,lr,total,ce,dice,alpha,train_dice,val_dice";

/// One CSV row: schedule value, per-sample loss means, and the
/// epoch-pooled soft Dice on training outputs and on the validation pass.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub alpha: f64,
    pub train_dice: f64,
    pub val_dice: f64,
}

impl EpochStats {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.total,
            self.ce,
            self.dice,
            self.alpha,
            self.train_dice,
            self.val_dice
        )
    }
}

pub struct TrainOutcome {
    /// Stats for the epochs this call ran (resume reports only new ones).
    pub stats: Vec<EpochStats>,
    pub csv: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Trains from scratch, overwriting any previous outputs in `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(cfg, |_| {})
}

/// [`train`] with a per-epoch callback (progress reporting).
pub fn train_observed(cfg: &TrainConfig, observer: impl FnMut(&EpochStats)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = TrainState {
        config: cfg.clone(),
        epoch: 0,
        model: Model::new(&cfg.model)?,
        optimizer: AdamW::from_config(cfg),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    run(state, Vec::new(), observer)
}

/// Continues from a checkpoint using its embedded config. When a config is
/// supplied it must match the embedded one exactly; silently resuming with
/// different settings would corrupt the run.
pub fn resume(checkpoint: &Path, cfg: Option<&TrainConfig>) -> Result<TrainOutcome> {
    resume_observed(checkpoint, cfg, |_| {})
}

/// [`resume`] with a per-epoch callback (progress reporting).
pub fn resume_observed(
    checkpoint: &Path,
    cfg: Option<&TrainConfig>,
    observer: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    let state = load_checkpoint(checkpoint)?;
    if let Some(cfg) = cfg {
        if cfg.to_text() != state.config.to_text() {
            return Err(Error::Config(
                "config does not match the checkpoint's; resume requires identical settings"
                    .into(),
            ));
        }
    }
    let kept = kept_rows(&state.config.out_dir.join(LOSS_CSV), state.epoch)?;
    run(state, kept, observer)
}

/// Rows of an existing loss CSV for epochs before the resume point.
fn kept_rows(csv: &Path, epoch: usize) -> Result<Vec<String>> {
    if !csv.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(csv)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let first = line.split(',').next().unwrap_or("");
        let e: usize = first.parse().map_err(|_| {
            Error::Config(format!("bad epoch field {first:?} in {}", csv.display()))
        })?;
        if e < epoch {
            rows.push(line.to_string());
        }
    }
    Ok(rows)
}

fn load_cases(manifest: &Path) -> Result<Vec<SampleVolume>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| load_sample(e).map(|(sample, _)| sample))
        .collect()
}

/// Augmented training view of one case for one epoch. Without augmentation
/// (or when no crop is configured) the case passes through unchanged apart
/// from a deterministic foreground-preserving crop.
fn prepare(case: &SampleVolume, cfg: &TrainConfig, epoch: usize) -> Result<SampleVolume> {
    let seed = per_sample_seed(cfg.seed, &case.case_id, epoch);
    if cfg.augment {
        let crop = cfg.crop.unwrap_or(case.extents);
        return augment(case, &AugmentConfig::new(crop, cfg.seed), seed);
    }
    match cfg.crop {
        Some(crop) => augment(case, &AugmentConfig::identity(crop), seed),
        None => Ok(case.clone()),
    }
}

/// Stacks same-shaped samples into a `[B, modalities, D, H, W]` batch.
fn assemble(batch: &[SampleVolume]) -> Result<Tensor<f32>> {
    let extents = batch[0].extents;
    if let Some(other) = batch.iter().find(|s| s.extents != extents) {
        return Err(Error::Data(format!(
            "cannot batch {:?} with {:?} ({}); configure a crop to equalize sizes",
            extents, other.extents, other.case_id
        )));
    }
    let channels = batch[0].image.shape()[0];
    let [d, h, w] = extents;
    let mut data = Vec::with_capacity(batch.len() * channels * d * h * w);
    for s in batch {
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(&[batch.len(), channels, d, h, w], data)
}

/// Soft Dice of an inference pass, pooled over all cases. Validation crops
/// (needed when training crops, so shapes stay divisible) are deterministic
/// and epoch-independent.
fn validation_dice(model: &Model<f32>, cases: &[SampleVolume], cfg: &TrainConfig) -> Result<f64> {
    let binder = Binder::inference();
    let mut inter2 = 0.0;
    let mut denom = 0.0;
    for case in cases {
        let view = match cfg.crop {
            Some(crop) if crop != case.extents => augment(
                case,
                &AugmentConfig::identity(crop),
                per_sample_seed(cfg.seed, &case.case_id, 0),
            )?,
            _ => case.clone(),
        };
        let [d, h, w] = view.extents;
        let channels = view.image.shape()[0];
        let x = view.image.reshape(&[1, channels, d, h, w])?;
        let logits = model.forward(&x, &binder)?;
        let (i2, den) = soft_dice_counts(&logits, &[view.labels.as_slice()])?;
        inter2 += i2;
        denom += den;
    }
    Ok(dice_score_from_counts(inter2, denom))
}

fn write_csv(path: &Path, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(
    mut state: TrainState,
    mut rows: Vec<String>,
    mut observer: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let train_cases = load_cases(&cfg.manifest)?;
    let val_owned;
    let val_cases: &[SampleVolume] = match &cfg.val_manifest {
        Some(path) => {
            val_owned = load_cases(path)?;
            &val_owned
        }
        None => &train_cases,
    };
    let csv_path = cfg.out_dir.join(LOSS_CSV);
    let final_path = cfg.out_dir.join(FINAL_CHECKPOINT);

    let mut stats = Vec::new();
    for epoch in state.epoch..cfg.epochs {
        let lr = lr_schedule(epoch, &cfg)?;
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        order.shuffle(&mut state.rng);

        let mut sums = [0.0f64; 4];
        let mut samples = 0usize;
        let mut inter2 = 0.0;
        let mut denom = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SampleVolume> = chunk
                .iter()
                .map(|&i| prepare(&train_cases[i], &cfg, epoch))
                .collect::<Result<_>>()?;
            let labels: Vec<&[u8]> = batch.iter().map(|s| s.labels.as_slice()).collect();
            let x = assemble(&batch)?;

            let tape = Tape::new();
            let logits = state.model.forward(&x, &Binder::training(&tape))?;
            let truth = one_hot_batch::<f32>(&labels, cfg.model.num_classes)?;
            let loss = segmentation_loss(&logits, &truth, cfg.loss_mode, CeMode::Mean)?;
            if !loss.total.all_finite() || loss.samples.iter().any(|s| !s.total.is_finite()) {
                let cases = chunk.iter().map(|&i| train_cases[i].case_id.clone()).collect();
                return Err(Error::NonFiniteLoss { epoch, cases });
            }

            let (i2, den) = soft_dice_counts(&logits, &labels)?;
            inter2 += i2;
            denom += den;
            for s in &loss.samples {
                sums[0] += s.total;
                sums[1] += s.ce;
                sums[2] += s.dice;
                sums[3] += s.alpha;
            }
            samples += loss.samples.len();

            let grads = loss.total.backward()?;
            state.optimizer.step(&mut state.model, &grads, lr)?;
        }

        let n = samples.max(1) as f64;
        let st = EpochStats {
            epoch,
            lr,
            total: sums[0] / n,
            ce: sums[1] / n,
            dice: sums[2] / n,
            alpha: sums[3] / n,
            train_dice: dice_score_from_counts(inter2, denom),
            val_dice: validation_dice(&state.model, val_cases, &cfg)?,
        };
        rows.push(st.csv_row());
        observer(&st);
        stats.push(st);
        write_csv(&csv_path, &rows)?;

        state.epoch = epoch + 1;
        let due = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
        if due && state.epoch < cfg.epochs {
            let name = format!("epoch_{:04}.ckpt", state.epoch);
            save_checkpoint(&cfg.out_dir.join(name), &state)?;
        }
    }
    write_csv(&csv_path, &rows)?;
    save_checkpoint(&final_path, &state)?;
    Ok(TrainOutcome {
        stats,
        csv: csv_path,
        final_checkpoint: final_path,
    })
}
