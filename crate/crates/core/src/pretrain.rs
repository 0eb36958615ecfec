//! Masked-reconstruction pretraining loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_count, sample_masked, EncoderPolicy, MaskSpec, TokenLayout, Variant};
use crate::model::{
    batch_loss_grad, decays, record_loss, save_checkpoint, BatchItem, Checkpoint, ForwardOptions, LossScope,
    ModelConfig, Params,
};
use crate::optim::{lr_at, AdamW, Schedule};
use crate::signal::N_LEADS;
use crate::tokenizer::{TokenDataset, TokenizedRecord};

const MASK_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const VAL_SALT: u64 = 0x7661_6c5f_6d61_736b;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    pub variant: Variant,
    pub policy: EncoderPolicy,
    pub loss_scope: LossScope,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub save_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 10,
            peak_lr: 5e-4,
            min_lr: 1e-5,
            weight_decay: 1e-4,
            betas: (0.9, 0.99),
            batch_size: 32,
            mask_ratio: 0.8,
            seed: 0,
            variant: Variant::Clear,
            policy: EncoderPolicy::PaperLiteral,
            loss_scope: LossScope::Masked,
            save_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("mask_ratio must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::Config("need 0 <= min_lr <= peak_lr and peak_lr > 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n_train: usize) -> Schedule {
        let spe = self.steps_per_epoch(n_train);
        Schedule {
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_epochs * spe,
            total_steps: self.epochs * spe,
        }
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed.
    pub step: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_masked_mse: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,val_masked_mse";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch, r.step, r.lr, r.train_loss, r.val_masked_mse
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Row 0 evaluates the initial model; row `e` follows epoch `e`.
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Seed-derived masks, one per record, identical across calls.
pub fn fixed_masks(dataset: &TokenDataset, ratio: f64, variant: Variant, seed: u64) -> Result<Vec<MaskSpec>> {
    let layout = TokenLayout::new(dataset.n_beats);
    dataset
        .records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VAL_SALT);
            rng.set_stream(k as u64);
            let masked = sample_masked(layout, &r.valid, ratio, &mut rng);
            MaskSpec::new(layout, &r.valid, &masked, variant)
        })
        .collect()
}

/// Mean over records of the per-record masked MSE.
pub fn masked_mse(
    params: &Params<f32>,
    records: &[TokenizedRecord],
    specs: &[MaskSpec],
    opts: &ForwardOptions,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptySelection("no records to evaluate".into()));
    }
    let losses: Vec<f64> = records
        .par_iter()
        .zip(specs)
        .map(|(r, s)| {
            let sel = LossScope::Masked.selection(s)?;
            record_loss(params, r, s, &sel, opts).map(|l| l as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn check_dataset(ds: &TokenDataset, cfg: &ModelConfig, what: &str) -> Result<()> {
    if ds.records.is_empty() {
        return Err(Error::Config(format!("{what} set is empty")));
    }
    if ds.n_beats != cfg.n_beats || ds.beat_len != cfg.beat_len {
        return Err(Error::Shape(format!(
            "{what} set has {} beats of {} samples, model expects {} of {}",
            ds.n_beats, ds.beat_len, cfg.n_beats, cfg.beat_len
        )));
    }
    Ok(())
}

/// Trains from scratch. With `out_dir`, writes `metrics.csv` after every
/// epoch, periodic checkpoints and `final.chck`; on a non-finite loss the
/// last good parameters are written to `last_good.chck`.
pub fn train(
    train_set: &TokenDataset,
    val_set: &TokenDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_dataset(train_set, model_cfg, "training")?;
    check_dataset(val_set, model_cfg, "validation")?;
    if cfg.loss_scope == LossScope::Masked {
        if let Some(r) = train_set
            .records
            .iter()
            .find(|r| mask_count(N_LEADS * r.n_valid(), cfg.mask_ratio) == 0)
        {
            return Err(Error::EmptySelection(format!(
                "mask ratio {} masks nothing in record {} and the loss scope is 'masked'",
                cfg.mask_ratio, r.record_id
            )));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let opts = ForwardOptions::new(cfg.policy);
    let mut params: Params<f32> = Params::init(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(cfg.betas, cfg.weight_decay);
    let n_train = train_set.records.len();
    let schedule = cfg.schedule(n_train);
    let layout = TokenLayout::new(model_cfg.n_beats);

    let val_specs = fixed_masks(val_set, cfg.mask_ratio, cfg.variant, cfg.seed)?;
    let train_specs = fixed_masks(train_set, cfg.mask_ratio, cfg.variant, cfg.seed.wrapping_add(1))?;
    let has_masked = |specs: &[MaskSpec]| specs.iter().all(|s| s.n_masked() > 0);
    let eval = |p: &Params<f32>, records: &[TokenizedRecord], specs: &[MaskSpec]| -> Result<f64> {
        if has_masked(specs) {
            masked_mse(p, records, specs, &opts)
        } else {
            Ok(f64::NAN)
        }
    };

    let checkpoint = |p: &Params<f32>, epoch: usize| Checkpoint {
        params: p.clone(),
        variant: cfg.variant,
        policy: cfg.policy,
        rng_seed: cfg.seed,
        epoch: epoch as u32,
    };
    let mut metrics = vec![EpochMetrics {
        epoch: 0,
        step: 0,
        lr: lr_at(0, &schedule),
        train_loss: eval(&params, &train_set.records, &train_specs)?,
        val_masked_mse: eval(&params, &val_set.records, &val_specs)?,
    }];
    progress(&metrics[0]);
    let write_metrics = |rows: &[EpochMetrics]| -> Result<()> {
        if let Some(dir) = out_dir {
            crate::model::write_atomic(&dir.join("metrics.csv"), metrics_csv(rows).as_bytes())?;
        }
        Ok(())
    };
    write_metrics(&metrics)?;

    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(MASK_STREAM);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut step = 0usize;
    let mut checkpoint_paths = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(SHUFFLE_STREAM + epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<BatchItem> = batch
                .iter()
                .map(|&i| {
                    let r = &train_set.records[i];
                    let masked = sample_masked(layout, &r.valid, cfg.mask_ratio, &mut mask_rng);
                    let spec = MaskSpec::new(layout, &r.valid, &masked, cfg.variant)?;
                    let selection = cfg.loss_scope.selection(&spec)?;
                    Ok(BatchItem {
                        record: r,
                        spec,
                        selection,
                        seed: mask_rng.next_u64(),
                    })
                })
                .collect::<Result<_>>()?;
            let (loss, grads) = match batch_loss_grad(&params, &items, &opts) {
                Ok(v) => v,
                Err(e) => {
                    if e.is_numeric() {
                        if let Some(dir) = out_dir {
                            save_checkpoint(&checkpoint(&params, epoch - 1), &dir.join("last_good.chck"))?;
                        }
                    }
                    return Err(e);
                }
            };
            lr = lr_at(step, &schedule);
            opt.step(params.tensors_mut(), grads.tensors(), lr, decays);
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        if let Err(e) = params.ensure_finite("parameters after update") {
            if let Some(dir) = out_dir {
                save_checkpoint(&checkpoint(&params, epoch - 1), &dir.join("last_good.chck"))?;
            }
            return Err(e);
        }
        let row = EpochMetrics {
            epoch,
            step,
            lr,
            train_loss: loss_sum / n_train as f64,
            val_masked_mse: eval(&params, &val_set.records, &val_specs)?,
        };
        progress(&row);
        metrics.push(row);
        write_metrics(&metrics)?;
        if let Some(dir) = out_dir {
            if cfg.save_every > 0 && epoch % cfg.save_every == 0 && epoch != cfg.epochs {
                let path = dir.join(format!("epoch_{epoch:04}.chck"));
                save_checkpoint(&checkpoint(&params, epoch), &path)?;
                checkpoint_paths.push(path);
            }
        }
    }
    let final_ck = checkpoint(&params, cfg.epochs);
    if let Some(dir) = out_dir {
        let path = dir.join("final.chck");
        save_checkpoint(&final_ck, &path)?;
        checkpoint_paths.push(path);
    }
    Ok(TrainOutcome {
        checkpoint: final_ck,
        metrics,
        checkpoint_paths,
    })
}
