//! Training harness: schedule, optimizer, mixing, metrics, and the
//! deterministic epoch loop.
//!
//! Every random decision is drawn from a stream keyed by (seed, purpose,
//! epoch/step), so a run is a pure function of its seed: batch order,
//! augmentation, mixing, and branch dropping never share state and reruns
//! are bitwise identical apart from wall-clock fields.

pub mod metrics;
pub mod mix;
pub mod optim;

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{apply_norm, augment, compute_norm_stats, Dataset};
use crate::error::{Error, Result};
use crate::model::checkpoint::save_checkpoint;
use crate::model::params::ParamSet;
use crate::model::vit::{bind_params, build_model, forward, forward_graph, patchify};
use crate::model::{Batch, Mode, ModelConfig};
use crate::rng::{derive_rng, stream};
use crate::tensor::Graph;

pub use metrics::{
    aggregate_seeds, mean_std, paired_t_test, stability_metrics, top_k_correct, MeanStd,
    SeedAggregate, StabilityMetrics, TTestResult,
};
pub use mix::mix_batch;
pub use optim::{adamw_step, cosine_lr, AdamWState, EMAState};

/// Adam epsilon. Fixed rather than configured; the run configuration
/// carries everything protocol-level that varies.
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub mix_switch_prob: f64,
    pub drop_path: f64,
    pub ema_decay: f64,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            warmup_epochs: 5,
            base_lr: 1e-3,
            min_lr: 1e-5,
            batch_size: 1024,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            mix_switch_prob: 0.5,
            drop_path: 0.1,
            ema_decay: 0.9998,
            seeds: vec![42, 123],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return fail(format!("base_lr must be finite and positive, got {}", self.base_lr));
        }
        if !self.min_lr.is_finite() || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return fail(format!(
                "min_lr must be in [0, base_lr], got {} with base_lr {}",
                self.min_lr, self.base_lr
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        for (name, a) in [("mixup_alpha", self.mixup_alpha), ("cutmix_alpha", self.cutmix_alpha)] {
            if !a.is_finite() || a < 0.0 {
                return fail(format!("{name} must be finite and >= 0, got {a}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mix_switch_prob) {
            return fail(format!("mix_switch_prob must be in [0, 1], got {}", self.mix_switch_prob));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return fail(format!("drop_path must be in [0, 1), got {}", self.drop_path));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if self.seeds.is_empty() {
            return fail("seeds must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub ema_val_top1: f64,
    pub lr: f64,
    pub epoch_seconds: f64,
}

/// Per-epoch curves plus the derived peak/final summary of the EMA curve.
/// `throughput` is train images per second over the update phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub epochs: Vec<EpochRow>,
    pub peak_epoch: usize,
    pub peak_top1: f64,
    pub final_top1: f64,
    pub peak_to_final_gap: f64,
    pub throughput: f64,
    pub final_train_top1: f64,
    pub best_ema_top1: f64,
    pub best_epoch: usize,
}

impl RunMetrics {
    /// Copy with wall-clock fields zeroed; two runs of the same seed must
    /// compare equal under this view.
    pub fn normalized(&self) -> RunMetrics {
        let mut out = self.clone();
        out.throughput = 0.0;
        for row in &mut out.epochs {
            row.epoch_seconds = 0.0;
        }
        out
    }
}

fn check_dataset(cfg: &ModelConfig, ds: &Dataset, name: &str) -> Result<()> {
    if ds.num_samples() == 0 {
        return Err(Error::Config(format!("{name} dataset is empty")));
    }
    if ds.channels != cfg.in_channels || ds.height != cfg.image_size || ds.width != cfg.image_size
    {
        return Err(Error::Config(format!(
            "{name} dataset is {}x{}x{}, model expects {}x{}x{}",
            ds.channels, ds.height, ds.width, cfg.in_channels, cfg.image_size, cfg.image_size
        )));
    }
    if ds.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "{name} dataset has {} classes, model has {}",
            ds.num_classes, cfg.num_classes
        )));
    }
    Ok(())
}

/// Top-1 and top-k percent (k = min(5, classes)) under eval-mode forward.
pub fn evaluate(params: &ParamSet<f32>, cfg: &ModelConfig, ds: &Dataset) -> Result<(f64, f64)> {
    check_dataset(cfg, ds, "eval")?;
    let n = ds.num_samples();
    let k = 5.min(cfg.num_classes);
    let bs = 256.min(n);
    let numel = ds.image_numel();
    let (mut c1, mut ck) = (0usize, 0usize);
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let images = ds.images[start * numel..end * numel].to_vec();
        let labels = ds.labels[start..end].to_vec();
        let batch = Batch::hard(images, labels);
        let logits = forward::<f32>(params, cfg, &batch, Mode::Eval, None)?;
        c1 += top_k_correct(&logits, cfg.num_classes, &batch.label_a, 1)?;
        ck += top_k_correct(&logits, cfg.num_classes, &batch.label_a, k)?;
        start = end;
    }
    Ok((100.0 * c1 as f64 / n as f64, 100.0 * ck as f64 / n as f64))
}

fn config_hash(cfg: &ModelConfig, tc: &TrainConfig, seed: u64) -> Result<String> {
    let doc = serde_json::json!({ "model": cfg, "train": tc, "seed": seed });
    let bytes = serde_json::to_vec(&doc)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Runs one seed of the full loop: shuffled batches, augmentation, label
/// mixing, AdamW under the cosine schedule, EMA tracking, per-epoch
/// validation with raw and EMA weights.
///
/// With an output directory this writes `metrics.csv` (one row per epoch),
/// `manifest.json` (configs, seed, config hash, normalization stats), and
/// `best_ema.ckpt` holding the EMA weights of the best EMA-top-1 epoch.
/// A non-finite loss aborts with the step index, learning rate, and
/// gradient norm.
pub fn train(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    seed: u64,
    train_ds: &Dataset,
    val_ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<RunMetrics> {
    cfg.validate()?;
    tc.validate()?;
    check_dataset(cfg, train_ds, "train")?;
    check_dataset(cfg, val_ds, "val")?;
    let mut run_cfg = cfg.clone();
    run_cfg.drop_path_rate = tc.drop_path;
    run_cfg.validate()?;

    // Normalization stats come from the training split and are shared with
    // validation. Pre-normalized inputs pass through untouched.
    let (tr, va, norm) = match (&train_ds.norm, &val_ds.norm) {
        (None, None) => {
            let stats = compute_norm_stats(train_ds);
            let mut tr = train_ds.clone();
            let mut va = val_ds.clone();
            apply_norm(&mut tr, &stats)?;
            apply_norm(&mut va, &stats)?;
            (tr, va, stats)
        }
        (Some(s), Some(_)) => (train_ds.clone(), val_ds.clone(), s.clone()),
        _ => {
            return Err(Error::Config(
                "train and val datasets disagree on normalization; normalize both or neither"
                    .into(),
            ))
        }
    };

    let (mut params, _) = build_model::<f32>(&run_cfg, seed)?;
    let mut opt = AdamWState::new(&params);
    let mut ema = EMAState::from_params(&params, tc.ema_decay)?;

    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let manifest = serde_json::json!({
                "model": run_cfg,
                "train": tc,
                "seed": seed,
                "config_hash": config_hash(&run_cfg, tc, seed)?,
                "norm": norm,
            });
            std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
            writeln!(w, "epoch,train_loss,val_top1,val_top5,ema_val_top1,lr,epoch_seconds")?;
            Some(w)
        }
        None => None,
    };

    let n_train = tr.num_samples();
    let steps_per_epoch = n_train.div_ceil(tc.batch_size);
    let total_steps = tc.epochs * steps_per_epoch;
    let warmup_steps = tc.warmup_epochs * steps_per_epoch;
    let (c, h, w) = (tr.channels, tr.height, tr.width);

    let mut rows: Vec<EpochRow> = Vec::with_capacity(tc.epochs);
    let mut global_step = 0usize;
    let mut train_seconds = 0.0f64;
    let mut images_seen = 0usize;
    let mut best_ema = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_shadow: Option<Vec<Vec<f32>>> = None;

    for epoch in 1..=tc.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut derive_rng(seed, &[stream::DATA_ORDER, epoch as u64]));

        let mut loss_sum = 0.0f64;
        let mut sample_sum = 0usize;
        let mut last_lr = 0.0f64;
        for (step_in_epoch, chunk) in order.chunks(tc.batch_size).enumerate() {
            global_step += 1;
            let lr = cosine_lr(global_step, total_steps, warmup_steps, tc.base_lr, tc.min_lr)?;

            let bsz = chunk.len();
            let mut images = Vec::with_capacity(bsz * tr.image_numel());
            let mut labels = Vec::with_capacity(bsz);
            for &idx in chunk {
                let mut arng = derive_rng(seed, &[stream::AUGMENT, epoch as u64, idx as u64]);
                images.extend(augment(tr.image(idx), c, h, w, &mut arng, Mode::Train)?);
                labels.push(tr.label(idx));
            }
            let mut mrng =
                derive_rng(seed, &[stream::MIXUP, epoch as u64, step_in_epoch as u64]);
            let batch = mix_batch(
                Batch::hard(images, labels),
                &mut mrng,
                tc.mixup_alpha,
                tc.cutmix_alpha,
                tc.mix_switch_prob,
                c,
                h,
                w,
            )?;

            let patches = patchify(&batch.images, bsz, c, h, w, run_cfg.patch_size)?;
            let mut g: Graph<f32> = Graph::new();
            let binding = bind_params(&mut g, &params, true)?;
            let mut drng =
                derive_rng(seed, &[stream::DROPPATH, epoch as u64, step_in_epoch as u64]);
            let out = forward_graph(
                &mut g,
                &binding,
                &run_cfg,
                &patches,
                bsz,
                Mode::Train,
                Some(&mut drng),
            )?;
            let loss =
                g.cross_entropy_mixed(out.logits, &batch.label_a, &batch.label_b, &batch.lam)?;
            let loss_val = f64::from(g.value(loss)[0]);
            g.backward(loss)?;
            let grads: Vec<Vec<f32>> = binding
                .storage_leaves
                .iter()
                .enumerate()
                .map(|(i, &leaf)| {
                    g.grad(leaf).unwrap_or_else(|| vec![0.0; params.storages()[i].numel()])
                })
                .collect();
            let grad_norm = grads
                .iter()
                .flat_map(|v| v.iter())
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {global_step} (epoch {epoch}, lr {lr:.6e}, grad norm {grad_norm:.6e})"
                )));
            }
            adamw_step(
                &mut params,
                &grads,
                &mut opt,
                lr,
                tc.beta1,
                tc.beta2,
                ADAM_EPS,
                tc.weight_decay,
            )?;
            ema.update(&params)?;
            loss_sum += loss_val * bsz as f64;
            sample_sum += bsz;
            images_seen += bsz;
            last_lr = lr;
        }
        train_seconds += epoch_start.elapsed().as_secs_f64();

        let (val_top1, val_top5) = evaluate(&params, &run_cfg, &va)?;
        ema.swap(&mut params)?;
        let (ema_val_top1, _) = evaluate(&params, &run_cfg, &va)?;
        ema.swap(&mut params)?;
        if ema_val_top1 > best_ema {
            best_ema = ema_val_top1;
            best_epoch = epoch;
            best_shadow = Some(ema.shadow.clone());
        }

        let row = EpochRow {
            epoch,
            train_loss: loss_sum / sample_sum as f64,
            val_top1,
            val_top5,
            ema_val_top1,
            lr: last_lr,
            epoch_seconds: epoch_start.elapsed().as_secs_f64(),
        };
        if let Some(w) = csv.as_mut() {
            writeln!(
                w,
                "{},{:.6},{:.4},{:.4},{:.4},{:.6e},{:.3}",
                row.epoch,
                row.train_loss,
                row.val_top1,
                row.val_top5,
                row.ema_val_top1,
                row.lr,
                row.epoch_seconds
            )?;
            w.flush()?;
        }
        rows.push(row);
    }

    if let (Some(dir), Some(shadow)) = (out_dir, best_shadow.take()) {
        let mut best = params.clone();
        for (storage, data) in best.storages_mut().iter_mut().zip(shadow) {
            storage.data = data;
        }
        save_checkpoint(&dir.join("best_ema.ckpt"), &run_cfg, &best)?;
    }

    let (final_train_top1, _) = evaluate(&params, &run_cfg, &tr)?;
    let curve: Vec<f64> = rows.iter().map(|r| r.ema_val_top1).collect();
    let stab = stability_metrics(&curve)?;
    Ok(RunMetrics {
        seed,
        epochs: rows,
        peak_epoch: stab.peak_epoch,
        peak_top1: stab.peak,
        final_top1: stab.final_value,
        peak_to_final_gap: stab.gap,
        throughput: if train_seconds > 0.0 { images_seen as f64 / train_seconds } else { 0.0 },
        final_train_top1,
        best_ema_top1: best_ema,
        best_epoch,
    })
}
