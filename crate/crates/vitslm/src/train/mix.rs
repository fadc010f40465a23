//! Batch-level label mixing: convex image blends or cut-and-paste boxes,
//! with the matching soft-label pair (a, b, λ).
//!
//! Samples pair with the reversed batch (i with B-1-i) and one λ is drawn
//! per batch. Draw order is fixed: mode switch (only when both strengths
//! are positive), then λ, then the box corner for the cut path. A batch of
//! one, or both strengths zero, passes through and consumes no randomness.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::model::Batch;

/// Largest fully-inside box of area fraction about (1-lam), plus the label
/// weight adjusted to the realized area. Side lengths round to the nearest
/// pixel; a zero side yields an empty box and weight exactly 1.
pub fn cutmix_box(
    height: usize,
    width: usize,
    lam: f64,
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize, f64) {
    let cut = (1.0 - lam).max(0.0).sqrt();
    let rh = ((height as f64) * cut).round().min(height as f64) as usize;
    let rw = ((width as f64) * cut).round().min(width as f64) as usize;
    if rh == 0 || rw == 0 {
        return (0, 0, 0, 0, 1.0);
    }
    let y0 = rng.random_range(0..=height - rh);
    let x0 = rng.random_range(0..=width - rw);
    let lam_adj = 1.0 - (rh * rw) as f64 / (height * width) as f64;
    (y0, x0, rh, rw, lam_adj)
}

fn blend(images: &mut [f32], batch: usize, numel: usize, lam: f64) {
    let l = lam as f32;
    let orig = images.to_vec();
    for i in 0..batch {
        let j = batch - 1 - i;
        let (dst, src) = (i * numel, j * numel);
        for k in 0..numel {
            images[dst + k] = l * orig[dst + k] + (1.0 - l) * orig[src + k];
        }
    }
}

fn paste_box(
    images: &mut [f32],
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    (y0, x0, rh, rw): (usize, usize, usize, usize),
) {
    let numel = channels * height * width;
    let orig = images.to_vec();
    for i in 0..batch {
        let j = batch - 1 - i;
        for c in 0..channels {
            for y in y0..y0 + rh {
                let row = (c * height + y) * width;
                for x in x0..x0 + rw {
                    images[i * numel + row + x] = orig[j * numel + row + x];
                }
            }
        }
    }
}

/// Mixes a hard-labeled batch in place and returns it with the soft-label
/// triple filled in; the loss is later lam*CE(label_a) + (1-lam)*CE(label_b).
#[allow(clippy::too_many_arguments)]
pub fn mix_batch(
    mut batch: Batch,
    rng: &mut ChaCha8Rng,
    mixup_alpha: f64,
    cutmix_alpha: f64,
    switch_prob: f64,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Batch> {
    for (name, a) in [("mixup_alpha", mixup_alpha), ("cutmix_alpha", cutmix_alpha)] {
        if !a.is_finite() || a < 0.0 {
            return Err(Error::Config(format!("{name} must be finite and >= 0, got {a}")));
        }
    }
    if !(0.0..=1.0).contains(&switch_prob) {
        return Err(Error::Config(format!("switch_prob must be in [0, 1], got {switch_prob}")));
    }
    let b = batch.batch_size;
    let numel = channels * height * width;
    if batch.images.len() != b * numel || batch.label_a.len() != b {
        return Err(Error::Dim(format!(
            "batch holds {} image values and {} labels for batch size {b} and {numel} values per image",
            batch.images.len(),
            batch.label_a.len()
        )));
    }
    if b <= 1 || (mixup_alpha <= 0.0 && cutmix_alpha <= 0.0) {
        return Ok(batch);
    }

    let use_cut = if mixup_alpha > 0.0 && cutmix_alpha > 0.0 {
        rng.random_bool(switch_prob)
    } else {
        cutmix_alpha > 0.0
    };
    let alpha = if use_cut { cutmix_alpha } else { mixup_alpha };
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("Beta({alpha}, {alpha}): {e}")))?;
    let lam: f64 = beta.sample(rng);

    let lam_label = if use_cut {
        let (y0, x0, rh, rw, lam_adj) = cutmix_box(height, width, lam, rng);
        paste_box(&mut batch.images, b, channels, height, width, (y0, x0, rh, rw));
        lam_adj
    } else {
        blend(&mut batch.images, b, numel, lam);
        lam
    };

    let partner: Vec<u32> = batch.label_a.iter().rev().copied().collect();
    batch.label_b = partner;
    batch.lam = vec![lam_label; b];
    Ok(batch)
}
