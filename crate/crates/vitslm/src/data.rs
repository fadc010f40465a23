//! Datasets: CIFAR-10 binary files, a synthetic template dataset, crop and
//! flip augmentation, and per-channel normalization.

use std::path::Path;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mode;
use crate::rng::{derive_rng, stream};

const CIFAR_CHANNELS: usize = 3;
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;
const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

/// Crop padding: images are reflect-padded this much on every side before
/// a random crop back to the original size.
pub const CROP_PAD: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// In-memory dataset. `images` is [N, C, H, W] row-major with values in
/// [0, 1] until normalization is applied.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_numel();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }
}

/// Loads CIFAR-10 binary batches: 3073-byte records, a label byte followed
/// by 3x32x32 pixel planes. Files are concatenated in argument order.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = (bytes.len() / CIFAR_RECORD) * CIFAR_RECORD;
            return Err(Error::Format(format!(
                "{}: truncated record at byte offset {offset} ({} bytes total, expected a multiple of {CIFAR_RECORD})",
                path.display(),
                bytes.len(),
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0];
            if label as usize >= CIFAR_CLASSES {
                return Err(Error::Format(format!(
                    "{}: label {label} out of range for {CIFAR_CLASSES} classes",
                    path.display(),
                )));
            }
            labels.push(label as u32);
            images.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: CIFAR_CLASSES,
        channels: CIFAR_CHANNELS,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        norm: None,
    })
}

/// Writes a dataset in CIFAR-10 binary layout. Pixels must still be in
/// [0, 1]; they are scaled to bytes by rounding.
pub fn write_cifar_binary<P: AsRef<Path>>(path: P, ds: &Dataset) -> Result<()> {
    if ds.channels != CIFAR_CHANNELS || ds.height != CIFAR_SIDE || ds.width != CIFAR_SIDE {
        return Err(Error::Config(format!(
            "CIFAR binary layout requires 3x32x32 images, got {}x{}x{}",
            ds.channels, ds.height, ds.width
        )));
    }
    let mut bytes = Vec::with_capacity(ds.num_samples() * CIFAR_RECORD);
    for i in 0..ds.num_samples() {
        let label = ds.labels[i];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!(
                "label {label} out of range for {CIFAR_CLASSES} classes"
            )));
        }
        bytes.push(label as u8);
        for &v in ds.image(i) {
            bytes.push((f64::from(v) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Per-class templates drawn uniformly in [0, 1], redrawn until every pair
/// is at least 0.05 * sqrt(numel) apart in L2. Each class gets at most 100
/// attempts.
pub fn synth_templates(
    num_classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    if num_classes == 0 || image_size == 0 {
        return Err(Error::Config("synthetic dataset needs classes >= 1 and image_size >= 1".into()));
    }
    let numel = CIFAR_CHANNELS * image_size * image_size;
    let min_dist = 0.5 * (numel as f64).sqrt() * 0.1;
    let mut rng = derive_rng(seed, &[stream::SYNTH_TEMPLATE]);
    let mut templates: Vec<Vec<f32>> = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut accepted = false;
        for _ in 0..100 {
            let cand: Vec<f32> = (0..numel).map(|_| rng.random::<f32>()).collect();
            let ok = templates.iter().all(|t| {
                let d2: f64 = t
                    .iter()
                    .zip(&cand)
                    .map(|(&a, &b)| {
                        let d = f64::from(a) - f64::from(b);
                        d * d
                    })
                    .sum();
                d2.sqrt() >= min_dist
            });
            if ok {
                templates.push(cand);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::DataGen(format!(
                "could not place a template for class {class} at min distance {min_dist:.3} within 100 attempts"
            )));
        }
    }
    Ok(templates)
}

/// Synthetic classification dataset: per-class templates plus Gaussian
/// pixel noise, clipped back to [0, 1], in class-major sample order.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(Error::Config(format!("noise_std must be finite and >= 0, got {noise_std}")));
    }
    let templates = synth_templates(num_classes, image_size, seed)?;
    let numel = CIFAR_CHANNELS * image_size * image_size;
    let mut rng = derive_rng(seed, &[stream::SYNTH_NOISE]);
    let mut images = Vec::with_capacity(num_classes * per_class * numel);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            for &t in template {
                let z: f64 = rng.sample(StandardNormal);
                let v = f64::from(t) + z * noise_std;
                images.push(v.clamp(0.0, 1.0) as f32);
            }
            labels.push(class as u32);
        }
    }
    Ok(Dataset {
        images,
        labels,
        num_classes,
        channels: CIFAR_CHANNELS,
        height: image_size,
        width: image_size,
        norm: None,
    })
}

/// Splits class-major: the first `train_per_class` samples of each class go
/// to the first dataset, the rest to the second.
pub fn split_per_class(ds: &Dataset, train_per_class: usize) -> Result<(Dataset, Dataset)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &label) in ds.labels.iter().enumerate() {
        let c = label as usize;
        if c >= ds.num_classes {
            return Err(Error::Format(format!(
                "label {label} out of range for {} classes",
                ds.num_classes
            )));
        }
        by_class[c].push(i);
    }
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < train_per_class {
            return Err(Error::Config(format!(
                "class {c} has {} samples, fewer than train_per_class {train_per_class}",
                idx.len()
            )));
        }
    }
    let gather = |take_train: bool| -> Dataset {
        let n = ds.image_numel();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for idx in &by_class {
            let slice = if take_train { &idx[..train_per_class] } else { &idx[train_per_class..] };
            for &i in slice {
                images.extend_from_slice(&ds.images[i * n..(i + 1) * n]);
                labels.push(ds.labels[i]);
            }
        }
        Dataset { images, labels, norm: ds.norm.clone(), ..*ds }
    };
    Ok((gather(true), gather(false)))
}

pub fn hflip(img: &[f32], channels: usize, height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        for y in 0..height {
            let row = (c * height + y) * width;
            for x in 0..width {
                out[row + x] = img[row + width - 1 - x];
            }
        }
    }
    out
}

/// Index into [0, n) reflected without repeating the border sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

pub(crate) fn crop_reflect(
    img: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    dy: usize,
    dx: usize,
) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        for y in 0..height {
            let sy = reflect(y as isize + dy as isize - CROP_PAD as isize, height);
            for x in 0..width {
                let sx = reflect(x as isize + dx as isize - CROP_PAD as isize, width);
                out[(c * height + y) * width + x] = img[(c * height + sy) * width + sx];
            }
        }
    }
    out
}

/// Training augmentation: a coin flip for horizontal mirroring, then a
/// random crop from the reflect-padded image. Draw order is fixed (flip,
/// dy, dx) so a shared stream stays reproducible. Eval mode copies the
/// input and consumes no randomness.
pub fn augment(
    img: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
    mode: Mode,
) -> Result<Vec<f32>> {
    if img.len() != channels * height * width {
        return Err(Error::Dim(format!(
            "image has {} values, expected {}x{}x{}",
            img.len(),
            channels,
            height,
            width
        )));
    }
    if mode == Mode::Eval {
        return Ok(img.to_vec());
    }
    if height <= CROP_PAD || width <= CROP_PAD {
        return Err(Error::Config(format!(
            "crop padding {CROP_PAD} needs images larger than {CROP_PAD}x{CROP_PAD}, got {height}x{width}"
        )));
    }
    let flip = rng.random_bool(0.5);
    let dy = rng.random_range(0..=2 * CROP_PAD);
    let dx = rng.random_range(0..=2 * CROP_PAD);
    let base = if flip { hflip(img, channels, height, width) } else { img.to_vec() };
    Ok(crop_reflect(&base, channels, height, width, dy, dx))
}

/// Per-channel mean and population standard deviation over every pixel.
pub fn compute_norm_stats(ds: &Dataset) -> NormStats {
    let plane = ds.height * ds.width;
    let count = (ds.num_samples() * plane) as f64;
    let mut mean = vec![0.0f64; ds.channels];
    let mut sq = vec![0.0f64; ds.channels];
    for i in 0..ds.num_samples() {
        let img = ds.image(i);
        for c in 0..ds.channels {
            for &v in &img[c * plane..(c + 1) * plane] {
                let v = f64::from(v);
                mean[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let mut stats = NormStats { mean: Vec::new(), std: Vec::new() };
    for c in 0..ds.channels {
        let m = mean[c] / count;
        let var = (sq[c] / count - m * m).max(0.0);
        stats.mean.push(m as f32);
        stats.std.push(var.sqrt() as f32);
    }
    stats
}

/// Normalizes in place as (v - mean) / max(std, 1e-6) and records the
/// stats on the dataset.
pub fn apply_norm(ds: &mut Dataset, stats: &NormStats) -> Result<()> {
    if stats.mean.len() != ds.channels || stats.std.len() != ds.channels {
        return Err(Error::Dim(format!(
            "norm stats cover {} channels, dataset has {}",
            stats.mean.len(),
            ds.channels
        )));
    }
    let plane = ds.height * ds.width;
    let numel = ds.image_numel();
    for i in 0..ds.num_samples() {
        for c in 0..ds.channels {
            let mean = stats.mean[c];
            let std = stats.std[c].max(1e-6);
            let start = i * numel + c * plane;
            for v in &mut ds.images[start..start + plane] {
                *v = (*v - mean) / std;
            }
        }
    }
    ds.norm = Some(stats.clone());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn byte_dataset(seed: u64, n: usize) -> Dataset {
        let mut rng = derive_rng(seed, &[99]);
        let numel = 3 * 32 * 32;
        let images: Vec<f32> =
            (0..n * numel).map(|_| rng.random_range(0..=255u32) as f32 / 255.0).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..10)).collect();
        Dataset {
            images,
            labels,
            num_classes: 10,
            channels: 3,
            height: 32,
            width: 32,
            norm: None,
        }
    }

    #[test]
    fn cifar_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let ds = byte_dataset(1, 7);
        write_cifar_binary(&path, &ds).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 7 * 3073);
        let back = load_cifar_binary(&[&path]).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.images, ds.images);

        let two = load_cifar_binary(&[&path, &path]).unwrap();
        assert_eq!(two.num_samples(), 14);
        assert_eq!(&two.labels[7..], &ds.labels[..]);
    }

    #[test]
    fn malformed_cifar_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();

        let truncated = dir.path().join("short.bin");
        std::fs::write(&truncated, vec![0u8; 3072]).unwrap();
        let err = load_cifar_binary(&[&truncated]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("byte offset 0"), "{err}");

        let second = dir.path().join("second.bin");
        std::fs::write(&second, vec![0u8; 3073 + 10]).unwrap();
        let err = load_cifar_binary(&[&second]).unwrap_err();
        assert!(err.to_string().contains("byte offset 3073"), "{err}");

        let badlabel = dir.path().join("badlabel.bin");
        let mut bytes = vec![0u8; 3073];
        bytes[0] = 10;
        std::fs::write(&badlabel, bytes).unwrap();
        let err = load_cifar_binary(&[&badlabel]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("label 10"), "{err}");

        let missing = dir.path().join("missing.bin");
        assert!(matches!(load_cifar_binary(&[&missing]).unwrap_err(), Error::Io(_)));
    }

    #[test]
    fn synth_is_deterministic_and_class_major() {
        let a = synth_dataset(4, 3, 8, 0.05, 5).unwrap();
        let b = synth_dataset(4, 3, 8, 0.05, 5).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let c = synth_dataset(4, 3, 8, 0.05, 6).unwrap();
        assert_ne!(a.images, c.images);

        // Noise comes from its own stream: templates match across noise levels.
        let clean = synth_dataset(4, 1, 8, 0.0, 5).unwrap();
        let templates = synth_templates(4, 8, 5).unwrap();
        assert_eq!(clean.images, templates.concat());
    }

    #[test]
    fn nearest_template_recovers_labels() {
        let ds = synth_dataset(10, 20, 32, 0.05, 3).unwrap();
        let templates = synth_templates(10, 32, 3).unwrap();
        let mut correct = 0;
        for i in 0..ds.num_samples() {
            let img = ds.image(i);
            let (best, _) = templates
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let d2: f64 = t
                        .iter()
                        .zip(img)
                        .map(|(&a, &b)| {
                            let d = f64::from(a) - f64::from(b);
                            d * d
                        })
                        .sum();
                    (k, d2)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            if best as u32 == ds.label(i) {
                correct += 1;
            }
        }
        let acc = 100.0 * correct as f64 / ds.num_samples() as f64;
        assert!(acc >= 99.0, "nearest-template accuracy {acc}");
    }

    #[test]
    fn split_keeps_counts_per_class() {
        let ds = synth_dataset(3, 5, 8, 0.02, 9).unwrap();
        let (train, val) = split_per_class(&ds, 4).unwrap();
        assert_eq!(train.num_samples(), 12);
        assert_eq!(val.num_samples(), 3);
        assert_eq!(val.labels, vec![0, 1, 2]);
        for c in 0..3u32 {
            assert_eq!(train.labels.iter().filter(|&&l| l == c).count(), 4);
        }
        assert!(split_per_class(&ds, 6).is_err());
    }

    #[test]
    fn hflip_is_an_involution() {
        let ds = byte_dataset(2, 1);
        let img = ds.image(0);
        let flipped = hflip(img, 3, 32, 32);
        assert_ne!(img, &flipped[..]);
        assert_eq!(img, &hflip(&flipped, 3, 32, 32)[..]);
    }

    #[test]
    fn crop_reflects_without_repeating_the_border() {
        // 1x5x5 ramp, top-left crop (dy = dx = 0): source index -4 + i
        // reflects as 4, 3, 2, 1, 0.
        let img: Vec<f32> = (0..25).map(|i| i as f32).collect();
        let out = crop_reflect(&img, 1, 5, 5, 0, 0);
        let expect_axis = [4usize, 3, 2, 1, 0];
        for (y, &sy) in expect_axis.iter().enumerate() {
            for (x, &sx) in expect_axis.iter().enumerate() {
                assert_eq!(out[y * 5 + x], (sy * 5 + sx) as f32);
            }
        }
        // Centered crop is the identity.
        assert_eq!(crop_reflect(&img, 1, 5, 5, CROP_PAD, CROP_PAD), img);
    }

    #[test]
    fn augment_contract() {
        let ds = byte_dataset(4, 1);
        let img = ds.image(0);

        let mut rng = derive_rng(0, &[stream::AUGMENT, 0]);
        let before = rng.clone();
        let eval = augment(img, 3, 32, 32, &mut rng, Mode::Eval).unwrap();
        assert_eq!(eval, img);
        // Eval consumed nothing: the next draws match a pristine clone.
        let mut probe = before.clone();
        assert_eq!(rng.random::<u64>(), probe.random::<u64>());

        let mut r1 = derive_rng(0, &[stream::AUGMENT, 1]);
        let mut r2 = derive_rng(0, &[stream::AUGMENT, 1]);
        let a = augment(img, 3, 32, 32, &mut r1, Mode::Train).unwrap();
        let b = augment(img, 3, 32, 32, &mut r2, Mode::Train).unwrap();
        assert_eq!(a, b);

        let tiny = vec![0.0f32; 3 * 4 * 4];
        let mut r3 = ChaCha8Rng::seed_from_u64(1);
        assert!(augment(&tiny, 3, 4, 4, &mut r3, Mode::Train).is_err());
        assert!(augment(&tiny, 3, 32, 32, &mut r3, Mode::Train).is_err());
    }

    #[test]
    fn normalization_centers_each_channel() {
        let mut ds = byte_dataset(6, 20);
        let stats = compute_norm_stats(&ds);
        apply_norm(&mut ds, &stats).unwrap();
        let renorm = compute_norm_stats(&ds);
        for c in 0..3 {
            assert!(renorm.mean[c].abs() < 1e-4, "mean[{c}] = {}", renorm.mean[c]);
            assert!((renorm.std[c] - 1.0).abs() < 1e-3, "std[{c}] = {}", renorm.std[c]);
        }
        assert!(ds.norm.is_some());

        let bad = NormStats { mean: vec![0.0], std: vec![1.0] };
        assert!(apply_norm(&mut ds, &bad).is_err());
    }
}
