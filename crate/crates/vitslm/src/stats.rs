//! Closed-form parameter and MAC accounting, efficiency ratios, memory
//! estimation, and forward-throughput measurement.
//!
//! Counts are exact integer arithmetic over the canonical tensor
//! enumeration, so they are checkable against a materialized `ParamSet`
//! walk. MAC counts are per image (batch 1) and reported in units of
//! multiply-accumulates; G-scale figures divide by 1e9.

use std::time::Instant;

use rand::RngExt;

use crate::error::{Error, Result};
use crate::model::params::{is_mlp_path, param_paths, ParamSet};
use crate::model::vit::forward;
use crate::model::{Batch, MLPVariant, Mode, ModelConfig};
use crate::rng::{derive_rng, stream};

/// One logical tensor in the accounting breakdown. `owner` names the
/// storage a shared tensor resolves to; `None` for self-owned tensors.
#[derive(Clone, Debug)]
pub struct TensorCount {
    pub path: String,
    pub shape: Vec<usize>,
    pub numel: u64,
    pub owner: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ModelStats {
    /// Path-resolved count: every logical read counted, shared storage
    /// counted once per reader.
    pub total_params: u64,
    /// Distinct storage count, which is what a checkpoint holds. This is the
    /// headline "params" figure for the capacity comparisons.
    pub unique_params: u64,
    /// Unique parameters inside MLP storages.
    pub mlp_params: u64,
    pub unique_mlp_blocks: u64,
    /// Dense-convention multiply-accumulates per image, in units of 1e9.
    pub gmacs: f64,
    pub expansion_ratio: f64,
    pub breakdown: Vec<TensorCount>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    /// Patch embed, qkv, attention output projection, MLP, head. Excludes
    /// the score (QKᵀ) and value-aggregation matmuls. The default: this is
    /// the convention the reference capacity tables follow.
    DenseOnly,
    /// DenseOnly plus the two attention matmuls (2·T²·d per block).
    Full,
}

/// Per-image multiply-accumulate count.
pub fn count_macs(cfg: &ModelConfig, convention: Convention) -> Result<u64> {
    cfg.validate()?;
    let n = cfg.num_patches() as u64;
    let t = cfg.seq_len() as u64;
    let d = cfg.embed_dim as u64;
    let h = cfg.effective_hidden() as u64;
    let l = cfg.depth as u64;
    let pdim = cfg.patch_dim() as u64;
    let classes = cfg.num_classes as u64;

    let patch_embed = n * pdim * d;
    let qkv = t * d * 3 * d;
    let proj = t * d * d;
    let mlp = 2 * t * d * h;
    let head = classes * d;
    let mut macs = patch_embed + l * (qkv + proj + mlp) + head;
    if convention == Convention::Full {
        macs += l * 2 * t * t * d;
    }
    Ok(macs)
}

/// Closed-form per-tensor enumeration; no parameters are materialized.
pub fn count_params(cfg: &ModelConfig) -> Result<ModelStats> {
    cfg.validate()?;
    let h = cfg.effective_hidden();
    let d = cfg.embed_dim;
    let group_size = match cfg.variant {
        MLPVariant::Grouped { group_size } => group_size,
        _ => 1,
    };

    let mut breakdown = Vec::new();
    let mut total = 0u64;
    let mut unique = 0u64;
    let mut mlp_unique = 0u64;
    for (path, full_shape) in param_paths(cfg) {
        let mut shape = full_shape;
        let mut owner = None;
        if is_mlp_path(&path) {
            if path.ends_with("fc1.weight") {
                shape = vec![h, d];
            } else if path.ends_with("fc1.bias") {
                shape = vec![h];
            } else if path.ends_with("fc2.weight") {
                shape = vec![d, h];
            }
            let block: usize = path
                .strip_prefix("blocks.")
                .and_then(|r| r.split('.').next())
                .and_then(|b| b.parse().ok())
                .expect("MLP paths are block-scoped");
            let lead = block - block % group_size;
            if lead != block {
                owner = Some(path.replacen(&format!("blocks.{block}."), &format!("blocks.{lead}."), 1));
            }
        }
        let numel: u64 = shape.iter().product::<usize>() as u64;
        total += numel;
        if owner.is_none() {
            unique += numel;
            if is_mlp_path(&path) {
                mlp_unique += numel;
            }
        }
        breakdown.push(TensorCount { path, shape, numel, owner });
    }

    Ok(ModelStats {
        total_params: total,
        unique_params: unique,
        mlp_params: mlp_unique,
        unique_mlp_blocks: cfg.unique_mlp_blocks() as u64,
        gmacs: count_macs(cfg, Convention::DenseOnly)? as f64 / 1e9,
        expansion_ratio: h as f64 / d as f64,
        breakdown,
    })
}

#[derive(Clone, Debug)]
pub struct EfficiencyReport {
    /// Top-1 percentage points per million stored parameters.
    pub acc_per_mparam: f64,
    /// Top-1 percentage points per G multiply-accumulates.
    pub acc_per_gmac: f64,
    /// Forward-throughput ratio against a baseline run, when measured.
    pub throughput_ratio: Option<f64>,
}

pub fn efficiency_ratios(stats: &ModelStats, top1: f64) -> Result<EfficiencyReport> {
    if !(top1 > 0.0 && top1 <= 100.0) {
        return Err(Error::Config(format!("top-1 accuracy {top1} outside (0, 100]")));
    }
    Ok(EfficiencyReport {
        acc_per_mparam: top1 / (stats.unique_params as f64 / 1e6),
        acc_per_gmac: top1 / stats.gmacs,
        throughput_ratio: None,
    })
}

#[derive(Clone, Debug)]
pub struct MemoryEstimate {
    pub param_bytes: u64,
    /// AdamW first and second moments: two f32 buffers per storage.
    pub optimizer_bytes: u64,
    pub ema_bytes: u64,
    /// Analytic tape estimate: every recorded intermediate plus one
    /// gradient buffer each. See `estimate_memory`.
    pub activation_bytes: u64,
    pub total_bytes: u64,
}

/// Byte estimate for one training process at f32.
///
/// The activation term models the recorded tape of one step: per block
/// roughly 16 `[B,T,d]` intermediates, two `[B,H,T,T]` score tensors, and
/// two `[B,T,h]` MLP tensors, doubled for gradient buffers. It is an
/// estimate, not a measurement.
pub fn estimate_memory(cfg: &ModelConfig, batch: usize, ema: bool) -> Result<MemoryEstimate> {
    let stats = count_params(cfg)?;
    let param_bytes = stats.unique_params * 4;
    let optimizer_bytes = 2 * param_bytes;
    let ema_bytes = if ema { param_bytes } else { 0 };

    let n = cfg.num_patches() as u64;
    let t = cfg.seq_len() as u64;
    let d = cfg.embed_dim as u64;
    let h = cfg.effective_hidden() as u64;
    let heads = cfg.num_heads as u64;
    let l = cfg.depth as u64;
    let per_sample = n * cfg.patch_dim() as u64
        + n * d
        + 2 * t * d
        + l * (16 * t * d + 2 * heads * t * t + 2 * t * h)
        + t * d
        + d
        + cfg.num_classes as u64;
    let activation_bytes = (batch as u64) * per_sample * 4 * 2;

    Ok(MemoryEstimate {
        param_bytes,
        optimizer_bytes,
        ema_bytes,
        activation_bytes,
        total_bytes: param_bytes + optimizer_bytes + ema_bytes + activation_bytes,
    })
}

#[derive(Clone, Debug)]
pub struct ThroughputReport {
    pub images_per_sec: f64,
    pub std_images_per_sec: f64,
    pub batch_size: usize,
    pub timed_iters: usize,
}

/// Forward-only wall-clock rate. Numbers are machine-specific; only
/// same-host ratios are meaningful, and stable numbers need an otherwise
/// idle machine.
pub fn measure_throughput(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    batch_size: usize,
    warmup_iters: usize,
    timed_iters: usize,
) -> Result<ThroughputReport> {
    if timed_iters < 3 {
        return Err(Error::Measurement(format!(
            "{timed_iters} timed iterations cannot support a mean/std estimate (need >= 3)"
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("throughput batch must be positive".into()));
    }
    let mut rng = derive_rng(0, &[stream::BENCH_DATA]);
    let numel = batch_size * cfg.in_channels * cfg.image_size * cfg.image_size;
    let images: Vec<f32> = (0..numel).map(|_| rng.random::<f32>()).collect();
    let batch = Batch::hard(images, vec![0; batch_size]);

    let mut rates = Vec::with_capacity(timed_iters);
    for i in 0..warmup_iters + timed_iters {
        let t0 = Instant::now();
        let logits = forward(params, cfg, &batch, Mode::Eval, None)?;
        let dt = t0.elapsed().as_secs_f64();
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite logits during benchmark".into()));
        }
        if i >= warmup_iters {
            rates.push(batch_size as f64 / dt);
        }
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(ThroughputReport {
        images_per_sec: mean,
        std_images_per_sec: var.sqrt(),
        batch_size,
        timed_iters,
    })
}

/// `86,567,656` → `86.6M`; below a million, comma-grouped digits.
pub fn format_params(n: u64) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else {
        let digits = n.to_string();
        let mut out = String::new();
        for (i, ch) in digits.chars().enumerate() {
            if i > 0 && (digits.len() - i) % 3 == 0 {
                out.push(',');
            }
            out.push(ch);
        }
        out
    }
}

fn format_expansion(r: f64) -> String {
    if (r - r.round()).abs() < 1e-9 {
        format!("{}x", r.round() as i64)
    } else {
        format!("{r:.1}x")
    }
}

/// Aligned human-readable comparison table (params, MLP params, unique
/// MLP count, GMACs, expansion), one row per labeled stats entry.
pub fn format_count_table(rows: &[(&str, &ModelStats)]) -> String {
    let mut cells: Vec<[String; 6]> = vec![[
        "Model".into(),
        "Params".into(),
        "MLP".into(),
        "Unique".into(),
        "GMACs".into(),
        "Expansion".into(),
    ]];
    for (name, s) in rows {
        cells.push([
            name.to_string(),
            format_params(s.unique_params),
            format_params(s.mlp_params),
            s.unique_mlp_blocks.to_string(),
            format!("{:.1}", s.gmacs),
            format_expansion(s.expansion_ratio),
        ]);
    }
    let widths: Vec<usize> = (0..6)
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for row in &cells {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            line.push_str(cell);
            for _ in cell.len()..widths[c] {
                line.push(' ');
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Machine-readable form of the same table.
pub fn format_count_csv(rows: &[(&str, &ModelStats)]) -> String {
    let mut out = String::from("model,params,unique_mlp,mlp_params,gmacs,expansion\n");
    for (name, s) in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.2}\n",
            name, s.unique_params, s.unique_mlp_blocks, s.mlp_params, s.gmacs, s.expansion_ratio
        ));
    }
    out
}
