//! Model description and the ViT forward pass.

pub mod checkpoint;
pub mod params;
pub mod vit;

pub use params::{AppliedTransform, ParamSet};
pub use vit::{bind_params, forward, forward_graph, patchify, Binding, ForwardOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MLP capacity strategy. The three Table-style rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MLPVariant {
    /// Full-width, per-block MLPs.
    Baseline,
    /// Adjacent blocks share one MLP parameter set: blocks
    /// `g*group_size .. (g+1)*group_size` all read storage `g`.
    Grouped { group_size: usize },
    /// Per-block MLPs at `width_ratio * mlp_hidden` width, sliced from the
    /// full-width initialization.
    Shallow { width_ratio: f64 },
}

impl MLPVariant {
    pub fn name(&self) -> &'static str {
        match self {
            MLPVariant::Baseline => "Baseline",
            MLPVariant::Grouped { .. } => "GroupedMLP",
            MLPVariant::Shallow { .. } => "ShallowMLP",
        }
    }
}

/// Architectural description, including the capacity strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// Baseline MLP width; the shallow variant derives its width from this.
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub drop_path_rate: f64,
    pub variant: MLPVariant,
}

impl ModelConfig {
    /// Patch count, excluding the class token.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    /// Flattened patch length fed to the embedding.
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    /// MLP hidden width actually instantiated per block.
    pub fn effective_hidden(&self) -> usize {
        match self.variant {
            MLPVariant::Shallow { width_ratio } => {
                (width_ratio * self.mlp_hidden as f64).round() as usize
            }
            _ => self.mlp_hidden,
        }
    }

    /// Distinct MLP parameter storages after the variant transform.
    pub fn unique_mlp_blocks(&self) -> usize {
        match self.variant {
            MLPVariant::Grouped { group_size } => self.depth / group_size,
            _ => self.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 || self.mlp_hidden == 0 || self.num_classes == 0 || self.in_channels == 0
        {
            return fail("depth, mlp_hidden, num_classes, in_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return fail(format!("drop_path_rate {} must lie in [0, 1)", self.drop_path_rate));
        }
        match self.variant {
            MLPVariant::Baseline => {}
            MLPVariant::Grouped { group_size } => {
                if group_size == 0 || self.depth % group_size != 0 {
                    return fail(format!(
                        "depth {} not divisible by group_size {group_size}",
                        self.depth
                    ));
                }
            }
            MLPVariant::Shallow { width_ratio } => {
                if !(width_ratio > 0.0 && width_ratio <= 1.0) {
                    return fail(format!("width_ratio {width_ratio} must lie in (0, 1]"));
                }
                let w = width_ratio * self.mlp_hidden as f64;
                if (w - w.round()).abs() > 1e-9 || w.round() < 1.0 {
                    return fail(format!(
                        "width_ratio {width_ratio} * mlp_hidden {} is not a positive integer",
                        self.mlp_hidden
                    ));
                }
            }
        }
        Ok(())
    }

    /// Same architecture with a different capacity strategy.
    pub fn with_variant(&self, variant: MLPVariant) -> ModelConfig {
        ModelConfig { variant, ..self.clone() }
    }

    /// The reference full-size configuration: 224px images, 16px patches,
    /// dim 768, depth 12, 12 heads, hidden 3072, 1000 classes.
    pub fn base_16(variant: MLPVariant) -> ModelConfig {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_hidden: 3072,
            num_classes: 1000,
            drop_path_rate: 0.1,
            variant,
        }
    }

    /// Desk-scale configuration used by the smoke training run.
    pub fn tiny(variant: MLPVariant) -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_hidden: 256,
            num_classes: 10,
            drop_path_rate: 0.1,
            variant,
        }
    }
}

/// Forward-pass mode. Train enables drop-path; eval consumes no RNG.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// A batch of images with either hard or mixed labels.
///
/// `images` is `[B, C, H, W]` row-major. Mixed labels carry the pair and
/// the convex weight of the first: loss = lam*CE(a) + (1-lam)*CE(b).
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<f32>,
    pub batch_size: usize,
    pub label_a: Vec<u32>,
    pub label_b: Vec<u32>,
    pub lam: Vec<f64>,
}

impl Batch {
    /// Batch with hard labels (a == b, lam = 1).
    pub fn hard(images: Vec<f32>, labels: Vec<u32>) -> Batch {
        let b = labels.len();
        Batch { images, batch_size: b, label_a: labels.clone(), label_b: labels, lam: vec![1.0; b] }
    }
}
