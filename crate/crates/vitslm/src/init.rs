//! Base initialization and the two capacity transforms.
//!
//! Every variant starts from the identical full-width draw: weights from a
//! truncated normal (std 0.02, hard rejection outside 2 sigma), biases and
//! the classifier head zero, norm scales one. The grouped transform then
//! aliases adjacent blocks onto one storage and rescales it; the shallow
//! transform slices each block to a width prefix. Because each tensor has
//! its own derived RNG stream, the cross-variant identities (prefix
//! equality, exact 1/sqrt(2) scaling) hold elementwise.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::params::{param_paths, AppliedTransform, ParamSet, MLP_TENSORS};
use crate::model::ModelConfig;
use crate::rng::{derive_rng, stream};
use crate::tensor::Elem;

/// Initialization policy. Defaults follow the common ViT recipe.
#[derive(Clone, Copy, Debug)]
pub struct InitSpec {
    /// Std of the truncated normal for weight matrices.
    pub trunc_normal_std: f64,
    /// Fill value for biases (and, by policy, the classifier head).
    pub bias_fill: f64,
    /// Std for the class token and positional embedding.
    pub embed_std: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec { trunc_normal_std: 0.02, bias_fill: 0.0, embed_std: 0.02 }
    }
}

/// Scaling factor for shared storages: `1/sqrt(group_size)`.
///
/// The pair case returns the correctly rounded f64 constant for 1/sqrt(2);
/// `(2.0).sqrt().recip()` lands one ulp low.
pub fn shared_scale_factor(group_size: usize) -> f64 {
    if group_size == 2 {
        std::f64::consts::FRAC_1_SQRT_2
    } else {
        ((group_size as f64).sqrt()).recip()
    }
}

/// One truncated-normal draw: rejection-sample N(0,1) until |z| <= 2,
/// then scale. Rejection (not clamping) keeps the density shape.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

enum Fill {
    TruncNormal(f64),
    Constant(f64),
}

fn fill_for(path: &str, spec: &InitSpec) -> Fill {
    if path.ends_with("norm1.weight") || path.ends_with("norm2.weight") || path == "norm.weight" {
        Fill::Constant(1.0)
    } else if path.ends_with(".bias") || path.starts_with("head.") {
        Fill::Constant(spec.bias_fill)
    } else if path == "cls_token" || path == "pos_embed" {
        Fill::TruncNormal(spec.embed_std)
    } else {
        Fill::TruncNormal(spec.trunc_normal_std)
    }
}

/// Full-width, unshared parameter draw. Deterministic in `(config, seed)`;
/// each tensor consumes its own derived stream keyed by its canonical
/// ordinal, so later variants see the same values regardless of what other
/// tensors draw.
pub fn base_init<T: Elem>(cfg: &ModelConfig, seed: u64, spec: &InitSpec) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut params = ParamSet::new(cfg.depth);
    for (ordinal, (path, shape)) in param_paths(cfg).into_iter().enumerate() {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match fill_for(&path, spec) {
            Fill::Constant(c) => vec![T::from_f64(c); numel],
            Fill::TruncNormal(std) => {
                let mut rng = derive_rng(seed, &[stream::INIT, ordinal as u64]);
                (0..numel).map(|_| T::from_f64(trunc_normal(&mut rng, std))).collect()
            }
        };
        params.insert(&path, shape, data)?;
    }
    Ok(params)
}

/// Collapses each group of `group_size` adjacent blocks onto the first
/// member's MLP storage and rescales that storage: fc1.weight, fc1.bias
/// and fc2.weight are multiplied by `1/sqrt(group_size)`; fc2.bias is left
/// untouched. Requires a full-width, untransformed set.
pub fn apply_grouped_sharing<T: Elem>(params: &mut ParamSet<T>, group_size: usize) -> Result<()> {
    if params.applied != AppliedTransform::None {
        return Err(Error::Config(format!(
            "grouped sharing requires an untransformed parameter set, found {:?}",
            params.applied
        )));
    }
    let depth = params.mlp_sharing.len();
    if group_size == 0 || depth % group_size != 0 {
        return Err(Error::Config(format!(
            "depth {depth} not divisible by group_size {group_size}"
        )));
    }
    let factor = T::from_f64(shared_scale_factor(group_size));
    for g in 0..depth / group_size {
        let lead = g * group_size;
        for tensor in MLP_TENSORS {
            let lead_path = format!("blocks.{lead}.{tensor}");
            let sidx = params.storage_index_of(&lead_path)?;
            if tensor != "mlp.fc2.bias" {
                for v in params.storages_mut()[sidx].data.iter_mut() {
                    *v = *v * factor;
                }
            }
            for member in lead + 1..lead + group_size {
                params.repoint(&format!("blocks.{member}.{tensor}"), sidx)?;
            }
        }
        for member in lead..lead + group_size {
            params.mlp_sharing[member] = g;
        }
    }
    params.compact();
    params.applied = AppliedTransform::Grouped { group_size };
    Ok(())
}

/// Slices every block's MLP to the leading `width_ratio` fraction of the
/// full-width draw: first rows of fc1.weight, matching prefix of fc1.bias,
/// first columns of fc2.weight. fc2.bias keeps its full (output) width.
/// Requires a full-width, untransformed set.
pub fn slice_shallow<T: Elem>(params: &mut ParamSet<T>, width_ratio: f64) -> Result<()> {
    if params.applied != AppliedTransform::None {
        return Err(Error::Config(format!(
            "width slicing requires an untransformed parameter set, found {:?}",
            params.applied
        )));
    }
    if !(width_ratio > 0.0 && width_ratio <= 1.0) {
        return Err(Error::Config(format!("width_ratio {width_ratio} must lie in (0, 1]")));
    }
    let depth = params.mlp_sharing.len();
    for b in 0..depth {
        let fc1w = params.storage_index_of(&format!("blocks.{b}.mlp.fc1.weight"))?;
        let (h, d) = {
            let s = &params.storages()[fc1w];
            (s.shape[0], s.shape[1])
        };
        let hp_f = width_ratio * h as f64;
        if (hp_f - hp_f.round()).abs() > 1e-9 || hp_f.round() < 1.0 {
            return Err(Error::Config(format!(
                "width_ratio {width_ratio} * hidden {h} is not a positive integer"
            )));
        }
        let hp = hp_f.round() as usize;

        // fc1: rows are contiguous, so the prefix is a truncation.
        let s = &mut params.storages_mut()[fc1w];
        s.data.truncate(hp * d);
        s.shape = vec![hp, d];

        let fc1b = params.storage_index_of(&format!("blocks.{b}.mlp.fc1.bias"))?;
        let s = &mut params.storages_mut()[fc1b];
        s.data.truncate(hp);
        s.shape = vec![hp];

        // fc2: keep the first hp columns of each of the d rows.
        let fc2w = params.storage_index_of(&format!("blocks.{b}.mlp.fc2.weight"))?;
        let s = &mut params.storages_mut()[fc2w];
        let mut sliced = Vec::with_capacity(d * hp);
        for r in 0..d {
            sliced.extend_from_slice(&s.data[r * h..r * h + hp]);
        }
        s.data = sliced;
        s.shape = vec![d, hp];
    }
    params.applied = AppliedTransform::Shallow { width_ratio };
    Ok(())
}
