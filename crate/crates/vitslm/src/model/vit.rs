//! ViT forward pass: patch embedding, class token, learned positional
//! embedding, pre-norm blocks (attention + variant MLP, both residual and
//! drop-path wrapped), final norm, class-token head.
//!
//! The pass is expressed once over graph ids; parameter aliasing is carried
//! by the [`Binding`], which maps every logical path to the graph leaf of
//! its storage. Shared storages bind to one leaf, so their gradient
//! accumulation needs no extra machinery.

use std::collections::HashMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::{apply_grouped_sharing, base_init, slice_shallow, InitSpec};
use crate::model::params::ParamSet;
use crate::model::{Batch, MLPVariant, Mode, ModelConfig};
use crate::stats::{count_params, ModelStats};
use crate::tensor::{Elem, Graph, Id};

const LN_EPS: f64 = 1e-6;

/// Graph leaves for one parameter set: one leaf per unique storage,
/// path-addressable. `storage_leaves[i]` is the leaf of storage `i`.
pub struct Binding {
    pub by_path: HashMap<String, Id>,
    pub storage_leaves: Vec<Id>,
}

impl Binding {
    pub fn get(&self, path: &str) -> Result<Id> {
        self.by_path
            .get(path)
            .copied()
            .ok_or_else(|| Error::Config(format!("no bound parameter {path}")))
    }
}

/// Inserts every unique storage as one graph leaf and maps each logical
/// path onto its storage's leaf.
pub fn bind_params<T: Elem>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    trainable: bool,
) -> Result<Binding> {
    let mut storage_leaves = Vec::with_capacity(params.num_storages());
    for s in params.storages() {
        storage_leaves.push(g.leaf(&s.shape, s.data.clone(), trainable)?);
    }
    let mut by_path = HashMap::new();
    for (path, sidx) in params.paths() {
        by_path.insert(path.clone(), storage_leaves[*sidx]);
    }
    Ok(Binding { by_path, storage_leaves })
}

/// Flattens `[B, C, H, W]` images into `[B, N, C*p*p]` patch rows. Patches
/// are enumerated row-major over the grid; within a patch the layout is
/// channel-major `(c, dy, dx)`, matching a flattened conv kernel.
pub fn patchify<T: Elem>(
    images: &[T],
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Vec<T>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Dim(format!("patch {patch} does not tile {height}x{width}")));
    }
    if images.len() != batch * channels * height * width {
        return Err(Error::Dim(format!(
            "image buffer {} does not match [{batch},{channels},{height},{width}]",
            images.len()
        )));
    }
    let (gy, gx) = (height / patch, width / patch);
    let pdim = channels * patch * patch;
    let mut out = vec![T::zero(); batch * gy * gx * pdim];
    for bi in 0..batch {
        for py in 0..gy {
            for px in 0..gx {
                let pidx = py * gx + px;
                let dst_base = (bi * gy * gx + pidx) * pdim;
                for c in 0..channels {
                    for dy in 0..patch {
                        let src = ((bi * channels + c) * height + py * patch + dy) * width
                            + px * patch;
                        let dst = dst_base + (c * patch + dy) * patch;
                        out[dst..dst + patch]
                            .copy_from_slice(&images[src..src + patch]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-sample keep factors for one residual branch: 0 with probability
/// `rate`, else `1/(1-rate)`, so the expected output equals the input.
pub fn draw_keep_factors<T: Elem>(rng: &mut ChaCha8Rng, batch: usize, rate: f64) -> Vec<T> {
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    (0..batch)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep_scale })
        .collect()
}

/// Stochastic depth on a `[B, ...]` activation. Identity in eval mode and
/// at rate zero (consuming no randomness); in train mode each sample's
/// whole slab is kept with probability `1-rate` and rescaled.
pub fn drop_path<T: Elem>(
    g: &mut Graph<T>,
    x: Id,
    rate: f64,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Id> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("drop_path rate {rate} must lie in [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let batch = g.shape(x)[0];
    let rng =
        rng.ok_or_else(|| Error::Config("drop_path in train mode needs an RNG".into()))?;
    let factors = draw_keep_factors::<T>(rng, batch, rate);
    g.scale_rows(x, factors)
}

/// Multi-head self-attention with fused qkv projection (with bias),
/// per-head scaling `1/sqrt(d/heads)`, and output projection.
pub fn attention<T: Elem>(
    g: &mut Graph<T>,
    x: Id,
    qkv_w: Id,
    qkv_b: Id,
    proj_w: Id,
    proj_b: Id,
    heads: usize,
) -> Result<Id> {
    let d = *g.shape(x).last().unwrap();
    if d % heads != 0 {
        return Err(Error::Dim(format!("dim {d} not divisible by {heads} heads")));
    }
    let scale = T::from_f64(1.0 / ((d / heads) as f64).sqrt());
    let qkv = g.linear(x, qkv_w, qkv_b)?;
    let q = g.qkv_part(qkv, 0, heads)?;
    let k = g.qkv_part(qkv, 1, heads)?;
    let v = g.qkv_part(qkv, 2, heads)?;
    let s = g.attn_scores(q, k, scale)?;
    let a = g.softmax_last(s)?;
    let av = g.attn_apply(a, v)?;
    let m = g.merge_heads(av)?;
    g.linear(m, proj_w, proj_b)
}

/// Two-layer MLP applied tokenwise: `fc2 @ gelu(fc1 @ x + b1) + b2`.
pub fn mlp_forward<T: Elem>(
    g: &mut Graph<T>,
    x: Id,
    fc1: Id,
    b1: Id,
    fc2: Id,
    b2: Id,
) -> Result<Id> {
    let h = g.linear(x, fc1, b1)?;
    let a = g.gelu(h)?;
    g.linear(a, fc2, b2)
}

pub struct ForwardOutput {
    pub logits: Id,
    /// Residual stream after each block, for activation probes.
    pub block_outputs: Vec<Id>,
}

/// Runs the full forward pass over pre-bound parameters.
///
/// `patches` is the output of [`patchify`]. In train mode with a positive
/// drop-path rate an RNG must be supplied; the draw order is fixed
/// (per block: attention branch, then MLP branch). Eval consumes no RNG.
pub fn forward_graph<T: Elem>(
    g: &mut Graph<T>,
    binding: &Binding,
    cfg: &ModelConfig,
    patches: &[T],
    batch: usize,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOutput> {
    let (n, pdim) = (cfg.num_patches(), cfg.patch_dim());
    if patches.len() != batch * n * pdim {
        return Err(Error::Dim(format!(
            "patch buffer {} does not match [{batch},{n},{pdim}]",
            patches.len()
        )));
    }
    let eps = T::from_f64(LN_EPS);
    let rate = cfg.drop_path_rate;
    let p = |name: String| binding.get(&name);

    let raw = g.leaf(&[batch, n, pdim], patches.to_vec(), false)?;
    let emb = g.linear(raw, p("patch_embed.weight".into())?, p("patch_embed.bias".into())?)?;
    let tok = g.prepend_token(emb, p("cls_token".into())?)?;
    let mut x = g.add_pos(tok, p("pos_embed".into())?)?;

    let mut block_outputs = Vec::with_capacity(cfg.depth);
    for b in 0..cfg.depth {
        let n1 = g.layer_norm(
            x,
            p(format!("blocks.{b}.norm1.weight"))?,
            p(format!("blocks.{b}.norm1.bias"))?,
            eps,
        )?;
        let att = attention(
            g,
            n1,
            p(format!("blocks.{b}.attn.qkv.weight"))?,
            p(format!("blocks.{b}.attn.qkv.bias"))?,
            p(format!("blocks.{b}.attn.proj.weight"))?,
            p(format!("blocks.{b}.attn.proj.bias"))?,
            cfg.num_heads,
        )?;
        let att = drop_path(g, att, rate, mode, rng.as_deref_mut())?;
        x = g.add(x, att)?;

        let n2 = g.layer_norm(
            x,
            p(format!("blocks.{b}.norm2.weight"))?,
            p(format!("blocks.{b}.norm2.bias"))?,
            eps,
        )?;
        let mlp = mlp_forward(
            g,
            n2,
            p(format!("blocks.{b}.mlp.fc1.weight"))?,
            p(format!("blocks.{b}.mlp.fc1.bias"))?,
            p(format!("blocks.{b}.mlp.fc2.weight"))?,
            p(format!("blocks.{b}.mlp.fc2.bias"))?,
        )?;
        let mlp = drop_path(g, mlp, rate, mode, rng.as_deref_mut())?;
        x = g.add(x, mlp)?;
        block_outputs.push(x);
    }

    let xn = g.layer_norm(x, p("norm.weight".into())?, p("norm.bias".into())?, eps)?;
    let cls = g.select_token(xn, 0)?;
    let logits = g.linear(cls, p("head.weight".into())?, p("head.bias".into())?)?;
    Ok(ForwardOutput { logits, block_outputs })
}

/// Convenience single-call forward over a [`Batch`]; returns logit values
/// `[B, num_classes]`.
pub fn forward<T: Elem>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<T>> {
    let imgs: Vec<T> = batch.images.iter().map(|&v| T::from_f64(v as f64)).collect();
    let patches = patchify(
        &imgs,
        batch.batch_size,
        cfg.in_channels,
        cfg.image_size,
        cfg.image_size,
        cfg.patch_size,
    )?;
    let mut g: Graph<T> = Graph::new();
    let binding = bind_params(&mut g, params, false)?;
    let out = forward_graph(&mut g, &binding, cfg, &patches, batch.batch_size, mode, rng)?;
    Ok(g.value(out.logits).to_vec())
}

/// Draws base parameters, applies the variant transform, and returns the
/// set together with its closed-form accounting.
pub fn build_model<T: Elem>(cfg: &ModelConfig, seed: u64) -> Result<(ParamSet<T>, ModelStats)> {
    cfg.validate()?;
    let mut params = base_init(cfg, seed, &InitSpec::default())?;
    match cfg.variant {
        MLPVariant::Baseline => {}
        MLPVariant::Grouped { group_size } => apply_grouped_sharing(&mut params, group_size)?,
        MLPVariant::Shallow { width_ratio } => slice_shallow(&mut params, width_ratio)?,
    }
    let stats = count_params(cfg)?;
    Ok((params, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, stream};

    fn tiny_batch(cfg: &ModelConfig, b: usize, seed: u64) -> Batch {
        let mut rng = derive_rng(seed, &[stream::BENCH_DATA]);
        let n = b * cfg.in_channels * cfg.image_size * cfg.image_size;
        let images: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        Batch::hard(images, (0..b as u32).map(|i| i % cfg.num_classes as u32).collect())
    }

    #[test]
    fn logits_shape_and_eval_determinism() {
        let cfg = ModelConfig::tiny(MLPVariant::Baseline);
        let (params, _) = build_model::<f32>(&cfg, 42).unwrap();
        let batch = tiny_batch(&cfg, 2, 1);
        let a = forward(&params, &cfg, &batch, Mode::Eval, None).unwrap();
        assert_eq!(a.len(), 2 * 10);
        let b = forward(&params, &cfg, &batch, Mode::Eval, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patchify_layout() {
        // 1 image, 2 channels, 4x4, patch 2: patch (0,1) spans columns 2..4.
        let (c, h, w, p) = (2usize, 4usize, 4usize, 2usize);
        let images: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
        let out = patchify(&images, 1, c, h, w, p).unwrap();
        assert_eq!(out.len(), 4 * 8);
        // Patch index 1 = grid (0,1); channel 0 rows: [2,3], [6,7].
        let patch1 = &out[8..16];
        assert_eq!(&patch1[..4], &[2.0, 3.0, 6.0, 7.0]);
        // Channel 1 of the same patch: offsets +16.
        assert_eq!(&patch1[4..8], &[18.0, 19.0, 22.0, 23.0]);
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let d = 8usize;
        let heads = 2usize;
        let mut rng = derive_rng(3, &[stream::GRADCHECK]);
        let mut g: Graph<f64> = Graph::new();
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
        };
        let x = g.leaf(&[1, 1, d], draw(&mut rng, d), false).unwrap();
        let qkv_w = g.leaf(&[3 * d, d], draw(&mut rng, 3 * d * d), false).unwrap();
        let qkv_b = g.leaf(&[3 * d], draw(&mut rng, 3 * d), false).unwrap();
        let proj_w = g.leaf(&[d, d], draw(&mut rng, d * d), false).unwrap();
        let proj_b = g.leaf(&[d], draw(&mut rng, d), false).unwrap();
        let out = attention(&mut g, x, qkv_w, qkv_b, proj_w, proj_b, heads).unwrap();

        // With one token, softmax weight is 1: out = proj(v) + proj bias.
        let qkv = g.linear(x, qkv_w, qkv_b).unwrap();
        let v: Vec<f64> = g.value(qkv)[2 * d..3 * d].to_vec();
        let vleaf = g.leaf(&[1, d], v, false).unwrap();
        let want = g.linear(vleaf, proj_w, proj_b).unwrap();
        for (a, b) in g.value(out).iter().zip(g.value(want)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_token_permutation_equivariant() {
        let (t, d, heads) = (5usize, 8usize, 2usize);
        let mut rng = derive_rng(4, &[stream::GRADCHECK]);
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
        };
        let xv = draw(&mut rng, t * d);
        let wq = draw(&mut rng, 3 * d * d);
        let bq = draw(&mut rng, 3 * d);
        let wp = draw(&mut rng, d * d);
        let bp = draw(&mut rng, d);
        let perm = [2usize, 0, 4, 1, 3];

        let run = |x: Vec<f64>| -> Vec<f64> {
            let mut g: Graph<f64> = Graph::new();
            let xi = g.leaf(&[1, t, d], x, false).unwrap();
            let qkv_w = g.leaf(&[3 * d, d], wq.clone(), false).unwrap();
            let qkv_b = g.leaf(&[3 * d], bq.clone(), false).unwrap();
            let proj_w = g.leaf(&[d, d], wp.clone(), false).unwrap();
            let proj_b = g.leaf(&[d], bp.clone(), false).unwrap();
            let o = attention(&mut g, xi, qkv_w, qkv_b, proj_w, proj_b, heads).unwrap();
            g.value(o).to_vec()
        };

        let base = run(xv.clone());
        let mut permuted_x = vec![0.0; t * d];
        for (i, &pi) in perm.iter().enumerate() {
            permuted_x[i * d..(i + 1) * d].copy_from_slice(&xv[pi * d..(pi + 1) * d]);
        }
        let permuted_out = run(permuted_x);
        for (i, &pi) in perm.iter().enumerate() {
            for j in 0..d {
                assert!(
                    (permuted_out[i * d + j] - base[pi * d + j]).abs() < 1e-12,
                    "token {i} feature {j}"
                );
            }
        }
    }

    #[test]
    fn zero_qkv_attention_broadcasts_proj_bias() {
        let (t, d, heads) = (4usize, 8usize, 2usize);
        let mut rng = derive_rng(5, &[stream::GRADCHECK]);
        let mut g: Graph<f64> = Graph::new();
        let x = g
            .leaf(&[1, t, d], (0..t * d).map(|_| rng.random::<f64>()).collect(), false)
            .unwrap();
        let qkv_w = g.leaf(&[3 * d, d], vec![0.0; 3 * d * d], false).unwrap();
        let qkv_b = g.leaf(&[3 * d], vec![0.0; 3 * d], false).unwrap();
        let proj_w = g.leaf(&[d, d], (0..d * d).map(|_| rng.random::<f64>()).collect(), false).unwrap();
        let pb: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let proj_b = g.leaf(&[d], pb.clone(), false).unwrap();
        let out = attention(&mut g, x, qkv_w, qkv_b, proj_w, proj_b, heads).unwrap();
        for ti in 0..t {
            for j in 0..d {
                assert!((g.value(out)[ti * d + j] - pb[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mlp_zero_weights_pass_through_output_bias() {
        let (d, h) = (6usize, 12usize);
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[2, d], vec![0.37; 2 * d], false).unwrap();
        let fc1 = g.leaf(&[h, d], vec![0.0; h * d], false).unwrap();
        let b1 = g.leaf(&[h], vec![0.0; h], false).unwrap();
        let fc2 = g.leaf(&[d, h], vec![0.0; d * h], false).unwrap();
        let b2 = g.leaf(&[d], vec![0.25; d], false).unwrap();
        let out = mlp_forward(&mut g, x, fc1, b1, fc2, b2).unwrap();
        assert!(g.value(out).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        // Hidden widths of 2d and d are both legal.
        let fc1n = g.leaf(&[d, d], vec![0.0; d * d], false).unwrap();
        let b1n = g.leaf(&[d], vec![0.0; d], false).unwrap();
        let fc2n = g.leaf(&[d, d], vec![0.0; d * d], false).unwrap();
        assert!(mlp_forward(&mut g, x, fc1n, b1n, fc2n, b2).is_ok());
    }

    #[test]
    fn drop_path_contracts() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[4, 3], vec![1.0; 12], false).unwrap();
        // Identity cases return the same node untouched.
        assert_eq!(drop_path(&mut g, x, 0.0, Mode::Train, None).unwrap(), x);
        assert_eq!(drop_path(&mut g, x, 0.9, Mode::Eval, None).unwrap(), x);
        assert!(drop_path(&mut g, x, 1.0, Mode::Train, None).is_err());
        assert!(drop_path(&mut g, x, 0.1, Mode::Train, None).is_err());

        // Inverted scaling preserves the mean: 1e5 draws within 1%.
        let mut rng = derive_rng(9, &[stream::DROPPATH]);
        let n = 100_000;
        let factors = draw_keep_factors::<f64>(&mut rng, n, 0.1);
        let mean = factors.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean keep factor {mean}");
    }

    #[test]
    fn grouped_blocks_share_one_forward_storage() {
        let cfg = ModelConfig::tiny(MLPVariant::Grouped { group_size: 2 });
        let (params, _) = build_model::<f64>(&cfg, 21).unwrap();
        let mut perturbed = params.clone();
        let sidx = perturbed.storage_index_of("blocks.0.mlp.fc1.weight").unwrap();
        perturbed.storages_mut()[sidx].data[0] += 0.5;

        // Same token input through block 0's and block 1's MLP paths:
        // identical outputs (one storage), and the perturbation moves both.
        let d = cfg.embed_dim;
        let xv: Vec<f64> = (0..2 * d).map(|i| (i as f64 * 0.13).sin()).collect();
        let run = |ps: &ParamSet<f64>, b: usize| -> Vec<f64> {
            let mut g: Graph<f64> = Graph::new();
            let binding = bind_params(&mut g, ps, false).unwrap();
            let x = g.leaf(&[2, d], xv.clone(), false).unwrap();
            let out = mlp_forward(
                &mut g,
                x,
                binding.get(&format!("blocks.{b}.mlp.fc1.weight")).unwrap(),
                binding.get(&format!("blocks.{b}.mlp.fc1.bias")).unwrap(),
                binding.get(&format!("blocks.{b}.mlp.fc2.weight")).unwrap(),
                binding.get(&format!("blocks.{b}.mlp.fc2.bias")).unwrap(),
            )
            .unwrap();
            g.value(out).to_vec()
        };
        assert_eq!(run(&params, 0), run(&params, 1));
        assert_eq!(run(&perturbed, 0), run(&perturbed, 1));
        assert_ne!(run(&params, 0), run(&perturbed, 0));
        assert_ne!(run(&params, 1), run(&perturbed, 1));

        // And the perturbation reaches both blocks' residual streams in the
        // full forward pass.
        let batch = tiny_batch(&cfg, 2, 2);
        let imgs: Vec<f64> = batch.images.iter().map(|&v| v as f64).collect();
        let patches = patchify(&imgs, 2, 3, 32, 32, 4).unwrap();
        let probe = |ps: &ParamSet<f64>| -> Vec<Vec<f64>> {
            let mut g: Graph<f64> = Graph::new();
            let binding = bind_params(&mut g, ps, false).unwrap();
            let out = forward_graph(&mut g, &binding, &cfg, &patches, 2, Mode::Eval, None).unwrap();
            out.block_outputs.iter().map(|&id| g.value(id).to_vec()).collect()
        };
        let a = probe(&params);
        let b = probe(&perturbed);
        assert_ne!(a[0], b[0], "block 0 stream must move");
        assert_ne!(a[1], b[1], "block 1 stream must move");
    }
}
