//! Finite-difference verification of the backward pass, in 64-bit.
//!
//! Two layers: an op suite that checks every differentiable graph op on
//! small fixed shapes, and a whole-model check that compares analytic
//! parameter gradients against central differences, exhaustively for
//! tensors of at most 64 elements and on sampled coordinates otherwise.

use std::collections::HashSet;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::model::params::ParamSet;
use crate::model::vit::{bind_params, forward_graph, patchify};
use crate::model::{MLPVariant, Mode, ModelConfig};
use crate::rng::{derive_rng, stream};
use crate::tensor::{Graph, Id};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Relative-error tolerance for a passing check.
pub const GRAD_TOL: f64 = 1e-4;
/// Tensors of at most this many elements are checked exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 64;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Box<dyn Fn(&mut Graph<f64>, &[Id]) -> Result<Id>>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let row_factors = vec![0.0, 1.25, 2.0, 0.5];
    let ce_a = vec![0u32, 2, 4];
    let ce_b = vec![1u32, 2, 0];
    let ce_lam = vec![0.3, 1.0, 0.6];
    let scale_c = rng.random_range(0.5..2.0);
    let attn_scale = 1.0 / (2.0f64).sqrt();

    vec![
        OpCase {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            build: Box::new(|g, ids| g.matmul(ids[0], ids[1])),
        },
        OpCase {
            name: "linear",
            shapes: vec![vec![2, 3, 4], vec![5, 4], vec![5]],
            build: Box::new(|g, ids| g.linear(ids[0], ids[1], ids[2])),
        },
        OpCase {
            name: "add",
            shapes: vec![vec![2, 3], vec![2, 3]],
            build: Box::new(|g, ids| g.add(ids[0], ids[1])),
        },
        OpCase {
            name: "mul",
            shapes: vec![vec![2, 3], vec![2, 3]],
            build: Box::new(|g, ids| g.mul(ids[0], ids[1])),
        },
        OpCase {
            name: "scale",
            shapes: vec![vec![2, 3]],
            build: Box::new(move |g, ids| g.scale(ids[0], scale_c)),
        },
        OpCase {
            name: "scale_rows",
            shapes: vec![vec![4, 3]],
            build: Box::new(move |g, ids| g.scale_rows(ids[0], row_factors.clone())),
        },
        OpCase {
            name: "gelu",
            shapes: vec![vec![2, 4]],
            build: Box::new(|g, ids| g.gelu(ids[0])),
        },
        OpCase {
            name: "layer_norm",
            shapes: vec![vec![3, 5], vec![5], vec![5]],
            build: Box::new(|g, ids| g.layer_norm(ids[0], ids[1], ids[2], 1e-6)),
        },
        OpCase {
            name: "softmax_last",
            shapes: vec![vec![2, 4]],
            build: Box::new(|g, ids| g.softmax_last(ids[0])),
        },
        OpCase {
            name: "sum",
            shapes: vec![vec![2, 3]],
            build: Box::new(|g, ids| g.sum(ids[0])),
        },
        OpCase {
            name: "prepend_token",
            shapes: vec![vec![2, 3, 4], vec![4]],
            build: Box::new(|g, ids| g.prepend_token(ids[0], ids[1])),
        },
        OpCase {
            name: "add_pos",
            shapes: vec![vec![2, 3, 4], vec![3, 4]],
            build: Box::new(|g, ids| g.add_pos(ids[0], ids[1])),
        },
        OpCase {
            name: "qkv_part",
            shapes: vec![vec![2, 3, 12]],
            build: Box::new(|g, ids| g.qkv_part(ids[0], 1, 2)),
        },
        OpCase {
            name: "attn_scores",
            shapes: vec![vec![2, 2, 3, 2], vec![2, 2, 3, 2]],
            build: Box::new(move |g, ids| g.attn_scores(ids[0], ids[1], attn_scale)),
        },
        OpCase {
            name: "attn_apply",
            shapes: vec![vec![2, 2, 3, 3], vec![2, 2, 3, 2]],
            build: Box::new(|g, ids| g.attn_apply(ids[0], ids[1])),
        },
        OpCase {
            name: "merge_heads",
            shapes: vec![vec![2, 2, 3, 2]],
            build: Box::new(|g, ids| g.merge_heads(ids[0])),
        },
        OpCase {
            name: "select_token",
            shapes: vec![vec![2, 3, 4]],
            build: Box::new(|g, ids| g.select_token(ids[0], 1)),
        },
        OpCase {
            name: "cross_entropy_mixed",
            shapes: vec![vec![3, 5]],
            build: Box::new(move |g, ids| {
                g.cross_entropy_mixed(ids[0], &ce_a, &ce_b, &ce_lam)
            }),
        },
    ]
}

/// Checks one op case: the op output is contracted to a scalar against a
/// fixed random weighting, then every input coordinate is perturbed.
fn check_case(case: &OpCase, rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let sizes: Vec<usize> = case.shapes.iter().map(|s| s.iter().product()).collect();
    let mut flat: Vec<f64> = Vec::new();
    for &n in &sizes {
        flat.extend(uniform(rng, n, -1.0, 1.0));
    }

    // Learn the output shape, then fix the contraction weights.
    let out_numel = {
        let mut g: Graph<f64> = Graph::new();
        let ids = leaves(&mut g, &case.shapes, &sizes, &flat, false)?;
        let out = (case.build)(&mut g, &ids)?;
        g.value(out).len()
    };
    let weights = uniform(rng, out_numel, -1.0, 1.0);

    let eval = |flat: &[f64]| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let ids = leaves(&mut g, &case.shapes, &sizes, flat, false)?;
        let out = (case.build)(&mut g, &ids)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let shape = g.shape(out).to_vec();
            let w = g.leaf(&shape, weights.clone(), false)?;
            let prod = g.mul(out, w)?;
            g.sum(prod)?
        };
        Ok(g.value(loss)[0])
    };

    // Analytic gradients in one backward pass.
    let analytic: Vec<f64> = {
        let mut g: Graph<f64> = Graph::new();
        let ids = leaves(&mut g, &case.shapes, &sizes, &flat, true)?;
        let out = (case.build)(&mut g, &ids)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let shape = g.shape(out).to_vec();
            let w = g.leaf(&shape, weights.clone(), false)?;
            let prod = g.mul(out, w)?;
            g.sum(prod)?
        };
        g.backward(loss)?;
        let mut acc = Vec::with_capacity(flat.len());
        for (&id, &n) in ids.iter().zip(&sizes) {
            acc.extend(g.grad(id).unwrap_or_else(|| vec![0.0; n]));
        }
        acc
    };

    let mut max_err = 0.0f64;
    let mut probe = flat.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = eval(&probe)?;
        probe[i] = orig - FD_STEP;
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_err(analytic[i], numeric));
    }
    Ok(OpCheck { name: case.name.to_string(), checked: flat.len(), max_rel_err: max_err })
}

fn leaves(
    g: &mut Graph<f64>,
    shapes: &[Vec<usize>],
    sizes: &[usize],
    flat: &[f64],
    requires_grad: bool,
) -> Result<Vec<Id>> {
    let mut ids = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for (shape, &n) in shapes.iter().zip(sizes) {
        ids.push(g.leaf(shape, flat[off..off + n].to_vec(), requires_grad)?);
        off += n;
    }
    Ok(ids)
}

/// Finite-difference check of every differentiable op on fixed small
/// shapes. Returns per-op maximum relative errors.
pub fn op_gradcheck_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = derive_rng(seed, &[stream::GRADCHECK, 100]);
    op_cases(&mut rng).iter().map(|c| check_case(c, &mut rng)).collect()
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Smallest legal dims; keeps whole-model finite differences cheap.
pub fn micro_config(variant: MLPVariant) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        in_channels: 3,
        embed_dim: 8,
        depth: 2,
        num_heads: 2,
        mlp_hidden: 16,
        num_classes: 3,
        drop_path_rate: 0.0,
        variant,
    }
}

fn gradcheck_model(cfg: &ModelConfig, seed: u64) -> Result<(ParamSet<f64>, Vec<f64>, Vec<u32>, Vec<u32>, Vec<f64>)> {
    let (mut params, _) = crate::model::vit::build_model::<f64>(cfg, seed)?;
    // The head is zero-initialized, which would zero every upstream
    // gradient; randomize it so the check exercises the whole graph.
    let mut rng = derive_rng(seed, &[stream::GRADCHECK, 0]);
    let head = params.storage_index_of("head.weight")?;
    for v in params.storages_mut()[head].data.iter_mut() {
        *v = trunc_normal(&mut rng, 0.02);
    }

    let mut drng = derive_rng(seed, &[stream::GRADCHECK, 1]);
    let batch = 2usize;
    let numel = batch * cfg.in_channels * cfg.image_size * cfg.image_size;
    let images: Vec<f64> = (0..numel).map(|_| drng.random::<f64>()).collect();
    let patches =
        patchify(&images, batch, cfg.in_channels, cfg.image_size, cfg.image_size, cfg.patch_size)?;
    let c = cfg.num_classes as u32;
    let label_a = vec![0, 1 % c];
    let label_b = vec![2 % c, 0];
    let lam = vec![0.7, 0.4];
    Ok((params, patches, label_a, label_b, lam))
}

fn model_loss(
    cfg: &ModelConfig,
    params: &ParamSet<f64>,
    patches: &[f64],
    label_a: &[u32],
    label_b: &[u32],
    lam: &[f64],
) -> Result<f64> {
    let mut g: Graph<f64> = Graph::new();
    let binding = bind_params(&mut g, params, false)?;
    let out = forward_graph(&mut g, &binding, cfg, patches, label_a.len(), Mode::Eval, None)?;
    let loss = g.cross_entropy_mixed(out.logits, label_a, label_b, lam)?;
    Ok(g.value(loss)[0])
}

/// Whole-model finite-difference report, one group per parameter storage.
///
/// Tensors with at most [`EXHAUSTIVE_LIMIT`] elements are checked at every
/// coordinate; larger ones at `sample_limit` sampled coordinates. `inject`
/// corrupts the named storage's analytic gradient before comparison, a
/// negative control proving the check can fail.
pub fn model_grad_report(
    cfg: &ModelConfig,
    seed: u64,
    sample_limit: usize,
    inject: Option<&str>,
) -> Result<GradReport> {
    cfg.validate()?;
    if sample_limit == 0 {
        return Err(Error::Config("sample_limit must be positive".into()));
    }
    let (mut params, patches, label_a, label_b, lam) = gradcheck_model(cfg, seed)?;
    if let Some(path) = inject {
        params.storage_index_of(path)?;
    }

    // Analytic gradients per storage.
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(params.num_storages());
    {
        let mut g: Graph<f64> = Graph::new();
        let binding = bind_params(&mut g, &params, true)?;
        let out =
            forward_graph(&mut g, &binding, cfg, &patches, label_a.len(), Mode::Eval, None)?;
        let loss = g.cross_entropy_mixed(out.logits, &label_a, &label_b, &lam)?;
        g.backward(loss)?;
        for (i, &leaf) in binding.storage_leaves.iter().enumerate() {
            let n = params.storages()[i].numel();
            analytic.push(g.grad(leaf).unwrap_or_else(|| vec![0.0; n]));
        }
    }
    if let Some(path) = inject {
        let sidx = params.storage_index_of(path)?;
        for v in analytic[sidx].iter_mut() {
            *v = *v * 1.01 + 1e-3;
        }
    }

    let mut sample_rng = derive_rng(seed, &[stream::GRADCHECK, 2]);
    let mut groups = Vec::with_capacity(params.num_storages());
    let mut overall = 0.0f64;
    for sidx in 0..params.num_storages() {
        let numel = params.storages()[sidx].numel();
        let indices: Vec<usize> = if numel <= EXHAUSTIVE_LIMIT {
            (0..numel).collect()
        } else {
            let mut seen = HashSet::new();
            let mut picked = Vec::with_capacity(sample_limit);
            while picked.len() < sample_limit.min(numel) {
                let i = sample_rng.random_range(0..numel);
                if seen.insert(i) {
                    picked.push(i);
                }
            }
            picked
        };

        let mut max_err = 0.0f64;
        for &i in &indices {
            let orig = params.storages()[sidx].data[i];
            params.storages_mut()[sidx].data[i] = orig + FD_STEP;
            let up = model_loss(cfg, &params, &patches, &label_a, &label_b, &lam)?;
            params.storages_mut()[sidx].data[i] = orig - FD_STEP;
            let down = model_loss(cfg, &params, &patches, &label_a, &label_b, &lam)?;
            params.storages_mut()[sidx].data[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[sidx][i], numeric));
        }
        overall = overall.max(max_err);
        groups.push(GroupReport {
            name: params.storages()[sidx].path.clone(),
            checked: indices.len(),
            max_rel_err: max_err,
            pass: max_err <= GRAD_TOL,
        });
    }
    Ok(GradReport {
        groups,
        max_rel_err: overall,
        tolerance: GRAD_TOL,
        pass: overall <= GRAD_TOL,
    })
}

/// For every sharing group of a grouped model, compares the shared MLP
/// gradient against the sum of gradients from runs where all but one
/// member block reads a detached copy. Returns the maximum absolute
/// deviation over all shared tensors.
pub fn shared_grad_decomposition(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let group_size = match cfg.variant {
        MLPVariant::Grouped { group_size } => group_size,
        _ => return Err(Error::Config("decomposition check needs a grouped variant".into())),
    };
    let (params, patches, label_a, label_b, lam) = gradcheck_model(cfg, seed)?;
    let mlp_tensors = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

    // detach: block indices whose MLP reads get private, non-trainable
    // copies, leaving gradient flow only through the remaining blocks.
    let run = |detach: &[usize]| -> Result<Vec<Vec<f64>>> {
        let mut g: Graph<f64> = Graph::new();
        let mut binding = bind_params(&mut g, &params, true)?;
        for &b in detach {
            for t in &mlp_tensors {
                let path = format!("blocks.{b}.mlp.{t}");
                let (shape, data) = params.get(&path)?;
                let detached = g.leaf(shape, data.to_vec(), false)?;
                binding.by_path.insert(path, detached);
            }
        }
        let out =
            forward_graph(&mut g, &binding, cfg, &patches, label_a.len(), Mode::Eval, None)?;
        let loss = g.cross_entropy_mixed(out.logits, &label_a, &label_b, &lam)?;
        g.backward(loss)?;
        let mut grads = Vec::with_capacity(params.num_storages());
        for (i, &leaf) in binding.storage_leaves.iter().enumerate() {
            let n = params.storages()[i].numel();
            grads.push(g.grad(leaf).unwrap_or_else(|| vec![0.0; n]));
        }
        Ok(grads)
    };

    let full = run(&[])?;
    let mut max_dev = 0.0f64;
    for lead in (0..cfg.depth).step_by(group_size) {
        let members: Vec<usize> = (lead..lead + group_size).collect();
        // Isolated gradients: detach every member except one.
        let mut summed: Vec<Vec<f64>> = Vec::new();
        for &keep in &members {
            let detach: Vec<usize> = members.iter().copied().filter(|&b| b != keep).collect();
            let iso = run(&detach)?;
            if summed.is_empty() {
                summed = iso;
            } else {
                for (acc, g) in summed.iter_mut().zip(iso) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
        }
        for t in &mlp_tensors {
            let sidx = params.storage_index_of(&format!("blocks.{lead}.mlp.{t}"))?;
            for (a, b) in full[sidx].iter().zip(&summed[sidx]) {
                max_dev = max_dev.max((a - b).abs());
            }
        }
    }
    Ok(max_dev)
}
