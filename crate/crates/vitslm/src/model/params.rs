//! Named parameter store with explicit aliasing.
//!
//! Parameters live in `storages`; logical parameter paths resolve to
//! storage indices. Weight sharing is structural: two paths mapping to one
//! storage read, and accumulate gradient into, the same buffer. The
//! optimizer, EMA, and checkpoint writer all walk unique storages exactly
//! once, so a shared tensor can never drift apart between its readers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Elem;

/// Which capacity transform has been applied. Transforms require `None`
/// and set their own tag, making a second application a contract error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AppliedTransform {
    None,
    Grouped { group_size: usize },
    Shallow { width_ratio: f64 },
}

#[derive(Clone, Debug)]
pub struct ParamStorage<T> {
    /// Path of the first (or only) owner; storages keep this name even
    /// after other blocks alias them.
    pub path: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> ParamStorage<T> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Debug)]
pub struct ParamSet<T: Elem> {
    storages: Vec<ParamStorage<T>>,
    /// Canonical path order; each entry resolves to a storage index.
    paths: Vec<(String, usize)>,
    index: HashMap<String, usize>,
    /// Block index -> MLP storage group. Identity unless grouped.
    pub mlp_sharing: Vec<usize>,
    pub applied: AppliedTransform,
}

impl<T: Elem> ParamSet<T> {
    pub fn new(depth: usize) -> Self {
        ParamSet {
            storages: Vec::new(),
            paths: Vec::new(),
            index: HashMap::new(),
            mlp_sharing: (0..depth).collect(),
            applied: AppliedTransform::None,
        }
    }

    /// Adds a fresh storage owned by `path`.
    pub fn insert(&mut self, path: &str, shape: Vec<usize>, data: Vec<T>) -> Result<usize> {
        if self.index.contains_key(path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let sidx = self.storages.len();
        self.storages.push(ParamStorage { path: path.to_string(), shape, data });
        self.index.insert(path.to_string(), self.paths.len());
        self.paths.push((path.to_string(), sidx));
        Ok(sidx)
    }

    /// Adds `path` as an alias of an existing storage.
    pub fn alias(&mut self, path: &str, storage: usize) -> Result<()> {
        if self.index.contains_key(path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        if storage >= self.storages.len() {
            return Err(Error::Config(format!("alias {path} to missing storage {storage}")));
        }
        self.index.insert(path.to_string(), self.paths.len());
        self.paths.push((path.to_string(), storage));
        Ok(())
    }

    pub fn storage_index_of(&self, path: &str) -> Result<usize> {
        self.index
            .get(path)
            .map(|&p| self.paths[p].1)
            .ok_or_else(|| Error::Config(format!("unknown parameter path {path}")))
    }

    pub fn get(&self, path: &str) -> Result<(&[usize], &[T])> {
        let s = &self.storages[self.storage_index_of(path)?];
        Ok((&s.shape, &s.data))
    }

    pub fn storages(&self) -> &[ParamStorage<T>] {
        &self.storages
    }

    pub fn storages_mut(&mut self) -> &mut [ParamStorage<T>] {
        &mut self.storages
    }

    pub fn num_storages(&self) -> usize {
        self.storages.len()
    }

    /// Logical paths in canonical order with their storage indices.
    pub fn paths(&self) -> &[(String, usize)] {
        &self.paths
    }

    /// Parameter count resolving every path (shared storages counted once
    /// per reader).
    pub fn resolved_param_count(&self) -> usize {
        self.paths.iter().map(|&(_, s)| self.storages[s].numel()).sum()
    }

    /// Parameter count over distinct storages.
    pub fn unique_param_count(&self) -> usize {
        self.storages.iter().map(|s| s.numel()).sum()
    }

    /// Unique parameters inside MLP storages.
    pub fn unique_mlp_param_count(&self) -> usize {
        self.storages.iter().filter(|s| is_mlp_path(&s.path)).map(|s| s.numel()).sum()
    }

    pub fn unique_mlp_storage_groups(&self) -> usize {
        let mut groups = self.mlp_sharing.clone();
        groups.sort_unstable();
        groups.dedup();
        groups.len()
    }

    /// Redirects an existing path to another storage. Only the capacity
    /// transforms use this; dangling storages are dropped by `compact`.
    pub(crate) fn repoint(&mut self, path: &str, storage: usize) -> Result<()> {
        let pos = *self
            .index
            .get(path)
            .ok_or_else(|| Error::Config(format!("unknown parameter path {path}")))?;
        if storage >= self.storages.len() {
            return Err(Error::Config(format!("repoint {path} to missing storage {storage}")));
        }
        self.paths[pos].1 = storage;
        Ok(())
    }

    /// Rebuilds the storage table keeping only storages still referenced,
    /// remapping path entries. Used after a transform drops aliased blocks.
    pub(crate) fn compact(&mut self) {
        let mut remap: Vec<Option<usize>> = vec![None; self.storages.len()];
        let mut kept: Vec<ParamStorage<T>> = Vec::new();
        for &(_, s) in &self.paths {
            if remap[s].is_none() {
                remap[s] = Some(kept.len());
                kept.push(self.storages[s].clone());
            }
        }
        for entry in self.paths.iter_mut() {
            entry.1 = remap[entry.1].expect("path resolved during scan");
        }
        self.storages = kept;
    }
}

pub fn is_mlp_path(path: &str) -> bool {
    path.contains(".mlp.")
}

/// Canonical parameter enumeration for a config at full baseline width:
/// `(path, shape)` in draw order. Initialization consumes one RNG stream
/// per entry in exactly this order, so every variant sees identical draws.
pub fn param_paths(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.weight".into(), vec![d, cfg.patch_dim()]),
        ("patch_embed.bias".into(), vec![d]),
        ("cls_token".into(), vec![d]),
        ("pos_embed".into(), vec![cfg.seq_len(), d]),
    ];
    for b in 0..cfg.depth {
        out.push((format!("blocks.{b}.attn.qkv.weight"), vec![3 * d, d]));
        out.push((format!("blocks.{b}.attn.qkv.bias"), vec![3 * d]));
        out.push((format!("blocks.{b}.attn.proj.weight"), vec![d, d]));
        out.push((format!("blocks.{b}.attn.proj.bias"), vec![d]));
        out.push((format!("blocks.{b}.norm1.weight"), vec![d]));
        out.push((format!("blocks.{b}.norm1.bias"), vec![d]));
        out.push((format!("blocks.{b}.norm2.weight"), vec![d]));
        out.push((format!("blocks.{b}.norm2.bias"), vec![d]));
        out.push((format!("blocks.{b}.mlp.fc1.weight"), vec![h, d]));
        out.push((format!("blocks.{b}.mlp.fc1.bias"), vec![h]));
        out.push((format!("blocks.{b}.mlp.fc2.weight"), vec![d, h]));
        out.push((format!("blocks.{b}.mlp.fc2.bias"), vec![d]));
    }
    out.push(("norm.weight".into(), vec![d]));
    out.push(("norm.bias".into(), vec![d]));
    out.push(("head.weight".into(), vec![cfg.num_classes, d]));
    out.push(("head.bias".into(), vec![cfg.num_classes]));
    out
}

/// The four MLP tensor suffixes of a block, in canonical order.
pub const MLP_TENSORS: [&str; 4] = ["mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"];
