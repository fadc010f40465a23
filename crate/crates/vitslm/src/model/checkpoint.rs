//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VSLM" | version u32 | config_len u32 | config JSON |
//! num_storages u32 | storage records... | depth u32 | sharing u32 × depth
//! ```
//!
//! Each storage record is `path_len u32 | path UTF-8 | dtype u8 | rank u32 |
//! extents u32 × rank | payload`. Shared storages are written once, under
//! the owning path; logical aliases are reconstructed on load from the
//! config and the sharing map, so the file carries no redundant copies.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::params::{is_mlp_path, param_paths, AppliedTransform, ParamSet};
use crate::model::{MLPVariant, ModelConfig};
use crate::tensor::{Dtype, Elem};

pub const MAGIC: [u8; 4] = *b"VSLM";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint<T: Elem>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(cfg)?;
    let mut buf = Vec::with_capacity(
        64 + config_json.len() + params.unique_param_count() * T::BYTES,
    );
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, config_json.len() as u32);
    buf.extend_from_slice(&config_json);

    put_u32(&mut buf, params.num_storages() as u32);
    for s in params.storages() {
        put_u32(&mut buf, s.path.len() as u32);
        buf.extend_from_slice(s.path.as_bytes());
        buf.push(T::DTYPE.tag());
        put_u32(&mut buf, s.shape.len() as u32);
        for &e in &s.shape {
            put_u32(&mut buf, e as u32);
        }
        for &v in &s.data {
            v.write_le(&mut buf);
        }
    }

    put_u32(&mut buf, params.mlp_sharing.len() as u32);
    for &g in &params.mlp_sharing {
        put_u32(&mut buf, g as u32);
    }
    Ok(buf)
}

pub fn save_checkpoint<T: Elem>(
    path: &Path,
    cfg: &ModelConfig,
    params: &ParamSet<T>,
) -> Result<()> {
    let buf = encode_checkpoint(cfg, params)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Expected shape for a logical path under this config (variant-aware:
/// MLP tensors use the effective hidden width).
fn expected_shape(cfg: &ModelConfig, path: &str, full_shape: &[usize]) -> Vec<usize> {
    if !is_mlp_path(path) {
        return full_shape.to_vec();
    }
    let h = cfg.effective_hidden();
    let d = cfg.embed_dim;
    if path.ends_with("fc1.weight") {
        vec![h, d]
    } else if path.ends_with("fc1.bias") {
        vec![h]
    } else if path.ends_with("fc2.weight") {
        vec![d, h]
    } else {
        vec![d]
    }
}

/// Owner path of a logical path: MLP paths of non-lead group members
/// resolve to the first block of their sharing group.
fn owner_path(path: &str, sharing: &[usize]) -> Result<String> {
    if !is_mlp_path(path) {
        return Ok(path.to_string());
    }
    let rest = path
        .strip_prefix("blocks.")
        .ok_or_else(|| Error::Format(format!("unexpected MLP path {path}")))?;
    let dot = rest
        .find('.')
        .ok_or_else(|| Error::Format(format!("unexpected MLP path {path}")))?;
    let block: usize = rest[..dot]
        .parse()
        .map_err(|_| Error::Format(format!("unexpected MLP path {path}")))?;
    if block >= sharing.len() {
        return Err(Error::Format(format!("block {block} outside sharing map")));
    }
    let lead = sharing
        .iter()
        .position(|&g| g == sharing[block])
        .expect("own group present");
    Ok(format!("blocks.{lead}{}", &rest[dot..]))
}

pub fn decode_checkpoint<T: Elem>(buf: &[u8]) -> Result<(ModelConfig, ParamSet<T>)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = c.u32("config length")? as usize;
    let cfg: ModelConfig = serde_json::from_slice(c.take(cfg_len, "config")?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    cfg.validate()?;

    let num_storages = c.u32("storage count")? as usize;
    let mut records: Vec<(String, Vec<usize>, Vec<T>)> = Vec::with_capacity(num_storages);
    for _ in 0..num_storages {
        let plen = c.u32("path length")? as usize;
        let path = std::str::from_utf8(c.take(plen, "path")?)
            .map_err(|_| Error::Format("storage path is not UTF-8".into()))?
            .to_string();
        let tag = c.u8("dtype")?;
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown dtype tag {tag} for {path}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "{path} stored as {dtype:?} but loaded as {:?}",
                T::DTYPE
            )));
        }
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * T::BYTES, "payload")?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        records.push((path, shape, data));
    }

    let depth = c.u32("sharing depth")? as usize;
    if depth != cfg.depth {
        return Err(Error::Format(format!(
            "sharing map depth {depth} does not match config depth {}",
            cfg.depth
        )));
    }
    let mut sharing = Vec::with_capacity(depth);
    for _ in 0..depth {
        sharing.push(c.u32("sharing entry")? as usize);
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint body",
            buf.len() - c.pos
        )));
    }

    // Rebuild the ParamSet in canonical order, aliasing shared paths.
    let mut by_path: std::collections::HashMap<String, (Vec<usize>, Vec<T>)> = records
        .into_iter()
        .map(|(p, s, d)| (p, (s, d)))
        .collect();
    let mut params: ParamSet<T> = ParamSet::new(depth);
    for (path, full_shape) in param_paths(&cfg) {
        let owner = owner_path(&path, &sharing)?;
        if owner == path {
            let (shape, data) = by_path
                .remove(&path)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {path}")))?;
            let want = expected_shape(&cfg, &path, &full_shape);
            if shape != want {
                return Err(Error::Format(format!(
                    "{path} has shape {shape:?}, config expects {want:?}"
                )));
            }
            params.insert(&path, shape, data)?;
        } else {
            let sidx = params.storage_index_of(&owner).map_err(|_| {
                Error::Format(format!("{path} aliases {owner}, which is not stored"))
            })?;
            params.alias(&path, sidx)?;
        }
    }
    if let Some(stray) = by_path.keys().next() {
        return Err(Error::Format(format!("checkpoint contains unknown tensor {stray}")));
    }
    params.mlp_sharing = sharing;
    params.applied = match cfg.variant {
        MLPVariant::Baseline => AppliedTransform::None,
        MLPVariant::Grouped { group_size } => AppliedTransform::Grouped { group_size },
        MLPVariant::Shallow { width_ratio } => AppliedTransform::Shallow { width_ratio },
    };
    Ok((cfg, params))
}

pub fn load_checkpoint<T: Elem>(path: &Path) -> Result<(ModelConfig, ParamSet<T>)> {
    let buf = fs::read(path)?;
    decode_checkpoint(&buf)
}
