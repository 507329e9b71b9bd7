//! Binary checkpoints: model weights, running statistics, optimizer
//! moments, and the full run configuration in one self-describing file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HSTM" | u32 version=1 | u64 step | u64 seed
//! u32 config_len | config TOML bytes
//! u32 entry_count | entries...
//! entry := u32 name_len | name | u32 rank | u32 extents[rank] | f32 data[numel]
//! ```
//!
//! Entries hold every parameter and buffer in store order, then the AdamW
//! first/second moments as `opt.m.<name>` / `opt.v.<name>` per trainable
//! parameter. Loading rebuilds the model from the embedded config and
//! refuses files whose entry set disagrees with it.

use std::path::Path;

use indexmap::IndexMap;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::new_model;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HSTM";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &e in shape {
        put_u32(out, e as u32);
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize and write atomically (write to `<path>.tmp`, then rename).
pub fn save(path: &Path, run: &RunConfig, store: &ParamStore<f32>, opt: &AdamW<f32>, step: u64) -> Result<()> {
    let cfg_text = run.to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, step);
    put_u64(&mut out, run.seed);
    put_u32(&mut out, cfg_text.len() as u32);
    out.extend_from_slice(cfg_text.as_bytes());

    let trainable: Vec<&str> = store.trainable_names().collect();
    let count = store.len() + 2 * trainable.len();
    put_u32(&mut out, count as u32);
    for (name, t) in store.iter() {
        put_entry(&mut out, name, t.shape(), t.data());
    }
    for kind in ["m", "v"] {
        for &name in &trainable {
            let shape = store.get(name).shape();
            let state = if kind == "m" { &opt.m } else { &opt.v };
            let zeros;
            let data: &[f32] = match state.get(name) {
                Some(v) => v,
                None => {
                    zeros = vec![0.0f32; store.get(name).numel()];
                    &zeros
                }
            };
            put_entry(&mut out, &format!("opt.{kind}.{name}"), shape, data);
        }
    }

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint {
                path: self.path.to_path_buf(),
                reason: format!(
                    "truncated: need {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.buf.len()
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub struct LoadedCheckpoint {
    pub run: RunConfig,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub step: u64,
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0, path };
    let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };

    if cur.take(4)? != MAGIC {
        return Err(bad("bad magic; not a checkpoint file".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version} (expected {VERSION})")));
    }
    let step = cur.u64()?;
    let seed = cur.u64()?;
    let cfg_len = cur.u32()? as usize;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len)?)
        .map_err(|e| bad(format!("config is not UTF-8: {e}")))?;
    let run = RunConfig::from_toml(cfg_text)?;
    if run.seed != seed {
        return Err(bad(format!("header seed {seed} disagrees with config seed {}", run.seed)));
    }

    let count = cur.u32()? as usize;
    let mut entries: IndexMap<String, Tensor<f32>> = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| bad(format!("entry name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(4 * numel)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if entries.insert(name.clone(), Tensor::new(&shape, data)).is_some() {
            return Err(bad(format!("duplicate entry `{name}`")));
        }
    }
    if cur.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes after last entry", buf.len() - cur.pos)));
    }

    // Rebuild the model implied by the config; the file must cover exactly
    // its parameters, buffers, and optimizer state.
    let mut store = new_model::<f32>(&run.model, run.seed);
    let mut expected: Vec<String> = store.names().map(str::to_string).collect();
    for kind in ["m", "v"] {
        for name in store.trainable_names() {
            expected.push(format!("opt.{kind}.{name}"));
        }
    }
    let missing: Vec<String> = expected.iter().filter(|n| !entries.contains_key(*n)).cloned().collect();
    let unexpected: Vec<String> =
        entries.keys().filter(|n| !expected.iter().any(|e| e == *n)).cloned().collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::CheckpointMismatch { path: path.to_path_buf(), missing, unexpected });
    }

    let mut opt = AdamW::new(run.train.weight_decay);
    opt.step = step;
    for (name, tensor) in entries {
        if let Some(param) = name.strip_prefix("opt.m.") {
            opt.m.insert(param.to_string(), tensor.into_data());
        } else if let Some(param) = name.strip_prefix("opt.v.") {
            opt.v.insert(param.to_string(), tensor.into_data());
        } else {
            let slot = store.get_mut(&name);
            if slot.shape() != tensor.shape() {
                return Err(bad(format!(
                    "shape mismatch for `{name}`: file {:?} vs model {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
    }
    Ok(LoadedCheckpoint { run, store, opt, step })
}

/// Verify that a loaded checkpoint provides exactly the parameters and
/// buffers of the model described by `run`, with matching shapes. Lets a
/// caller pair an externally supplied config with a checkpoint before
/// evaluating, instead of failing deep inside a forward pass.
pub fn check_compatible(path: &Path, run: &RunConfig, loaded: &LoadedCheckpoint) -> Result<()> {
    let expected = new_model::<f32>(&run.model, run.seed);
    let missing: Vec<String> =
        expected.names().filter(|n| !loaded.store.contains(n)).map(str::to_string).collect();
    let unexpected: Vec<String> =
        loaded.store.names().filter(|n| !expected.contains(n)).map(str::to_string).collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::CheckpointMismatch { path: path.to_path_buf(), missing, unexpected });
    }
    let bad: Vec<String> = expected
        .iter()
        .filter(|(n, t)| loaded.store.get(n).shape() != t.shape())
        .map(|(n, t)| {
            format!("{n}: config wants {:?}, checkpoint has {:?}", t.shape(), loaded.store.get(n).shape())
        })
        .collect();
    if !bad.is_empty() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("parameter shapes disagree with the configured model: {}", bad.join("; ")),
        });
    }
    Ok(())
}
