//! Binary parameter snapshots with a TOML sidecar.
//!
//! Layout (little endian): magic `ANYSTEP\0`, format version `u32`, the
//! [`NetSpec`] fields, iteration `u64`, parameter count `u64`, then one `f32`
//! per parameter. Files are written to a temporary name and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{NetSpec, Network};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ANYSTEP\0";
const VERSION: u32 = 1;

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode(net: &Network, iter: u64) -> Vec<u8> {
    let s = net.spec();
    let mut out = Vec::with_capacity(96 + 4 * net.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [s.dim, s.n_classes, s.width, s.depth, s.cond_dim, s.n_freqs] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&s.time_scale.to_le_bytes());
    out.extend_from_slice(&s.max_period.to_le_bytes());
    out.push(s.zero_init_output as u8);
    out.extend_from_slice(&iter.to_le_bytes());
    out.extend_from_slice(&(net.num_params() as u64).to_le_bytes());
    for &p in net.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decodes a snapshot; returns the network and its iteration.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Network, u64)> {
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(&MAGIC[..]) {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    }
    let time_scale = r.f64().ok_or_else(|| bad("truncated header"))?;
    let max_period = r.f64().ok_or_else(|| bad("truncated header"))?;
    let zero_init = r.take(1).ok_or_else(|| bad("truncated header"))?[0] != 0;
    let iter = r.u64().ok_or_else(|| bad("truncated header"))?;
    let n = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
    let spec = NetSpec {
        dim: dims[0],
        n_classes: dims[1],
        width: dims[2],
        depth: dims[3],
        cond_dim: dims[4],
        n_freqs: dims[5],
        time_scale,
        max_period,
        zero_init_output: zero_init,
    };
    let body = r.take(4 * n).ok_or_else(|| bad("truncated parameter block"))?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let net = Network::from_params(spec, params).map_err(|e| bad(&e.to_string()))?;
    Ok((net, iter))
}

/// Sidecar describing one checkpoint pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub iter: u64,
    pub config_hash: String,
    pub n_params: usize,
    pub live: String,
    pub ema: String,
}

pub fn checkpoint_paths(dir: &Path, iter: u64) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("ckpt_{iter}.bin")),
        dir.join(format!("ckpt_{iter}.ema.bin")),
        dir.join(format!("ckpt_{iter}.toml")),
    )
}

/// Writes the live and EMA networks plus the sidecar; the sidecar goes last,
/// so a checkpoint is complete exactly when its sidecar exists.
pub fn save(dir: &Path, iter: u64, live: &Network, ema: &Network, config_hash: &str) -> Result<CheckpointMeta> {
    let (live_path, ema_path, meta_path) = checkpoint_paths(dir, iter);
    write_atomic(&live_path, &encode(live, iter))?;
    write_atomic(&ema_path, &encode(ema, iter))?;
    let file_name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
    let meta = CheckpointMeta {
        iter,
        config_hash: config_hash.to_string(),
        n_params: live.num_params(),
        live: file_name(&live_path),
        ema: file_name(&ema_path),
    };
    write_atomic(&meta_path, toml::to_string(&meta).expect("meta serializes").as_bytes())?;
    Ok(meta)
}

pub fn load_network(path: &Path) -> Result<(Network, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(&bytes, path)
}

/// Completed checkpoints in `dir`, oldest first.
pub fn list(dir: &Path) -> Result<Vec<CheckpointMeta>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let path = entry?.path();
        let is_meta = path.extension().is_some_and(|e| e == "toml")
            && path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt_"));
        if is_meta {
            let text = fs::read_to_string(&path)?;
            let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| Error::Checkpoint {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            out.push(meta);
        }
    }
    out.sort_by_key(|m| m.iter);
    Ok(out)
}

/// Latest complete checkpoint, loaded as `(live, ema, meta)`.
pub fn load_latest(dir: &Path) -> Result<(Network, Network, CheckpointMeta)> {
    let meta = list(dir)?
        .pop()
        .ok_or_else(|| Error::MissingCheckpoint(dir.to_path_buf()))?;
    let (live, _) = load_network(&dir.join(&meta.live))?;
    let (ema, _) = load_network(&dir.join(&meta.ema))?;
    Ok((live, ema, meta))
}
