//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "FSLB" | version: u32 | n_entries: u32
//! n_entries x { name_len: u32 | name: utf-8 | ndims: u32 | dims: u32 x ndims | data: f32 x prod(dims) }
//! crc32 of every preceding byte: u32
//! ```
//!
//! Network checkpoints carry a `meta.arch` entry
//! `[dim, hidden, depth, n_classes, t_scale, dual_time]` ahead of the
//! parameters.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::{NetConfig, VelocityNet};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"FSLB";
pub const VERSION: u32 = 1;
pub const ARCH_ENTRY: &str = "meta.arch";

fn ck_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_entries(entries: &[(String, Tensor<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ck_err(
                self.path,
                format!("truncated while reading {what} at offset {}", self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Validates magic, version and CRC, then parses every entry. Nothing is
/// returned unless the whole file is valid.
pub fn decode_entries(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f64>)>> {
    if bytes.len() < 16 {
        return Err(ck_err(path, format!("truncated: {} bytes is shorter than any checkpoint", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(ck_err(path, "bad magic (not an FSLB checkpoint)"));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(ck_err(path, format!("unsupported version {version} (expected {VERSION})")));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes([bytes[body_len], bytes[body_len + 1], bytes[body_len + 2], bytes[body_len + 3]]);
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(ck_err(
            path,
            format!("CRC mismatch: stored {stored:#010x} at offset {body_len}, computed {computed:#010x}"),
        ));
    }
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 8,
        path,
    };
    let n = r.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| ck_err(path, format!("entry name at offset {at} is not utf-8")))?
            .to_string();
        let nd = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(nd.min(8));
        for _ in 0..nd {
            dims.push(r.u32("dims")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| ck_err(path, format!("entry {name}: dimension overflow")))?;
        let raw = r.take(count.checked_mul(4).unwrap_or(usize::MAX), "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| ck_err(path, format!("entry {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body_len {
        return Err(ck_err(path, format!("{} trailing bytes after last entry", body_len - r.pos)));
    }
    Ok(out)
}

fn arch_tensor(cfg: &NetConfig) -> Tensor<f64> {
    Tensor::column(vec![
        cfg.dim as f64,
        cfg.hidden as f64,
        cfg.depth as f64,
        cfg.n_classes as f64,
        cfg.t_scale,
        if cfg.dual_time { 1.0 } else { 0.0 },
    ])
}

fn arch_from(t: &Tensor<f64>, path: &Path) -> Result<NetConfig> {
    let d = t.data();
    if d.len() != 6 {
        return Err(ck_err(path, format!("{ARCH_ENTRY} has {} values, expected 6", d.len())));
    }
    let cfg = NetConfig {
        dim: d[0] as usize,
        hidden: d[1] as usize,
        depth: d[2] as usize,
        n_classes: d[3] as usize,
        t_scale: d[4],
        dual_time: d[5] != 0.0,
    };
    cfg.validate().map_err(|e| ck_err(path, format!("{ARCH_ENTRY}: {e}")))?;
    Ok(cfg)
}

pub fn net_to_bytes<S: Scalar>(net: &VelocityNet<S>) -> Vec<u8> {
    let mut entries = vec![(ARCH_ENTRY.to_string(), arch_tensor(net.config()))];
    for (name, p) in net.names().iter().zip(net.params()) {
        entries.push((name.clone(), p.cast()));
    }
    encode_entries(&entries)
}

pub fn net_from_bytes(bytes: &[u8], path: &Path) -> Result<VelocityNet<f64>> {
    let mut entries = decode_entries(bytes, path)?;
    if entries.is_empty() || entries[0].0 != ARCH_ENTRY {
        return Err(ck_err(path, format!("first entry must be {ARCH_ENTRY}")));
    }
    let (_, arch) = entries.remove(0);
    let cfg = arch_from(&arch, path)?;
    VelocityNet::from_params(cfg, entries).map_err(|e| ck_err(path, e.to_string()))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn save_checkpoint<S: Scalar>(net: &VelocityNet<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, net_to_bytes(net))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VelocityNet<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ck_err(path, e.to_string()))?;
    net_from_bytes(&bytes, path)
}
