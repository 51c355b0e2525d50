//! Checkpoint files: a text header plus named `f32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "DOSGCKPT"
//! version   u32      1
//! hlen      u32      header length in bytes
//! header    hlen     UTF-8 "key=value" lines
//! count     u32      number of arrays
//! count x:  u16 path length, path bytes (UTF-8),
//!           u8 ndim, ndim x u32 dims,
//!           prod(dims) x f32 values
//! ```
//!
//! Network parameters are stored under their module paths (prompt block
//! parameters under `prompt.`), optimizer moments under `adam.m.` and
//! `adam.v.`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::nn::Module;
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DOSGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (path, a) in &self.arrays {
            out.extend_from_slice(&(path.len() as u16).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(a.dims.len() as u8);
            for &d in &a.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated version"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32().ok_or_else(|| bad("truncated header length"))? as usize;
        let text = std::str::from_utf8(r.take(hlen).ok_or_else(|| bad("truncated header"))?)
            .map_err(|_| bad("header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("header line without '='"))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32().ok_or_else(|| bad("truncated array count"))?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let plen = r.u16().ok_or_else(|| bad("truncated path length"))? as usize;
            let path = std::str::from_utf8(r.take(plen).ok_or_else(|| bad("truncated path"))?)
                .map_err(|_| bad("path is not UTF-8"))?
                .to_string();
            let ndim = r.u8().ok_or_else(|| bad("truncated rank"))? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32().ok_or_else(|| bad("truncated dims"))? as usize);
            }
            let len: usize = dims.iter().product();
            let raw = r
                .take(len.checked_mul(4).ok_or_else(|| bad("array too large"))?)
                .ok_or_else(|| bad("truncated array data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.insert(path, Array { dims, data });
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .header
            .get(key)
            .ok_or_else(|| Error::config(format!("checkpoint header lacks '{key}'")))?;
        raw.parse()
            .map_err(|_| Error::config(format!("checkpoint header '{key}' has bad value '{raw}'")))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_network_config(ckpt: &mut Checkpoint, c: &DenoiserConfig) {
    ckpt.set("net.base_channels", c.base_channels);
    ckpt.set("net.depth", c.depth);
    ckpt.set("net.time_embed_dim", c.time_embed_dim);
    ckpt.set("net.image_channels", c.image_channels);
    ckpt.set("net.labels", c.labels);
    ckpt.set("net.experts", c.experts);
    ckpt.set("net.prompt", c.prompt_enabled);
}

pub fn read_network_config(ckpt: &Checkpoint) -> Result<DenoiserConfig> {
    let c = DenoiserConfig {
        base_channels: ckpt.get("net.base_channels")?,
        depth: ckpt.get("net.depth")?,
        time_embed_dim: ckpt.get("net.time_embed_dim")?,
        image_channels: ckpt.get("net.image_channels")?,
        labels: ckpt.get("net.labels")?,
        experts: ckpt.get("net.experts")?,
        prompt_enabled: ckpt.get("net.prompt")?,
    };
    c.validate()?;
    Ok(c)
}

/// Store network parameters (and optionally optimizer state).
pub fn store(ckpt: &mut Checkpoint, net: &mut Denoiser<f32>, adam: Option<&Adam>) {
    write_network_config(ckpt, &net.config);
    let mut idx = 0;
    net.visit_params("", &mut |path, p| {
        ckpt.arrays.insert(path.to_string(), Array { dims: p.shape.clone(), data: p.value.clone() });
        if let Some(a) = adam {
            ckpt.arrays.insert(format!("adam.m.{path}"), Array { dims: p.shape.clone(), data: a.m[idx].clone() });
            ckpt.arrays.insert(format!("adam.v.{path}"), Array { dims: p.shape.clone(), data: a.v[idx].clone() });
        }
        idx += 1;
    });
    if let Some(a) = adam {
        ckpt.set("adam.step", a.step);
    }
}

/// Rebuild the network described by the checkpoint and load its parameters.
pub fn restore_network(ckpt: &Checkpoint) -> Result<Denoiser<f32>> {
    let config = read_network_config(ckpt)?;
    // Initial values are overwritten below; any generator will do.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Denoiser::new(config, &mut rng)?;
    let mut missing = None;
    net.visit_params("", &mut |path, p| {
        match ckpt.arrays.get(path) {
            Some(a) if a.dims == p.shape => p.value.copy_from_slice(&a.data),
            _ => {
                missing.get_or_insert_with(|| path.to_string());
            }
        }
    });
    match missing {
        Some(path) => Err(Error::config(format!("checkpoint lacks parameter '{path}' or its shape differs"))),
        None => Ok(net),
    }
}

/// Optimizer state saved alongside `net`, if present.
pub fn restore_adam(ckpt: &Checkpoint, net: &mut Denoiser<f32>, config: AdamConfig) -> Result<Adam> {
    let mut adam = Adam::new(config, net);
    adam.step = ckpt.get("adam.step")?;
    let mut idx = 0;
    let mut missing = None;
    net.visit_params("", &mut |path, _| {
        match (ckpt.arrays.get(&format!("adam.m.{path}")), ckpt.arrays.get(&format!("adam.v.{path}"))) {
            (Some(m), Some(v)) if m.data.len() == adam.m[idx].len() && v.data.len() == adam.v[idx].len() => {
                adam.m[idx].copy_from_slice(&m.data);
                adam.v[idx].copy_from_slice(&v.data);
            }
            _ => {
                missing.get_or_insert_with(|| path.to_string());
            }
        }
        idx += 1;
    });
    match missing {
        Some(path) => Err(Error::config(format!("checkpoint lacks optimizer state for '{path}'"))),
        None => Ok(adam),
    }
}
